"""Diagnostics for trained (or freshly built) bundles.

Everything here is read-only with respect to model parameters: forward
passes run without a computation record and nothing calls an optimizer.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainBatch, MultiDomainDataset, SplitPlan, TrainingView, sample_step_batches, source_prefixes, split
from .errors import DimensionError, ParameterError
from .gradcheck import finite_diff_grad, relative_error
from .model import MaskPair, ModelBundle, ModelConfig, extract_features, make_mask_pairs
from .pipeline import PseudoLabelResult, RunRecord, TrainConfig, threshold_logits, train
from .rng import Rng
from .tensor import Tensor, cross_entropy, no_grad

# -- J+ / J- feature partition ---------------------------------------------


@dataclass(frozen=True)
class FeaturePartition:
    J_plus: np.ndarray
    J_minus: np.ndarray


def partition_features(v_f) -> FeaturePartition:
    """Split feature indices by the sign of ``v_f``; zeros go to ``J_plus``."""
    v = np.asarray(v_f.data if isinstance(v_f, Tensor) else v_f, dtype=float).reshape(-1)
    return FeaturePartition(np.flatnonzero(v >= 0), np.flatnonzero(v < 0))


def restricted_classifier(W: np.ndarray, M_ss: np.ndarray, v_cls: np.ndarray, v_f: np.ndarray,
                          flip: bool = False) -> np.ndarray:
    """``W * M_ss`` with each class row cut down to its prescribed feature set.

    Rows with ``v_cls[c] > 0`` keep J+, rows with ``v_cls[c] < 0`` keep J-,
    rows with ``v_cls[c] == 0`` stay whole. ``flip`` swaps J+ and J- (the
    sign-flipped control).
    """
    Wm = np.asarray(W, dtype=float) * np.asarray(M_ss, dtype=float)
    v_cls = np.asarray(v_cls, dtype=float).reshape(-1)
    part = partition_features(v_f)
    keep_pos = np.zeros(Wm.shape[1], dtype=bool)
    keep_pos[part.J_plus] = True
    if flip:
        keep_pos = ~keep_pos
    out = Wm.copy()
    out[v_cls > 0] *= keep_pos
    out[v_cls < 0] *= ~keep_pos
    return out


def _pl_inputs(bundle: ModelBundle, x, masks: MaskPair):
    if masks.v_cls is None or masks.v_f is None:
        raise ParameterError("restricted pseudo-labels need the low-rank mask factors")
    with no_grad():
        feats = extract_features(bundle, x).data
    return feats


def restricted_pseudo_label(bundle: ModelBundle, x, masks: MaskPair, tau: float,
                            truth: np.ndarray | None = None, slot: int = 0, flip: bool = False) -> PseudoLabelResult:
    """Pseudo-labels from logits that only use each class's prescribed features."""
    feats = _pl_inputs(bundle, x, masks)
    Wr = restricted_classifier(bundle.classifier(slot).data, masks.M_ss.data, masks.v_cls.data, masks.v_f.data, flip)
    return threshold_logits(feats @ Wr.T, tau, truth)


def full_pseudo_label(bundle: ModelBundle, x, masks: MaskPair | None, tau: float,
                      truth: np.ndarray | None = None, slot: int = 0) -> PseudoLabelResult:
    """Pseudo-labels from ``W * M_ss`` (or plain ``W`` when ``masks`` is None)."""
    with no_grad():
        feats = extract_features(bundle, x).data
    W = bundle.classifier(slot).data
    if masks is not None:
        W = W * masks.M_ss.data
    return threshold_logits(feats @ W.T, tau, truth)


def pl_agreement(a: PseudoLabelResult, b: PseudoLabelResult) -> float:
    """Share of the union of accepted points that both accept with the same label (1 for an empty union)."""
    la = dict(zip(a.accepted.tolist(), a.labels.tolist()))
    lb = dict(zip(b.accepted.tolist(), b.labels.tolist()))
    union = la.keys() | lb.keys()
    if not union:
        return 1.0
    same = sum(1 for i in la.keys() & lb.keys() if la[i] == lb[i])
    return same / len(union)


# -- masked-gradient identity --------------------------------------------------


@dataclass(frozen=True)
class IdentityCheck:
    backward_vs_closed: float
    closed_vs_numeric: float
    backward_vs_numeric: float
    grad_backward: np.ndarray = field(repr=False)
    grad_closed: np.ndarray = field(repr=False)

    @property
    def max_discrepancy(self) -> float:
        return max(self.backward_vs_closed, self.closed_vs_numeric, self.backward_vs_numeric)


def closed_form_grad(W: np.ndarray, M: np.ndarray, f_x: np.ndarray, target) -> np.ndarray:
    """``(softmax(z) - onehot)^T f(x) * M`` averaged over rows, with ``z = f(x) (W * M)^T``."""
    F = np.atleast_2d(f_x)
    y = np.atleast_1d(target)
    z = F @ (W * M).T
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return (p.T @ F) / len(y) * M


def verify_gradient_identity(W, M, f_x, target, eps: float = 1e-6) -> IdentityCheck:
    """Gradient of CE(f(x) (W * M)^T, y) w.r.t. W three ways: backward, closed form, finite differences.

    ``M`` is held constant. ``f_x`` is (d,) or (n, d); the loss is the batch mean.
    """
    W = np.asarray(W, dtype=float)
    M = np.asarray(M, dtype=float)
    F = np.atleast_2d(np.asarray(f_x, dtype=float))
    y = np.atleast_1d(np.asarray(target))
    if W.shape != M.shape:
        raise DimensionError(f"W {W.shape} and M {M.shape} differ")
    if F.shape[1] != W.shape[1]:
        raise DimensionError(f"feature width {F.shape[1]} != {W.shape[1]}")
    if len(y) != F.shape[0]:
        raise DimensionError("one target per feature row is required")

    Wt = Tensor(W.copy(), requires_grad=True)
    mask, feats = Tensor(M), Tensor(F)

    def loss():
        return cross_entropy(feats @ (Wt * mask).T, y)

    L = loss()
    L.backward()
    g_back = Wt.grad
    g_closed = closed_form_grad(W, M, F, y)
    with no_grad():
        (g_num,) = finite_diff_grad(lambda: float(loss().data), [Wt], eps=eps)
    return IdentityCheck(
        relative_error(g_back, g_closed),
        relative_error(g_closed, g_num),
        relative_error(g_back, g_num),
        g_back,
        g_closed,
    )


# -- held-out diagnostic batches ---------------------------------------------


def held_batches(view: TrainingView, n_batches: int = 8, batch_size: int = 64, seed: int = 12345) -> list[DomainBatch]:
    """Fixed unlabeled batches (n_batches per source domain), drawn from their own stream."""
    rng = Rng(seed).spawn(7)
    out = []
    for _ in range(n_batches):
        out.extend(sample_step_batches(view, 1, batch_size, rng))
    return out


def _masks_for(bundle: ModelBundle, batches: Sequence[DomainBatch]) -> list[MaskPair]:
    with no_grad():
        feats = [extract_features(bundle, b.unlabeled_x) for b in batches]
        return list(make_mask_pairs(feats, bundle, Rng(0)))


# -- threshold sweep ---------------------------------------------------------

SWEEP_TAUS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


@dataclass
class SweepResult:
    thresholds: list[float]
    pl_accuracy: dict[str, list[float]]
    utilization: dict[str, list[float]]

    def modulated_wins(self) -> int:
        """Number of thresholds where the modulated PL accuracy is >= the baseline's (NaN never wins)."""
        a, b = np.array(self.pl_accuracy["modulated"]), np.array(self.pl_accuracy["baseline"])
        return int(np.sum(a >= b))

    def utilization_monotone(self) -> bool:
        return all(np.all(np.diff(u) <= 0) for u in self.utilization.values())

    def to_rows(self) -> list[dict]:
        rows = []
        for i, tau in enumerate(self.thresholds):
            for variant in self.pl_accuracy:
                rows.append({"tau": tau, "variant": variant, "pl_accuracy": self.pl_accuracy[variant][i],
                             "utilization": self.utilization[variant][i]})
        return rows


def _pooled(results: Sequence[PseudoLabelResult]) -> tuple[float, float]:
    acc = sum(len(r.accepted) for r in results)
    seen = sum(r.n_unlabeled for r in results)
    correct = sum(r.n_correct for r in results)
    return (correct / acc if acc else float("nan")), (acc / seen if seen else 0.0)


def threshold_sweep(bundle: ModelBundle, batches: Sequence[DomainBatch], taus: Sequence[float] = SWEEP_TAUS,
                    baseline: ModelBundle | None = None) -> SweepResult:
    """PL accuracy and utilization per tau, with and without modulation, on the same batches.

    The ``modulated`` variant thresholds ``W * M_ss`` of ``bundle``. The
    ``baseline`` variant thresholds plain ``W`` of ``baseline`` when given
    (e.g. a model trained without modulation), else plain ``W`` of ``bundle``.
    """
    taus = [float(t) for t in taus]
    if any(not 0.0 < t <= 1.0 for t in taus):
        raise ParameterError("thresholds must lie in (0, 1]")
    if list(taus) != sorted(taus):
        raise ParameterError("thresholds must be sorted ascending")
    other = baseline if baseline is not None else bundle
    masks = _masks_for(bundle, batches)
    with no_grad():
        z_mod = [extract_features(bundle, b.unlabeled_x).data @ (bundle.classifier(b.slot).data * m.M_ss.data).T
                 for b, m in zip(batches, masks)]
        z_base = [extract_features(other, b.unlabeled_x).data @ other.classifier(b.slot).data.T for b in batches]
    acc = {"modulated": [], "baseline": []}
    util = {"modulated": [], "baseline": []}
    for tau in taus:
        for name, zs in (("modulated", z_mod), ("baseline", z_base)):
            a, u = _pooled([threshold_logits(z, tau, b.diagnostic_labels) for z, b in zip(zs, batches)])
            acc[name].append(a)
            util[name].append(u)
    return SweepResult(taus, acc, util)


# -- restricted-feature pseudo-labels over training ---------------------------


class RestrictedLabelProbe:
    """Epoch callback comparing full, restricted and sign-flipped pseudo-labels on fixed batches.

    Pass an instance to :func:`dgwm.pipeline.train` via ``callbacks``; one row
    per epoch lands in ``self.rows`` and in ``record.extras["restricted"]``.
    """

    def __init__(self, batches: Sequence[DomainBatch], tau: float = 0.95):
        self.batches = list(batches)
        self.tau = tau
        self.rows: list[dict] = []

    def evaluate(self, bundle: ModelBundle) -> dict:
        masks = _masks_for(bundle, self.batches)
        full, restr, flip = [], [], []
        for b, m in zip(self.batches, masks):
            full.append(full_pseudo_label(bundle, b.unlabeled_x, m, self.tau, b.diagnostic_labels, b.slot))
            restr.append(restricted_pseudo_label(bundle, b.unlabeled_x, m, self.tau, b.diagnostic_labels, b.slot))
            flip.append(restricted_pseudo_label(bundle, b.unlabeled_x, m, self.tau, b.diagnostic_labels, b.slot,
                                                flip=True))
        agree_r = float(np.mean([pl_agreement(a, r) for a, r in zip(full, restr)]))
        agree_f = float(np.mean([pl_agreement(a, r) for a, r in zip(full, flip)]))
        return {
            "agreement_restricted": agree_r,
            "agreement_flipped": agree_f,
            "pl_accuracy_full": _pooled(full)[0],
            "pl_accuracy_restricted": _pooled(restr)[0],
            "pl_accuracy_flipped": _pooled(flip)[0],
        }

    def __call__(self, epoch: int, bundle: ModelBundle, view: TrainingView, record: RunRecord) -> None:
        row = {"epoch": epoch, **self.evaluate(bundle)}
        self.rows.append(row)
        record.extras.setdefault("restricted", []).append(row)


# -- adding source domains ---------------------------------------------------


@dataclass
class AddingDomainsResult:
    runs: dict[tuple[int, bool], RunRecord]
    first_source: int

    @property
    def prefix_sizes(self) -> list[int]:
        return sorted({n for n, _ in self.runs})

    def pl_accuracy(self, n_sources: int, modulated: bool, domain: str = "first") -> float:
        """Mean over epochs of the PL accuracy; ``domain`` is ``"first"`` (the source shared by
        every prefix), ``"all"`` (pooled over the prefix's sources) or a domain id string."""
        rec = self.runs[(n_sources, modulated)]
        key = str(self.first_source) if domain == "first" else domain
        vals = rec.series("pl_accuracy", key)
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")

    def series(self, modulated: bool, domain: str = "first") -> list[float]:
        return [self.pl_accuracy(n, modulated, domain) for n in self.prefix_sizes]

    def drop(self, modulated: bool, domain: str = "first") -> float:
        s = self.series(modulated, domain)
        return s[0] - s[-1]


def adding_domains_study(dataset: MultiDomainDataset, plan: SplitPlan, cfg: TrainConfig,
                         model_cfg: ModelConfig) -> AddingDomainsResult:
    """Train on source prefixes of size 1..K, each with and without modulation (2K runs)."""
    prefixes = source_prefixes(plan, len(dataset.domains))
    if len(prefixes) < 2:
        raise ParameterError("the study needs at least two source domains")
    runs = {}
    for p in prefixes:
        view = split(dataset, p)
        for modulated in (False, True):
            _, rec = train(view, replace(cfg, modulation=modulated), model_cfg)
            runs[(len(p.source_domains), modulated)] = rec
    return AddingDomainsResult(runs, prefixes[0].source_domains[0])


# -- wall-clock overhead -------------------------------------------------------


@dataclass
class OverheadReport:
    seconds_off: float
    seconds_on: float
    epochs_off: list[float]
    epochs_on: list[float]

    @property
    def percent(self) -> float:
        return (self.seconds_on - self.seconds_off) / self.seconds_off * 100.0


def overhead_report(view: TrainingView, cfg: TrainConfig, model_cfg: ModelConfig, repeats: int = 3) -> OverheadReport:
    """Mean per-epoch training seconds with modulation off vs on.

    Runs alternate off/on ``repeats`` times so slow drift in machine load hits
    both sides alike; the first epoch of every run is a warm-up and is dropped.
    """
    if cfg.epochs < 2:
        raise ParameterError("need at least 2 epochs (the first is a warm-up)")
    times = {False: [], True: []}
    for _ in range(repeats):
        for modulated in (False, True):
            _, rec = train(view, replace(cfg, modulation=modulated), model_cfg)
            times[modulated].extend(rec.series("wall_seconds")[1:].tolist())
    return OverheadReport(float(np.mean(times[False])), float(np.mean(times[True])), times[False], times[True])


# -- noise-variance sweep ----------------------------------------------------


def epsilon_sweep(view: TrainingView, cfg: TrainConfig, model_cfg: ModelConfig,
                  values: Sequence[float] = (0.1, 0.5, 1.0, 2.0), seeds: Sequence[int] = (0,)) -> dict[float, dict]:
    """Target accuracy (mean, std over seeds) and loss finiteness per noise variance."""
    out = {}
    for eps in values:
        accs, finite = [], True
        for seed in seeds:
            _, rec = train(view, replace(cfg, seed=seed, modulation=True), replace(model_cfg, epsilon_sq=eps))
            accs.append(rec.final_target_accuracy)
            finite &= bool(np.all(np.isfinite(rec.step_losses)))
        out[float(eps)] = {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "finite": finite,
                           "accuracies": accs}
    return out


# -- domain-information export -------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_provenance(path, config: dict, seed: int | None = None) -> Path:
    """JSON sidecar ``<path>.json`` with the config hash, seed and a UTC timestamp."""
    path = Path(path)
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps({
        "file": path.name,
        "config_hash": config_hash(config),
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config,
    }, indent=2, sort_keys=True, default=str))
    return side


def export_domain_info(record: RunRecord, path) -> Path:
    """CSV of ``epoch, step, domain_id, I_0 .. I_{d-1}`` with a provenance sidecar."""
    if not record.domain_info:
        raise ParameterError("run has no recorded domain vectors (was modulation on?)")
    path = Path(path)
    d = len(record.domain_info[0][3])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "domain_id", *(f"I_{j}" for j in range(d))])
        for epoch, step, dom, vec in record.domain_info:
            w.writerow([epoch, step, dom, *(repr(float(v)) for v in vec)])
    write_provenance(path, record.config, record.config.get("train", {}).get("seed"))
    return path


def read_domain_info(path) -> list[tuple[int, int, int, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), int(r[1]), int(r[2]), np.array([float(v) for v in r[3:]])) for r in rows[1:]]


def domain_separation(record: RunRecord, epoch: int | None = None) -> tuple[float, float]:
    """(smallest distance between per-domain mean vectors, largest within-domain RMS spread).

    Uses the vectors of ``epoch`` (default: the last recorded epoch).
    """
    if not record.domain_info:
        raise ParameterError("run has no recorded domain vectors")
    last = max(e for e, *_ in record.domain_info) if epoch is None else epoch
    groups: dict[int, list[np.ndarray]] = {}
    for e, _, dom, vec in record.domain_info:
        if e == last:
            groups.setdefault(dom, []).append(vec)
    means = {k: np.mean(v, axis=0) for k, v in groups.items()}
    spread = max(float(np.sqrt(np.mean(np.sum((np.array(v) - means[k]) ** 2, axis=1)))) for k, v in groups.items())
    keys = sorted(means)
    between = min(float(np.linalg.norm(means[a] - means[b])) for i, a in enumerate(keys) for b in keys[i + 1:])
    return between, spread


def save_rows(rows: Sequence[dict], path, config: dict | None = None, seed: int | None = None) -> Path:
    """Write dict rows as CSV (header from the first row) plus a provenance sidecar."""
    path = Path(path)
    if not rows:
        raise ParameterError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    write_provenance(path, config or {}, seed)
    return path


__all__ = [
    "AddingDomainsResult", "FeaturePartition", "IdentityCheck", "OverheadReport", "RestrictedLabelProbe",
    "SWEEP_TAUS", "SweepResult", "adding_domains_study", "closed_form_grad", "config_hash", "domain_separation",
    "epsilon_sweep", "export_domain_info", "full_pseudo_label", "held_batches", "overhead_report",
    "partition_features", "pl_agreement", "read_domain_info", "restricted_classifier", "restricted_pseudo_label",
    "save_rows", "threshold_sweep", "verify_gradient_identity", "write_provenance",
]
