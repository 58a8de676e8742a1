"""Training with domain-guided weight modulation on top of FixMatch / EntMin.

Per step and per source domain k:

1. ``I`` = mean backbone feature of the domain's unlabeled batch.
2. ``M_ss`` from ``I`` without noise, ``M_lrn`` from ``I`` with noise.
3. Pseudo-label the weakly augmented unlabeled batch with ``W * M_ss``
   (accept when the top softmax probability reaches ``tau``).
4. Cross-entropy of ``W * M_lrn`` on strongly augmented accepted points
   plus on the weakly augmented labeled points.

The per-domain losses are summed and applied in one optimizer update.
Inference uses the plain ``W``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DomainBatch, TrainingView, sample_step_batches, strong_augment, weak_augment
from .errors import DimensionError, ParameterError
from .model import MaskPair, ModelBundle, ModelConfig, extract_features, make_mask_pairs, modulate, predict_logits
from .optim import SGD, SgdConfig, cosine_lr
from .rng import Rng
from .tensor import Tensor, cross_entropy, entropy, no_grad

BASELINES = ("fixmatch", "entmin", "supervised_only")

CSV_COLUMNS = [
    "epoch",
    "domain",
    "pl_accuracy",
    "pl_utilization",
    "loss_labeled",
    "loss_unlabeled",
    "target_accuracy",
    "lr_backbone",
    "lr_head",
    "wall_seconds",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    labeled_batch: int = 16
    unlabeled_batch: int = 16
    tau: float = 0.95
    baseline: str = "fixmatch"
    entmin_weight: float = 1.0
    modulation: bool = True
    seed: int = 0
    lr_backbone: float = 0.003
    lr_head: float = 0.01
    momentum: float = 0.9
    update_per_domain: bool = False
    weak_noise: float = 0.05
    strong_noise: float = 0.2
    strong_dropout: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ParameterError(f"tau must lie in (0, 1], got {self.tau}")
        if self.baseline not in BASELINES:
            raise ParameterError(f"baseline must be one of {BASELINES}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ParameterError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ParameterError("batch sizes must be positive")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr_backbone, self.lr_head, self.epochs, self.momentum)


# -- pseudo-labeling ---------------------------------------------------------


@dataclass
class PseudoLabelResult:
    accepted: np.ndarray  # indices into the unlabeled batch
    labels: np.ndarray
    confidences: np.ndarray
    n_unlabeled: int
    n_correct: int = 0
    has_truth: bool = False

    @property
    def utilization(self) -> float:
        return len(self.accepted) / self.n_unlabeled if self.n_unlabeled else 0.0

    @property
    def pl_accuracy(self) -> float:
        """Fraction of accepted labels that are correct; NaN when nothing was accepted."""
        if not self.has_truth or len(self.accepted) == 0:
            return math.nan
        return self.n_correct / len(self.accepted)


def threshold_logits(logits: np.ndarray, tau: float, truth: np.ndarray | None = None) -> PseudoLabelResult:
    """Accept row i iff max softmax(logits[i]) >= tau; label = argmax (lowest index on ties).

    The test is done in log space, ``logsumexp_{j != top}(z_j - z_top) <= log((1 - tau) / tau)``,
    so tau = 1 rejects every finite row even when the rounded softmax would read 1.0.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    n, C = z.shape
    top = np.argmax(z, axis=1)
    rows = np.arange(n)
    gap = z - z[rows, top][:, None]
    gap[rows, top] = -np.inf
    m = gap.max(axis=1)
    lse_rest = m + np.log(np.exp(gap - m[:, None]).sum(axis=1))
    with np.errstate(divide="ignore"):
        bound = np.log((1.0 - tau) / tau)
    ok = lse_rest <= bound
    conf = 1.0 / (1.0 + np.exp(lse_rest))
    acc = np.flatnonzero(ok)
    labels = top[acc]
    res = PseudoLabelResult(acc, labels, conf[acc], n)
    if truth is not None:
        res.has_truth = True
        res.n_correct = int(np.sum(labels == np.asarray(truth)[acc]))
    return res


def modulated_logits(feats: Tensor, W: Tensor, M: Tensor | None) -> Tensor:
    Wm = W if M is None else modulate(W, M)
    return feats @ Wm.T


def pseudo_label(bundle: ModelBundle, weak_x, M_ss: Tensor | None, tau: float,
                 truth: np.ndarray | None = None, slot: int = 0) -> PseudoLabelResult:
    """Threshold the modulated classifier on already weakly augmented inputs.

    Runs without a computation record: pseudo-labels are constants.
    """
    with no_grad():
        feats = extract_features(bundle, weak_x)
        W = bundle.classifier(slot)
        z = modulated_logits(feats, W, None if M_ss is None else M_ss.detach())
    return threshold_logits(z.data, tau, truth)


# -- losses --------------------------------------------------------------------


def unlabeled_loss(strong_logits: Tensor, plr: PseudoLabelResult) -> Tensor:
    """Mean CE of the accepted rows against their pseudo-labels; exactly 0 if none accepted."""
    if len(plr.accepted) == 0:
        return Tensor(0.0)
    if np.max(plr.accepted) >= strong_logits.shape[0]:
        raise IndexError("pseudo-label index outside the unlabeled batch")
    return cross_entropy(strong_logits[plr.accepted], plr.labels)


def labeled_loss(logits: Tensor, y: np.ndarray) -> Tensor:
    if len(y) == 0:
        raise ParameterError("labeled loss of an empty batch")
    return cross_entropy(logits, np.asarray(y))


def entmin_loss(logits: Tensor) -> Tensor:
    """Mean prediction entropy over the batch."""
    return entropy(logits, axis=-1).mean()


# -- one training step -------------------------------------------------------


@dataclass
class DomainStepResult:
    domain_id: int
    plr: PseudoLabelResult
    loss_labeled: float
    loss_unlabeled: float
    masks: MaskPair | None


def _use_masks(bundle: ModelBundle, cfg: TrainConfig) -> bool:
    return cfg.modulation and bundle.cfg.mask_variant != "off"


@dataclass
class _Views:
    u_weak: np.ndarray
    u_strong: np.ndarray
    x_weak: np.ndarray | None


def _augment(batch: DomainBatch, cfg: TrainConfig, std: np.ndarray, rng: Rng) -> _Views:
    u_weak = weak_augment(batch.unlabeled_x, rng, std, cfg.weak_noise)
    u_strong = strong_augment(batch.unlabeled_x, rng, std, cfg.strong_noise, cfg.strong_dropout)
    x_weak = weak_augment(batch.labeled_x, rng, std, cfg.weak_noise) if len(batch.labeled_y) else None
    return _Views(u_weak, u_strong, x_weak)


def _domain_loss(batch: DomainBatch, views: _Views, bundle: ModelBundle, cfg: TrainConfig,
                 masks: MaskPair | None, weak_feats: Tensor | None,
                 W_lrn: Tensor | None = None) -> tuple[Tensor, DomainStepResult]:
    W = bundle.classifier(batch.slot)
    if masks is None:
        W_lrn = W
        plr = pseudo_label(bundle, views.u_weak, None, cfg.tau, batch.diagnostic_labels, batch.slot)
    else:
        if W_lrn is None:
            W_lrn = modulate(W, masks.M_lrn)
        z_weak = weak_feats.data @ (W.data * masks.M_ss.data).T
        plr = threshold_logits(z_weak, cfg.tau, batch.diagnostic_labels)

    total = None
    loss_l = loss_u = 0.0
    if views.x_weak is not None:
        L_l = labeled_loss(extract_features(bundle, views.x_weak) @ W_lrn.T, batch.labeled_y)
        loss_l = float(L_l.data)
        total = L_l
    if cfg.baseline == "fixmatch":
        if len(plr.accepted):
            strong = extract_features(bundle, views.u_strong)
            L_u = unlabeled_loss(strong @ W_lrn.T, plr)
            loss_u = float(L_u.data)
            total = L_u if total is None else total + L_u
    elif cfg.baseline == "entmin":
        L_u = entmin_loss(extract_features(bundle, views.u_weak) @ W_lrn.T) * cfg.entmin_weight
        loss_u = float(L_u.data)
        total = L_u if total is None else total + L_u
    if total is None:
        total = Tensor(0.0)
    return total, DomainStepResult(batch.domain_id, plr, loss_l, loss_u, masks)


def step_loss(batches: Sequence[DomainBatch], bundle: ModelBundle, cfg: TrainConfig, std: np.ndarray,
              rng: Rng) -> tuple[Tensor, list[DomainStepResult]]:
    """Summed loss of one step over its domain batches (no parameter update).

    Random draws happen in a fixed order: for each domain weak(u), strong(u),
    weak(x); then the mask noise for all domains at once.
    """
    if not batches:
        raise ParameterError("a training step needs at least one domain batch")
    views = [_augment(b, cfg, std, rng) for b in batches]
    masks: list = [None] * len(batches)
    weak_feats: list = [None] * len(batches)
    if _use_masks(bundle, cfg):
        raws = []
        for i, (b, v) in enumerate(zip(batches, views)):
            n = len(b.unlabeled_x)
            # one record-free pass covers the domain vector input and the pseudo-label features
            with no_grad():
                both = extract_features(bundle, np.concatenate([b.unlabeled_x, v.u_weak]))
            weak_feats[i] = both[n:]
            raws.append(both[:n] if bundle.cfg.detach_domain_info else extract_features(bundle, b.unlabeled_x))
        masks = make_mask_pairs(raws, bundle, rng, training=True)
    W_lrn: list = [None] * len(batches)
    if masks[0] is not None and masks.M_lrn_all is not None and not bundle.cfg.separate_classifiers:
        stacked = bundle.W * masks.M_lrn_all  # (K, C, d): one node for every domain
        W_lrn = [stacked[k] for k in range(len(batches))]
    total, results = None, []
    for b, v, m, wf, wl in zip(batches, views, masks, weak_feats, W_lrn):
        loss, res = _domain_loss(b, v, bundle, cfg, m, wf, wl)
        total = loss if total is None else total + loss
        results.append(res)
    return total, results


def domain_loss(batch: DomainBatch, bundle: ModelBundle, cfg: TrainConfig, std: np.ndarray,
                rng: Rng) -> tuple[Tensor, DomainStepResult]:
    """L_labeled + L_unlabeled for a single source domain."""
    loss, results = step_loss([batch], bundle, cfg, std, rng)
    return loss, results[0]


def train_step(batches: Sequence[DomainBatch], bundle: ModelBundle, optimizer: SGD, cfg: TrainConfig,
               std: np.ndarray, rng: Rng) -> tuple[float, list[DomainStepResult]]:
    """Forward, backward and update. Returns the summed loss value and per-domain results."""
    if not batches:
        raise ParameterError("a training step needs at least one domain batch")
    if cfg.update_per_domain:
        value, results = 0.0, []
        for batch in batches:
            optimizer.zero_grad()
            loss, res = domain_loss(batch, bundle, cfg, std, rng)
            loss.backward()
            optimizer.step()
            value += float(loss.data)
            results.append(res)
        return value, results
    optimizer.zero_grad()
    loss, results = step_loss(batches, bundle, cfg, std, rng)
    loss.backward()
    optimizer.step()
    return float(loss.data), results


# -- inference ---------------------------------------------------------------


def predict(bundle: ModelBundle, x) -> np.ndarray:
    """argmax of the unmodulated logits on unaugmented input (lowest index on ties)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != bundle.cfg.input_dim:
        raise DimensionError(f"input width {x.shape[-1]} != {bundle.cfg.input_dim}")
    return np.argmax(predict_logits(bundle, x), axis=-1)


def accuracy(bundle: ModelBundle, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(bundle, x) == y))


# -- full training run -------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    rows: list[dict] = field(default_factory=list)
    domain_info: list[tuple[int, int, int, np.ndarray]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def epoch_rows(self, domain: str = "all") -> list[dict]:
        return [r for r in self.rows if r["domain"] == domain]

    def series(self, column: str, domain: str = "all") -> np.ndarray:
        return np.array([r[column] for r in self.epoch_rows(domain)], dtype=float)

    @property
    def final_target_accuracy(self) -> float:
        rows = self.epoch_rows()
        return rows[-1]["target_accuracy"] if rows else math.nan

    def to_csv(self, path, include_wall: bool = True) -> Path:
        path = Path(path)
        cols = CSV_COLUMNS if include_wall else [c for c in CSV_COLUMNS if c != "wall_seconds"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row[k]) for k in cols})
        return path

    def summary(self) -> dict:
        rows = self.epoch_rows()
        out = {"config": self.config, "seed": self.config.get("train", {}).get("seed"), "epochs": len(rows)}
        if rows:
            for col in ("pl_accuracy", "pl_utilization", "loss_labeled", "loss_unlabeled", "target_accuracy",
                        "wall_seconds"):
                vals = self.series(col)
                out[f"final_{col}"] = _json_float(vals[-1])
                out[f"mean_{col}"] = _json_float(np.nanmean(vals)) if np.isfinite(vals).any() else None
        return out

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return path


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _json_float(v):
    v = float(v)
    return None if math.isnan(v) else v


EpochCallback = Callable[[int, ModelBundle, TrainingView, "RunRecord"], None]


def train(view: TrainingView, cfg: TrainConfig, model_cfg: ModelConfig,
          callbacks: Sequence[EpochCallback] = ()) -> tuple[ModelBundle, RunRecord]:
    """Run ``cfg.epochs`` x ``cfg.steps_per_epoch`` steps; log one row per epoch per domain plus ``all``."""
    if model_cfg.separate_classifiers and model_cfg.num_domains != len(view.sources):
        model_cfg = replace(model_cfg, num_domains=len(view.sources))
    bundle = ModelBundle(model_cfg, seed=cfg.seed)
    record = RunRecord({"train": asdict(cfg), "model": asdict(model_cfg),
                        "sources": [s.domain_id for s in view.sources], "target": view.target_domain})
    sgd_cfg = cfg.sgd()
    opt = SGD(bundle.param_groups(), momentum=cfg.momentum)
    rng = Rng(cfg.seed).spawn(1)

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        opt.lr["backbone"] = cosine_lr(epoch, sgd_cfg, cfg.lr_backbone)
        opt.lr["head"] = cosine_lr(epoch, sgd_cfg, cfg.lr_head)
        tally = {s.domain_id: np.zeros(5) for s in view.sources}  # correct, accepted, seen, L_l, L_u
        for step in range(cfg.steps_per_epoch):
            batches = sample_step_batches(view, cfg.labeled_batch, cfg.unlabeled_batch, rng)
            loss, results = train_step(batches, bundle, opt, cfg, view.feature_std, rng)
            record.step_losses.append(loss)
            for res in results:
                t = tally[res.domain_id]
                t += (res.plr.n_correct, len(res.plr.accepted), res.plr.n_unlabeled,
                      res.loss_labeled, res.loss_unlabeled)
                if res.masks is not None:
                    record.domain_info.append((epoch, step, res.domain_id, res.masks.I.data.copy()))
        wall = time.perf_counter() - start
        target_acc = accuracy(bundle, view.target_x, view.target_y)
        common = {"epoch": epoch, "target_accuracy": target_acc, "lr_backbone": opt.lr["backbone"],
                  "lr_head": opt.lr["head"], "wall_seconds": wall}
        pooled = np.zeros(5)
        for dom, t in tally.items():
            pooled += t
            record.rows.append({**common, "domain": str(dom), **_tally_metrics(t, cfg.steps_per_epoch)})
        record.rows.append({**common, "domain": "all",
                            **_tally_metrics(pooled, cfg.steps_per_epoch * len(tally))})
        for cb in callbacks:
            cb(epoch, bundle, view, record)
    return bundle, record


def _tally_metrics(t: np.ndarray, n_steps: int) -> dict:
    correct, accepted, seen, l_l, l_u = t
    return {
        "pl_accuracy": correct / accepted if accepted else math.nan,
        "pl_utilization": accepted / seen if seen else 0.0,
        "loss_labeled": l_l / n_steps,
        "loss_unlabeled": l_u / n_steps,
    }
