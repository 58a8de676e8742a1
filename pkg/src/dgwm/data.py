"""Synthetic multi-domain classification problems and SSDG samplers.

Every domain shares the same C Gaussian class clusters in R^D.  The
first ``D // 2`` coordinates carry the class signal; the rest are a
nuisance block of pure noise.  Domains differ by one of three shift
families, scaled by ``shift_strength`` s:

* ``style``       per-domain polarity inversion of a random subset of the
                  signal channels (each flipped with probability s / 2),
                  per-axis gain ``exp(0.3 s N(0, 1))`` and a faint constant
                  offset ``0.2 s N(0, 1)`` on the nuisance block
* ``background``  per-domain constant offset on the nuisance block
* ``corruption``  per-domain heavy-tailed (Student-t) noise on the signal block

Style domains conflict with one another: a flipped channel points to a
different class than it does elsewhere, and a single sample says little
about which domain it came from.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .rng import Rng

SHIFT_KINDS = ("style", "background", "corruption")
SETTINGS = ("few_labels", "one_labeled_domain")


@dataclass(frozen=True)
class ShiftSpec:
    shift_kind: str = "style"
    num_domains: int = 4
    num_classes: int = 5
    input_dim: int = 20
    samples_per_class_per_domain: int = 200
    shift_strength: float = 1.0
    seed: int = 0
    class_sep: float = 3.0
    class_frequencies: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.class_frequencies is not None:
            object.__setattr__(self, "class_frequencies", tuple(float(v) for v in self.class_frequencies))
        if self.shift_kind not in SHIFT_KINDS:
            raise ParameterError(f"shift_kind must be one of {SHIFT_KINDS}")
        if self.num_domains < 2:
            raise ParameterError("need at least one source and one target domain")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ParameterError("input_dim must be >= 2")
        if self.samples_per_class_per_domain < 1:
            raise ParameterError("samples_per_class_per_domain must be >= 1")
        if self.shift_strength < 0:
            raise ParameterError("shift_strength must be >= 0")
        if self.class_frequencies is not None:
            freq = np.asarray(self.class_frequencies)
            if freq.shape != (self.num_classes,) or np.any(freq <= 0):
                raise ParameterError("class_frequencies needs one positive weight per class")


@dataclass
class Domain:
    name: str
    x: np.ndarray
    y: np.ndarray


@dataclass
class MultiDomainDataset:
    spec: ShiftSpec
    domains: list[Domain]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]


def _class_counts(spec: ShiftSpec) -> np.ndarray:
    n = spec.samples_per_class_per_domain
    if spec.class_frequencies is None:
        return np.full(spec.num_classes, n)
    freq = np.asarray(spec.class_frequencies) / max(spec.class_frequencies)
    return np.maximum(1, np.round(freq * n)).astype(int)


def generate(spec: ShiftSpec) -> MultiDomainDataset:
    """Draw every domain of ``spec``; a pure function of the spec (including its seed)."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    D, C = spec.input_dim, spec.num_classes
    sig = D // 2
    centers = np.zeros((C, D))
    centers[:, :sig] = rng.normal(0.0, spec.class_sep / np.sqrt(sig) * np.sqrt(2.0), (C, sig))
    counts = _class_counts(spec)
    s = spec.shift_strength

    domains = []
    for k in range(spec.num_domains):
        y = np.repeat(np.arange(C), counts)
        x = centers[y] + rng.normal(0.0, 1.0, (len(y), D))
        if spec.shift_kind == "style":
            flip = rng.random(sig) < min(0.5 * s, 1.0)
            gain = np.exp(s * 0.3 * rng.normal(0.0, 1.0, D))
            x[:, :sig] -= 2.0 * flip * centers[y, :sig]
            x[:, sig:] += s * 0.2 * rng.normal(0.0, 1.0, D - sig)
            x *= gain
        elif spec.shift_kind == "background":
            offset = rng.normal(0.0, 3.0, D - sig)
            x[:, sig:] += s * offset
        else:
            mag = s * rng.uniform(0.25, 1.0)
            x[:, :sig] += mag * rng.standard_t(3.0, (len(y), sig))
        order = rng.permutation(len(y))
        domains.append(Domain(f"domain{k}", x[order], y[order]))
    return MultiDomainDataset(spec, domains)


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    target_domain: int
    setting: str = "few_labels"
    labels_per_class: int = 10
    labeled_domain: int | None = None  # setting 2 only
    source_domains: tuple[int, ...] | None = None  # None -> every non-target domain
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ParameterError(f"setting must be one of {SETTINGS}")
        if self.source_domains is not None:
            object.__setattr__(self, "source_domains", tuple(int(k) for k in self.source_domains))
            if self.target_domain in self.source_domains:
                raise ParameterError("target domain cannot be a source")

    def sources(self, num_domains: int) -> list[int]:
        if self.source_domains is not None:
            return list(self.source_domains)
        return [k for k in range(num_domains) if k != self.target_domain]


@dataclass
class SourceDomain:
    """Training data from one source domain.

    ``diagnostic_labels`` are the hidden ground truth of ``unlabeled_x``;
    they feed pseudo-label accuracy reporting and nothing else.
    """

    domain_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    diagnostic_labels: np.ndarray = field(repr=False)


@dataclass
class TrainingView:
    sources: list[SourceDomain]
    target_x: np.ndarray
    target_y: np.ndarray
    target_domain: int
    num_classes: int
    feature_std: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.target_x.shape[1]


def split(dataset: MultiDomainDataset, plan: SplitPlan) -> TrainingView:
    K = len(dataset.domains)
    if not 0 <= plan.target_domain < K:
        raise ParameterError(f"target_domain {plan.target_domain} out of range")
    sources = plan.sources(K)
    if not sources:
        raise ParameterError("no source domains")
    if any(not 0 <= k < K for k in sources):
        raise ParameterError("source domain index out of range")
    C = dataset.num_classes
    rng = np.random.Generator(np.random.PCG64([plan.seed, 7919]))
    if plan.setting == "one_labeled_domain":
        labeled_dom = sources[0] if plan.labeled_domain is None else plan.labeled_domain
        if labeled_dom not in sources:
            raise ParameterError("labeled_domain must be one of the sources")

    out = []
    for k in sources:
        dom = dataset.domains[k]
        if plan.setting == "few_labels":
            picks = []
            for c in range(C):
                members = np.flatnonzero(dom.y == c)
                if plan.labels_per_class > members.size:
                    raise ParameterError(
                        f"{plan.labels_per_class} labels per class exceeds the {members.size} "
                        f"samples of class {c} in domain {k}"
                    )
                picks.append(rng.choice(members, plan.labels_per_class, replace=False))
            lab = np.sort(np.concatenate(picks))
        else:
            lab = np.arange(len(dom.y)) if k == labeled_dom else np.array([], dtype=int)
        out.append(
            SourceDomain(
                domain_id=k,
                labeled_x=dom.x[lab],
                labeled_y=dom.y[lab],
                unlabeled_x=dom.x.copy(),
                diagnostic_labels=dom.y.copy(),
            )
        )
    std = np.concatenate([s.unlabeled_x for s in out]).std(axis=0)
    tgt = dataset.domains[plan.target_domain]
    return TrainingView(out, tgt.x, tgt.y, plan.target_domain, C, std)


def leave_one_domain_out(dataset: MultiDomainDataset, **plan_kwargs) -> list[SplitPlan]:
    """One plan per held-out target; the remaining domains are the sources."""
    K = len(dataset.domains)
    if K < 2:
        raise ParameterError("leave-one-domain-out needs at least 2 domains")
    return [SplitPlan(target_domain=t, **plan_kwargs) for t in range(K)]


def source_prefixes(plan: SplitPlan, num_domains: int) -> list[SplitPlan]:
    """Plans training on the first 1, 2, ..., K sources with the target fixed."""
    srcs = plan.sources(num_domains)
    return [
        SplitPlan(**{**asdict(plan), "source_domains": tuple(srcs[:n])}) for n in range(1, len(srcs) + 1)
    ]


# -- augmentation ------------------------------------------------------------


def weak_augment(x: np.ndarray, rng: Rng, std: np.ndarray, noise_scale: float = 0.05) -> np.ndarray:
    """Additive Gaussian jitter with per-coordinate scale ``noise_scale * std``."""
    if noise_scale == 0:
        return np.array(x, dtype=float, copy=True)
    return x + rng.normal(np.shape(x)) * (noise_scale * std)


def strong_augment(
    x: np.ndarray,
    rng: Rng,
    std: np.ndarray,
    noise_scale: float = 0.2,
    dropout: float = 0.3,
    scale_range: tuple[float, float] = (0.8, 1.2),
) -> np.ndarray:
    """Larger jitter, then coordinate dropout, then a random global rescale per sample."""
    x = np.asarray(x, dtype=float)
    out = x + rng.normal(x.shape) * (noise_scale * std)
    keep = rng.random(x.shape) >= dropout
    out = out * keep
    factor_shape = x.shape[:-1] + (1,) if x.ndim > 1 else (1,)
    return out * rng.uniform(scale_range[0], scale_range[1], factor_shape)


# -- minibatches -------------------------------------------------------------


@dataclass
class DomainBatch:
    """One source domain's share of a training step."""

    domain_id: int
    slot: int  # position among the training sources; indexes per-domain classifiers
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    diagnostic_labels: np.ndarray = field(repr=False)


def sample_step_batches(view: TrainingView, labeled_batch: int, unlabeled_batch: int, rng: Rng) -> list[DomainBatch]:
    """Draw one DomainBatch per source domain.

    Labeled points are drawn with replacement only when the pool is smaller
    than ``labeled_batch``; unlabeled points likewise.
    """
    batches = []
    for slot, src in enumerate(view.sources):
        n_u = len(src.unlabeled_x)
        if n_u == 0:
            raise ParameterError(f"source domain {src.domain_id} is empty")
        n_l = len(src.labeled_y)
        if n_l:
            li = rng.choice(n_l, labeled_batch, replace=n_l < labeled_batch)
        else:
            li = np.array([], dtype=int)
        ui = rng.choice(n_u, unlabeled_batch, replace=n_u < unlabeled_batch)
        batches.append(
            DomainBatch(
                domain_id=src.domain_id,
                slot=slot,
                labeled_x=src.labeled_x[li],
                labeled_y=src.labeled_y[li],
                unlabeled_x=src.unlabeled_x[ui],
                diagnostic_labels=src.diagnostic_labels[ui],
            )
        )
    return batches


# -- CSV export --------------------------------------------------------------


def export_dataset(dataset: MultiDomainDataset, path) -> Path:
    """Write ``domain,label,x_0..x_{D-1}`` rows plus a ``.json`` sidecar holding the ShiftSpec."""
    path = Path(path)
    D = dataset.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label"] + [f"x_{j}" for j in range(D)])
        for k, dom in enumerate(dataset.domains):
            for xi, yi in zip(dom.x, dom.y):
                w.writerow([k, int(yi)] + [repr(float(v)) for v in xi])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"shift_spec": asdict(dataset.spec)}, indent=2))
    return path


def import_dataset(path) -> MultiDomainDataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = ShiftSpec(**meta["shift_spec"])
    rows: dict[int, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["domain", "label"]:
            raise ValueError("unexpected dataset header")
        for row in r:
            xs, ys = rows.setdefault(int(row[0]), ([], []))
            ys.append(int(row[1]))
            xs.append([float(v) for v in row[2:]])
    domains = [
        Domain(f"domain{k}", np.array(rows[k][0]), np.array(rows[k][1], dtype=int)) for k in sorted(rows)
    ]
    return MultiDomainDataset(spec, domains)
