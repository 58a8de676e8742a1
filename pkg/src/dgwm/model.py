"""Learned components and domain-guided mask construction.

The bundle holds the feature extractor ``f``, the domain-shared
classifier ``W`` (C x d) and the mask generator: encoder ``E``, decoder
``D`` and the two heads ``G1`` (d -> C) and ``G2`` (d -> d).  A mask is
``sigmoid(G1(I) G2(I)^T)`` for a domain vector ``I``, i.e. a rank-1
pre-activation squashed into (0, 1).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DimensionError, EmptyBatchError, ParameterError
from .rng import Rng, gaussian
from .tensor import Tensor, concat, linear, no_grad

NOISE_MODES = ("concat", "add", "none")
AGGREGATIONS = ("mean", "principal_eig", "mean_eig")
MASK_VARIANTS = ("low_rank", "general_map", "off")
RELU_GAIN = float(np.sqrt(6.0))
LINEAR_GAIN = float(np.sqrt(3.0))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    feature_dim: int = 32
    latent_dim: int | None = None  # None -> feature_dim // 8
    hidden: tuple[int, ...] = (64, 64)
    epsilon_sq: float = 1.0
    noise_mode: str = "concat"
    aggregation: str = "mean"
    detach_domain_info: bool = True
    mask_variant: str = "low_rank"
    separate_classifiers: bool = False
    num_domains: int = 1  # classifier copies when separate_classifiers is set

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", self.feature_dim // 8)
        if min(self.input_dim, self.num_classes, self.feature_dim) < 1:
            raise ParameterError("input_dim, num_classes and feature_dim must be positive")
        if self.latent_dim < 1:
            raise ParameterError(f"latent_dim must be >= 1 (feature_dim={self.feature_dim})")
        if self.feature_dim % 4:
            raise ParameterError("feature_dim must be divisible by 4 for the encoder/decoder widths")
        if self.epsilon_sq < 0:
            raise ParameterError("epsilon_sq must be >= 0")
        for name, value, allowed in (
            ("noise_mode", self.noise_mode, NOISE_MODES),
            ("aggregation", self.aggregation, AGGREGATIONS),
            ("mask_variant", self.mask_variant, MASK_VARIANTS),
        ):
            if value not in allowed:
                raise ParameterError(f"{name} must be one of {allowed}, got {value!r}")
        if self.num_domains < 1:
            raise ParameterError("num_domains must be >= 1")

    @property
    def encoder_widths(self) -> list[int]:
        d = self.feature_dim
        return [d, d // 2, d // 4, self.latent_dim]

    @property
    def decoder_widths(self) -> list[int]:
        d, l = self.feature_dim, self.latent_dim
        return [2 * l if self.noise_mode == "concat" else l, d // 2, d]


class Linear:
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: Rng | None = None, gain: float = 1.0):
        bound = gain / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor, relu: bool = False) -> Tensor:
        return linear(x, self.weight, self.bias, relu)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    def __init__(self, widths: list[int], rng: Rng, relu_last: bool, gain: float = 1.0):
        self.layers = [Linear(a, b, rng, gain) for a, b in zip(widths[:-1], widths[1:])]
        self.relu_last = relu_last

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x, relu=i < last or self.relu_last)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class ModelBundle:
    """All six learned components for one training run."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(seed)
        d, C = cfg.feature_dim, cfg.num_classes
        self.f = MLP([cfg.input_dim, *cfg.hidden, d], rng, relu_last=False)
        n_cls = cfg.num_domains if cfg.separate_classifiers else 1
        bound = 1.0 / np.sqrt(d)
        self.classifiers = [
            Tensor(rng.uniform(-bound, bound, (C, d)), requires_grad=True) for _ in range(n_cls)
        ]
        # variance-preserving init for the mask generator (He for the ReLU stacks, LeCun for the heads)
        self.E = MLP(cfg.encoder_widths, rng, relu_last=True, gain=RELU_GAIN)
        self.D = MLP(cfg.decoder_widths, rng, relu_last=True, gain=RELU_GAIN)
        self.G1 = Linear(d, C, rng, gain=LINEAR_GAIN)
        self.G2 = Linear(d, d, rng, gain=LINEAR_GAIN)
        self.general = Linear(d, C * d, rng, gain=LINEAR_GAIN) if cfg.mask_variant == "general_map" else None

    @property
    def W(self) -> Tensor:
        return self.classifiers[0]

    def classifier(self, domain: int = 0) -> Tensor:
        return self.classifiers[domain] if self.cfg.separate_classifiers else self.classifiers[0]

    def mask_generator(self) -> list[Tensor]:
        params = self.E.parameters() + self.D.parameters() + self.G1.parameters() + self.G2.parameters()
        if self.general is not None:
            params += self.general.parameters()
        return params

    def param_groups(self) -> dict[str, list[Tensor]]:
        """``backbone`` (f) and ``head`` (W plus mask generator), which get separate learning rates."""
        return {"backbone": self.f.parameters(), "head": list(self.classifiers) + self.mask_generator()}

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, mod in (("f", self.f), ("E", self.E), ("D", self.D)):
            for i, layer in enumerate(mod.layers):
                out[f"{prefix}.{i}.weight"] = layer.weight
                out[f"{prefix}.{i}.bias"] = layer.bias
        for i, w in enumerate(self.classifiers):
            out[f"W.{i}"] = w
        for name, layer in (("G1", self.G1), ("G2", self.G2), ("general", self.general)):
            if layer is not None:
                out[f"{name}.weight"] = layer.weight
                out[f"{name}.bias"] = layer.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


@dataclass
class MaskPair:
    """Masks for the pseudo-labeling (``ss``) and learning (``lrn``) branches."""

    I: Tensor
    I_ss: Tensor | None
    I_lrn: Tensor | None
    v_cls: Tensor | None
    v_f: Tensor | None
    M_ss: Tensor
    M_lrn: Tensor
    logits_ss: Tensor | None = field(default=None, repr=False)


def extract_features(bundle: ModelBundle, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != bundle.cfg.input_dim:
        raise DimensionError(f"input width {x.shape[-1]} != {bundle.cfg.input_dim}")
    return bundle.f(x)


def _jacobi_eigh(A: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors as columns), unsorted.
    """
    A = np.array(A, dtype=float, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    return np.diag(A).copy(), V


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def aggregate_domain_info(features, method: str = "mean") -> Tensor:
    """Reduce an (n, d) feature batch to one d-vector.

    ``mean`` is differentiable; the eigenvector variants return constants.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.ndim != 2:
        raise DimensionError("features must be (n, d)")
    if features.shape[0] == 0:
        raise EmptyBatchError("cannot aggregate an empty batch")
    if method == "mean":
        if not features.requires_grad:
            return Tensor(features.data.sum(axis=0) * (1.0 / features.shape[0]))
        return features.mean(axis=0)
    if method not in AGGREGATIONS:
        raise ParameterError(f"unknown aggregation {method!r}")
    X = features.data
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / X.shape[0]
    vals, vecs = _jacobi_eigh(cov)
    if method == "principal_eig":
        v = _fix_sign(vecs[:, int(np.argmax(vals))])
    else:
        v = np.mean([_fix_sign(vecs[:, j]) for j in range(vecs.shape[1])], axis=0)
    return Tensor(v)


def encode_decode(bundle: ModelBundle, I: Tensor, rng: Rng, variance: float, noise_mode: str | None = None) -> Tensor:
    """Pass a domain vector through E and D, injecting N(0, variance) at the bottleneck."""
    mode = noise_mode or bundle.cfg.noise_mode
    if variance < 0:
        raise ParameterError("variance must be >= 0")
    if mode not in NOISE_MODES:
        raise ParameterError(f"unknown noise_mode {mode!r}")
    return _decode(bundle, bundle.E(I), rng, variance, mode)


def mask_logits(I_vec: Tensor, bundle: ModelBundle, mask_variant: str | None = None) -> Tensor:
    """Pre-sigmoid C x d mask matrix."""
    variant = mask_variant or bundle.cfg.mask_variant
    C, d = bundle.cfg.num_classes, bundle.cfg.feature_dim
    if I_vec.shape[-1] != d:
        raise DimensionError(f"domain vector width {I_vec.shape[-1]} != {d}")
    if variant == "low_rank":
        return bundle.G1(I_vec).reshape(C, 1) @ bundle.G2(I_vec).reshape(1, d)
    if variant == "general_map":
        return bundle.general(I_vec).reshape(C, d)
    raise ParameterError(f"mask variant {variant!r} has no logits")


def build_mask(I_vec: Tensor, bundle: ModelBundle, mask_variant: str | None = None) -> Tensor:
    variant = mask_variant or bundle.cfg.mask_variant
    if variant == "off":
        return Tensor(np.ones((bundle.cfg.num_classes, bundle.cfg.feature_dim)))
    return mask_logits(I_vec, bundle, variant).sigmoid()


def modulate(W: Tensor, M: Tensor) -> Tensor:
    if W.shape != M.shape:
        raise DimensionError(f"classifier {W.shape} and mask {M.shape} differ")
    return W * M


def _decode(bundle: ModelBundle, z: Tensor, rng: Rng, variance: float, mode: str) -> Tensor:
    if mode == "none":
        return bundle.D(z)
    noise = gaussian(rng, z.shape, variance)
    if mode == "concat":
        return bundle.D(concat([z, noise], axis=-1))
    return bundle.D(z + noise)


def _mask_from(I_vec: Tensor, bundle: ModelBundle, variant: str):
    """(v_cls, v_f, pre-sigmoid mask) for one domain vector or a (K, d) stack of them."""
    C, d = bundle.cfg.num_classes, bundle.cfg.feature_dim
    lead = I_vec.shape[:-1]
    if variant == "low_rank":
        v_cls, v_f = bundle.G1(I_vec), bundle.G2(I_vec)
        if not lead:
            return v_cls, v_f, v_cls.reshape(C, 1) @ v_f.reshape(1, d)
        return v_cls, v_f, v_cls.reshape(*lead, C, 1) * v_f.reshape(*lead, 1, d)
    return None, None, bundle.general(I_vec).reshape(*lead, C, d)


def _stack_forward(layers: list[Linear], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """ReLU'd affine stack on raw arrays; returns the output and every layer input."""
    inputs = []
    for layer in layers:
        inputs.append(x)
        x = x @ layer.weight.data
        x += layer.bias.data
        np.maximum(x, 0.0, out=x)
    return x, inputs


def _stack_backward(layers: list[Linear], inputs: list[np.ndarray], out: np.ndarray, g: np.ndarray,
                    grads: dict[int, np.ndarray], input_grad: bool = True) -> np.ndarray | None:
    acts = inputs[1:] + [out]
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        g = g * (acts[i] > 0)
        grads[id(layer.weight)] = inputs[i].T @ g
        grads[id(layer.bias)] = g.sum(axis=0)
        if i or input_grad:
            g = g @ layer.weight.data.T
        else:
            g = None
    return g


def _fused_learning_masks(I_all: Tensor, bundle: ModelBundle, noise: np.ndarray | None, cfg: ModelConfig):
    """Both branches of the mask generator for a (K, d) stack of domain vectors.

    Numerically the same forward pass as the composed ops, but the learning
    branch is recorded as a single node whose backward is written out by
    hand; this keeps the per-step cost of modulation small. Returns numpy
    arrays for the noise-free branch and a Tensor ``(K, C, d)`` for M_lrn.
    """
    C, d = cfg.num_classes, cfg.feature_dim
    enc, dec = bundle.E.layers, bundle.D.layers
    K = I_all.shape[0]
    z, enc_in = _stack_forward(enc, I_all.data)

    def head(I_vec):
        if cfg.mask_variant == "low_rank":
            v_cls = I_vec @ bundle.G1.weight.data
            v_cls += bundle.G1.bias.data
            v_f = I_vec @ bundle.G2.weight.data
            v_f += bundle.G2.bias.data
            return v_cls, v_f, v_cls[:, :, None] * v_f[:, None, :]
        pre = I_vec @ bundle.general.weight.data
        pre += bundle.general.bias.data
        return None, None, pre.reshape(-1, C, d)

    def dec_input(noise_arr):
        if cfg.noise_mode == "concat":
            return np.concatenate([z, noise_arr], axis=-1)
        if cfg.noise_mode == "add":
            return z + noise_arr
        return z

    # both branches go through D and the heads as one (2K, .) batch: rows [:K] noise-free, [K:] noisy
    zeros = np.zeros_like(z)
    dec_x = np.concatenate([dec_input(zeros), dec_input(noise if noise is not None else zeros)])
    I_both, dec_in_both = _stack_forward(dec, dec_x)
    cls_both, f_both, logits_both = head(I_both)
    M_both = expit(logits_both)
    I_ss, I_lrn = I_both[:K], I_both[K:]
    ss = {"I_ss": I_ss, "I_lrn": I_lrn, "logits_ss": logits_both[:K], "M_ss": M_both[:K],
          "v_cls": None if cls_both is None else cls_both[:K], "v_f": None if f_both is None else f_both[:K]}
    dec_in = [a[K:] for a in dec_in_both]
    l_cls = None if cls_both is None else cls_both[K:]
    l_f = None if f_both is None else f_both[K:]
    M = M_both[K:]

    params = [p for layer in enc + dec for p in layer.parameters()]
    heads = [bundle.G1, bundle.G2] if cfg.mask_variant == "low_rank" else [bundle.general]
    params += [p for layer in heads for p in layer.parameters()]

    def back(gM):
        grads: dict[int, np.ndarray] = {}
        gL = gM * M * (1.0 - M)
        if cfg.mask_variant == "low_rank":
            g_cls = np.matmul(gL, l_f[:, :, None])[:, :, 0]
            g_f = np.matmul(l_cls[:, None, :], gL)[:, 0, :]
            grads[id(bundle.G1.weight)] = I_lrn.T @ g_cls
            grads[id(bundle.G1.bias)] = g_cls.sum(axis=0)
            grads[id(bundle.G2.weight)] = I_lrn.T @ g_f
            grads[id(bundle.G2.bias)] = g_f.sum(axis=0)
            gI = g_cls @ bundle.G1.weight.data.T + g_f @ bundle.G2.weight.data.T
        else:
            g_pre = gL.reshape(K, C * d)
            grads[id(bundle.general.weight)] = I_lrn.T @ g_pre
            grads[id(bundle.general.bias)] = g_pre.sum(axis=0)
            gI = g_pre @ bundle.general.weight.data.T
        g_in = _stack_backward(dec, dec_in, I_lrn, gI, grads)
        gz = g_in[:, : z.shape[1]] if cfg.noise_mode == "concat" else g_in
        gI_all = _stack_backward(enc, enc_in, z, gz, grads, I_all.requires_grad)
        return (gI_all, *(grads[id(p)] for p in params))

    return ss, Tensor._node(M, (I_all, *params), back)


class MaskPairs(list):
    """List of per-domain MaskPair; ``M_lrn_all`` holds the stacked (K, C, d) learning masks."""

    M_lrn_all: Tensor | None = None


def make_mask_pairs(feature_sets, bundle: ModelBundle, rng: Rng, cfg: ModelConfig | None = None,
                    training: bool = False) -> MaskPairs:
    """Mask pairs for several domains at once.

    The K domain vectors are stacked and pushed through E, D, G1 and G2 as
    one (K, d) batch; each row is processed exactly as a single vector
    would be. ``E(I)`` is shared by the noise-free and noisy branches.

    With ``training=True`` only ``M_lrn`` stays on the computation record;
    the pseudo-labeling branch and the diagnostic vectors are constants,
    since none of them enters the loss.
    """
    cfg = cfg or bundle.cfg
    infos = []
    for feats in feature_sets:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.shape[0] == 0:
            raise EmptyBatchError("mask needs at least one unlabeled feature row")
        if cfg.detach_domain_info:
            feats = feats.detach()
        infos.append(aggregate_domain_info(feats, cfg.aggregation))
    K = len(infos)
    if cfg.mask_variant == "off":
        ones = build_mask(infos[0], bundle, "off")
        return MaskPairs(MaskPair(I, None, None, None, None, ones, ones) for I in infos)
    if any(I.requires_grad for I in infos):
        I_all = concat([I.reshape(1, -1) for I in infos], axis=0)
    else:
        I_all = Tensor(np.stack([I.data for I in infos]))
    if training:
        noise = None
        if cfg.noise_mode != "none":
            noise = gaussian(rng, (K, cfg.latent_dim), cfg.epsilon_sq).data
        ss, M_all = _fused_learning_masks(I_all, bundle, noise, cfg)

        def row(key, k):
            return None if ss[key] is None else Tensor(ss[key][k])

        out = MaskPairs(
            MaskPair(infos[k], row("I_ss", k), row("I_lrn", k), row("v_cls", k),
                     row("v_f", k), row("M_ss", k), M_all[k], row("logits_ss", k))
            for k in range(K)
        )
        out.M_lrn_all = M_all
        return out
    z = bundle.E(I_all)
    I_ss = _decode(bundle, z, rng, 0.0, cfg.noise_mode)
    v_cls, v_f, logits_ss = _mask_from(I_ss, bundle, cfg.mask_variant)
    M_ss = logits_ss.sigmoid()
    I_lrn = _decode(bundle, z, rng, cfg.epsilon_sq, cfg.noise_mode)
    M_lrn = _mask_from(I_lrn, bundle, cfg.mask_variant)[2].sigmoid()
    out = MaskPairs(
        MaskPair(infos[k], I_ss[k], I_lrn[k], None if v_cls is None else v_cls[k],
                 None if v_f is None else v_f[k], M_ss[k], M_lrn[k], logits_ss[k])
        for k in range(K)
    )
    out.M_lrn_all = M_lrn
    return out


def make_mask_pair(unlabeled_features: Tensor, bundle: ModelBundle, rng: Rng, cfg: ModelConfig | None = None,
                   training: bool = False) -> MaskPair:
    """Domain vector -> (noise-free pseudo-labeling mask, noisy learning mask)."""
    return make_mask_pairs([unlabeled_features], bundle, rng, cfg, training)[0]


# -- checkpoints -------------------------------------------------------------
#
# Format: a numpy ``.npz`` archive.  Each parameter is stored under its
# ``named_parameters`` key (e.g. ``f.0.weight``, ``W.0``, ``G1.bias``) as a
# float64 array; the key ``__config__`` holds the ModelConfig as UTF-8 JSON.


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    arrays = {name: p.data for name, p in bundle.named_parameters().items()}
    cfg_json = json.dumps(asdict(bundle.cfg), sort_keys=True)
    arrays["__config__"] = np.frombuffer(cfg_json.encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> ModelBundle:
    with np.load(Path(path)) as archive:
        cfg_dict = json.loads(bytes(archive["__config__"]).decode())
        cfg = ModelConfig(**cfg_dict)
        bundle = ModelBundle(cfg, seed=0)
        params = bundle.named_parameters()
        missing = set(params) - set(archive.files)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for name, p in params.items():
            arr = archive[name]
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data[...] = arr
    return bundle


def predict_logits(bundle: ModelBundle, x) -> np.ndarray:
    """Unmodulated logits ``W f(x)`` (mean classifier under separate_classifiers)."""
    with no_grad():
        feats = extract_features(bundle, x).data
    if bundle.cfg.separate_classifiers:
        W = np.mean([w.data for w in bundle.classifiers], axis=0)
    else:
        W = bundle.W.data
    return feats @ W.T
