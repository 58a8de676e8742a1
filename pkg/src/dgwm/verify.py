"""Exact property checks, shared by the ``verify`` subcommand and the test suite.

Each check returns a :class:`CheckResult`; ``run_all`` runs the quick
variants in a fixed order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import held_batches, partition_features, threshold_sweep, verify_gradient_identity
from .data import ShiftSpec, SplitPlan, generate, sample_step_batches, split
from .gradcheck import finite_diff_grad, relative_error
from .model import ModelBundle, ModelConfig, extract_features, make_mask_pair, mask_logits, modulate
from .pipeline import TrainConfig, labeled_loss, threshold_logits, train, unlabeled_loss
from .reference import fixmatch_losses
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - start)


# -- gradients of the full loss ------------------------------------------------

COMPONENTS = ("f", "W", "E", "D", "G1", "G2")


def _component_params(bundle: ModelBundle) -> dict[str, list[Tensor]]:
    return {
        "f": bundle.f.parameters(),
        "W": [bundle.W],
        "E": bundle.E.parameters(),
        "D": bundle.D.parameters(),
        "G1": bundle.G1.parameters(),
        "G2": bundle.G2.parameters(),
    }


def loss_gradient_errors(seed: int, eps: float = 1e-4) -> dict[str, float]:
    """Worst relative error per component between backward() and finite differences.

    One random small instance (D=10, d=8, l in {1, 2}, C=3, batch 4). The
    mask noise and the accepted pseudo-labels are fixed up front so the loss
    is a smooth function of the parameters. Even seeds use the fused
    training path for the learning mask, odd seeds the generic graph.

    The domain vector stays attached to ``f`` (a detached vector is a
    deliberate stop-gradient that finite differences cannot see), and the
    zero-initialized biases are redrawn so no ReLU sits exactly on its kink.
    The step ``eps`` is large because saturated masks leave ``E`` with
    gradients near 1e-6, where a smaller step drowns in rounding noise.
    """
    gen = np.random.default_rng(seed)
    cfg = ModelConfig(input_dim=10, num_classes=3, feature_dim=8, latent_dim=1 + seed % 2, hidden=(6,),
                      detach_domain_info=False)
    bundle = ModelBundle(cfg, seed=seed)
    for name, p in bundle.named_parameters().items():
        if name.endswith("bias"):
            p.data[...] = gen.normal(0.0, 0.1, p.shape)
    x, u, u_strong = (gen.normal(0.0, 1.0, (4, 10)) for _ in range(3))
    y = gen.integers(0, 3, 4)
    with no_grad():
        z = extract_features(bundle, u).data @ bundle.W.data.T
    plr = threshold_logits(z, 0.34)
    if len(plr.accepted) == 0:  # keep the unlabeled term in play
        plr = threshold_logits(z, 1.0 / 3.0)
    fused = seed % 2 == 0

    stacked = np.concatenate([u, x, u_strong])

    def loss():
        feats = extract_features(bundle, stacked)  # one backbone pass, sliced per role
        masks = make_mask_pair(feats[:4], bundle, Rng(seed), training=fused)
        W_lrn = modulate(bundle.W, masks.M_lrn)
        L = labeled_loss(feats[4:8] @ W_lrn.T, y)
        return L + unlabeled_loss(feats[8:] @ W_lrn.T, plr)

    groups = _component_params(bundle)
    bundle.zero_grad()
    loss().backward()
    out = {}
    for name, params in groups.items():
        analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros(p.shape)).ravel() for p in params])
        with no_grad():
            numeric = finite_diff_grad(lambda: float(loss().data), params, eps=eps)
        out[name] = relative_error(analytic, np.concatenate([g.ravel() for g in numeric]))
    return out


def check_loss_gradients(n_instances: int = 100, tol: float = 1e-4) -> CheckResult:
    def run():
        worst = dict.fromkeys(COMPONENTS, 0.0)
        for seed in range(n_instances):
            for k, v in loss_gradient_errors(seed).items():
                worst[k] = max(worst[k], v)
        text = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
        return max(worst.values()) < tol, f"{n_instances} instances, max rel err {text}"
    return _timed("loss gradients vs finite differences", run)


# -- masked-classifier gradient identity ----------------------------------------


def check_gradient_identity(n_instances: int = 20) -> CheckResult:
    def run():
        gen = np.random.default_rng(11)
        closed = numeric = 0.0
        annihilated = True
        for _ in range(n_instances):
            C, d, n = gen.integers(2, 6), gen.integers(2, 9), gen.integers(1, 5)
            W = gen.normal(0.0, 1.0, (C, d))
            M = gen.random((C, d))
            M[gen.integers(0, C)] = 0.0
            zero_row = np.flatnonzero(~M.any(axis=1))
            res = verify_gradient_identity(W, M, gen.normal(0.0, 1.0, (n, d)), gen.integers(0, C, n))
            closed = max(closed, res.backward_vs_closed)
            numeric = max(numeric, res.closed_vs_numeric, res.backward_vs_numeric)
            annihilated &= bool(np.all(res.grad_backward[zero_row] == 0.0))
        ok = closed <= 1e-9 and numeric <= 1e-5 and annihilated
        return ok, f"closed {closed:.1e}, numeric {numeric:.1e}, zero rows exact: {annihilated}"
    return _timed("masked gradient identity", run)


# -- low-rank masks ------------------------------------------------------------


def max_minor(L: np.ndarray) -> float:
    """Largest |L[i,j] L[k,l] - L[i,l] L[k,j]| over all 2x2 minors."""
    L = np.asarray(L, dtype=float)
    return float(np.abs(np.einsum("ij,kl->ikjl", L, L) - np.einsum("il,kj->ikjl", L, L)).max())


def check_low_rank(n_masks: int = 1000, tol: float = 1e-9) -> CheckResult:
    def run():
        worst = 0.0
        for i in range(n_masks):
            gen = np.random.default_rng(i)
            C, d = int(gen.integers(2, 8)), 8 * int(gen.integers(1, 5))
            bundle = ModelBundle(ModelConfig(input_dim=3, num_classes=C, feature_dim=d, hidden=()), seed=i)
            with no_grad():
                L = mask_logits(Tensor(gen.normal(0.0, 2.0, d)), bundle).data
            worst = max(worst, max_minor(L))
        return worst < tol, f"{n_masks} masks, largest 2x2 minor {worst:.1e}"
    return _timed("low-rank mask structure", run)


# -- modulation off equals plain FixMatch ----------------------------------------


def small_view(seed: int = 0, num_domains: int = 2, sources: tuple[int, ...] = (0,)):
    ds = generate(ShiftSpec(num_domains=num_domains, samples_per_class_per_domain=60, seed=seed))
    return split(ds, SplitPlan(target_domain=num_domains - 1, source_domains=sources, seed=seed))


def check_baseline_reduction(steps: int = 200) -> CheckResult:
    def run():
        view = small_view(3)
        cfg = TrainConfig(epochs=4, steps_per_epoch=steps // 4, modulation=False, seed=3)
        mcfg = ModelConfig(input_dim=view.target_x.shape[1], num_classes=view.num_classes)
        _, rec = train(view, cfg, mcfg)
        ref = fixmatch_losses(view, cfg, mcfg)
        same = rec.step_losses == ref
        n_diff = sum(a != b for a, b in zip(rec.step_losses, ref))
        return same, f"{len(ref)} steps, {n_diff} differing losses"
    return _timed("modulation off == reference FixMatch", run)


# -- uniform mask keeps the argmax ------------------------------------------------


def check_degenerate_mask(n_batches: int = 20) -> CheckResult:
    def run():
        view = small_view(5)
        mcfg = ModelConfig(input_dim=view.target_x.shape[1], num_classes=view.num_classes)
        bundle = ModelBundle(mcfg, seed=5)
        bundle.G1.weight.data[...] = 0.0
        bundle.G1.bias.data[...] = 0.0
        rng = Rng(5)
        same, conf_differs, uniform = True, True, True
        for _ in range(n_batches):
            (b,) = sample_step_batches(view, 1, 32, rng)
            with no_grad():
                feats = extract_features(bundle, b.unlabeled_x)
                m = make_mask_pair(feats, bundle, rng)
                z_mask = feats.data @ (bundle.W.data * m.M_ss.data).T
                z_plain = feats.data @ bundle.W.data.T
            uniform &= bool(np.all(m.M_ss.data == 0.5))
            a, p = threshold_logits(z_mask, 1e-12), threshold_logits(z_plain, 1e-12)
            same &= bool(np.array_equal(a.labels, p.labels))
            conf_differs &= bool(np.any(a.confidences != p.confidences))
        return same and conf_differs and uniform, \
            f"uniform 0.5 mask: {uniform}, argmax equal: {same}, confidences differ: {conf_differs}"
    return _timed("zero G1 leaves the argmax unchanged", run)


# -- sweep monotonicity, partitions, read-only diagnostics, determinism ---------------


def check_utilization_monotone() -> CheckResult:
    def run():
        view = small_view(7, num_domains=3, sources=(0, 1))
        mcfg = ModelConfig(input_dim=view.target_x.shape[1], num_classes=view.num_classes)
        bundle, _ = train(view, TrainConfig(epochs=2, steps_per_epoch=10, seed=7), mcfg)
        before = bundle.checksum()
        res = threshold_sweep(bundle, held_batches(view, 2), np.linspace(0.35, 1.0, 14))
        untouched = bundle.checksum() == before
        return res.utilization_monotone() and untouched, \
            f"monotone: {res.utilization_monotone()}, parameters untouched: {untouched}"
    return _timed("utilization non-increasing in tau; diagnostics read-only", run)


def check_partition(n_vectors: int = 200) -> CheckResult:
    def run():
        gen = np.random.default_rng(13)
        ok = True
        for i in range(n_vectors):
            v = gen.normal(0.0, 1.0, int(gen.integers(1, 40)))
            v[gen.random(v.size) < 0.1] = 0.0
            p = partition_features(v)
            both = np.concatenate([p.J_plus, p.J_minus])
            ok &= np.array_equal(np.sort(both), np.arange(v.size)) and len(np.intersect1d(p.J_plus, p.J_minus)) == 0
        return ok, f"{n_vectors} vectors split into disjoint covering sets: {ok}"
    return _timed("J+ / J- partition", run)


def check_determinism(tmp_dir) -> CheckResult:
    def run():
        view = small_view(9, num_domains=3, sources=(0, 1))
        mcfg = ModelConfig(input_dim=view.target_x.shape[1], num_classes=view.num_classes)
        cfg = TrainConfig(epochs=2, steps_per_epoch=10, seed=9)
        texts = []
        for i in range(2):
            _, rec = train(view, cfg, mcfg)
            texts.append(rec.to_csv(Path(tmp_dir) / f"run{i}.csv", include_wall=False).read_text())
        return texts[0] == texts[1], f"two identical runs give identical CSVs: {texts[0] == texts[1]}"
    return _timed("run determinism", run)


def run_all(tmp_dir, quick: bool = True) -> list[CheckResult]:
    return [
        check_loss_gradients(10 if quick else 100),
        check_gradient_identity(),
        check_low_rank(100 if quick else 1000),
        check_baseline_reduction(),
        check_degenerate_mask(),
        check_utilization_monotone(),
        check_partition(),
        check_determinism(tmp_dir),
    ]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)


__all__ = ["CheckResult", "COMPONENTS", "check_baseline_reduction", "check_degenerate_mask", "check_determinism",
           "check_gradient_identity", "check_loss_gradients", "check_low_rank", "check_partition",
           "check_utilization_monotone", "format_table", "loss_gradient_errors", "max_minor", "run_all"]
