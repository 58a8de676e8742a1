import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgwm import analysis as A
from dgwm.data import ShiftSpec, SplitPlan, generate, split
from dgwm.errors import DimensionError, ParameterError
from dgwm.model import ModelBundle, ModelConfig, extract_features, make_mask_pair
from dgwm.pipeline import PseudoLabelResult, TrainConfig, threshold_logits, train
from dgwm.rng import Rng
from dgwm.tensor import Tensor, no_grad


def _pl(accepted, labels, n=10):
    accepted = np.asarray(accepted, dtype=int)
    return PseudoLabelResult(accepted, np.asarray(labels, dtype=int), np.ones(len(accepted)), n)


@pytest.fixture(scope="module")
def view():
    ds = generate(ShiftSpec(samples_per_class_per_domain=40, seed=5))
    return split(ds, SplitPlan(target_domain=3, seed=5))


@pytest.fixture(scope="module")
def mcfg():
    return ModelConfig(input_dim=20, num_classes=5)


@pytest.fixture(scope="module")
def trained(view, mcfg):
    bundle, rec = train(view, TrainConfig(epochs=3, steps_per_epoch=15, tau=0.5, seed=5), mcfg)
    return bundle, rec


@pytest.fixture(scope="module")
def batches(view):
    return A.held_batches(view, n_batches=2, batch_size=32)


# -- partition -----------------------------------------------------------------


def test_partition_example():
    p = A.partition_features([0.3, -0.1, 0.0])
    assert p.J_plus.tolist() == [0, 2]
    assert p.J_minus.tolist() == [1]


def test_partition_all_positive():
    p = A.partition_features([1.0, 2.0, 3.0])
    assert p.J_plus.tolist() == [0, 1, 2] and p.J_minus.size == 0


def test_partition_negation_swaps_sides():
    v = np.array([0.5, -0.2, 0.7, -1.0])
    a, b = A.partition_features(v), A.partition_features(-v)
    assert a.J_plus.tolist() == b.J_minus.tolist()
    assert a.J_minus.tolist() == b.J_plus.tolist()


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_partition_complementary(values):
    p = A.partition_features(values)
    both = np.concatenate([p.J_plus, p.J_minus])
    assert sorted(both.tolist()) == list(range(len(values)))


# -- restricted pseudo-labels ---------------------------------------------------


def _loop_restricted(W, M, v_cls, v_f, flip=False):
    out = np.zeros_like(W)
    for c in range(W.shape[0]):
        for j in range(W.shape[1]):
            pos = v_f[j] >= 0
            if flip:
                pos = not pos
            if v_cls[c] > 0:
                keep = pos
            elif v_cls[c] < 0:
                keep = not pos
            else:
                keep = True
            out[c, j] = W[c, j] * M[c, j] if keep else 0.0
    return out


@pytest.mark.parametrize("flip", [False, True])
def test_restricted_classifier_matches_loop(gen, flip):
    for _ in range(20):
        W, M = gen.normal(size=(4, 9)), gen.uniform(size=(4, 9))
        v_cls = gen.choice([-1.0, 0.0, 1.0], size=4) * gen.uniform(0.5, 2, size=4)
        v_f = gen.normal(size=9)
        np.testing.assert_array_equal(A.restricted_classifier(W, M, v_cls, v_f, flip),
                                      _loop_restricted(W, M, v_cls, v_f, flip))


def _masks_with(bundle, x, v_cls, v_f):
    with no_grad():
        m = make_mask_pair(extract_features(bundle, x), bundle, Rng(0))
    m.v_cls, m.v_f = Tensor(np.asarray(v_cls, dtype=float)), Tensor(np.asarray(v_f, dtype=float))
    return m


def test_restricted_equals_full_without_removable_columns(trained, batches):
    bundle, _ = trained
    b = batches[0]
    d, C = bundle.cfg.feature_dim, bundle.cfg.num_classes
    m = _masks_with(bundle, b.unlabeled_x, np.ones(C), np.ones(d))
    r = A.restricted_pseudo_label(bundle, b.unlabeled_x, m, 0.3, b.diagnostic_labels)
    f = A.full_pseudo_label(bundle, b.unlabeled_x, m, 0.3, b.diagnostic_labels)
    np.testing.assert_array_equal(r.accepted, f.accepted)
    np.testing.assert_array_equal(r.labels, f.labels)
    np.testing.assert_array_equal(r.confidences, f.confidences)


def test_restricted_zero_class_vector_keeps_rows(trained, batches):
    bundle, _ = trained
    b = batches[0]
    d, C = bundle.cfg.feature_dim, bundle.cfg.num_classes
    m = _masks_with(bundle, b.unlabeled_x, np.zeros(C), np.linspace(-1, 1, d))
    m.M_ss = Tensor(np.full((C, d), 0.5))
    r = A.restricted_pseudo_label(bundle, b.unlabeled_x, m, 0.25)
    f = A.full_pseudo_label(bundle, b.unlabeled_x, m, 0.25)
    np.testing.assert_array_equal(r.labels, f.labels)
    np.testing.assert_array_equal(r.confidences, f.confidences)


def test_restricted_pseudo_label_loop_oracle(trained, batches):
    bundle, _ = trained
    b = batches[1]
    with no_grad():
        m = make_mask_pair(extract_features(bundle, b.unlabeled_x), bundle, Rng(3))
        feats = extract_features(bundle, b.unlabeled_x).data
    Wr = _loop_restricted(bundle.W.data, m.M_ss.data, m.v_cls.data, m.v_f.data)
    expect = threshold_logits(feats @ Wr.T, 0.4)
    got = A.restricted_pseudo_label(bundle, b.unlabeled_x, m, 0.4)
    np.testing.assert_array_equal(got.accepted, expect.accepted)
    np.testing.assert_array_equal(got.labels, expect.labels)


def test_restricted_needs_factors(trained, batches):
    bundle, _ = trained
    b = batches[0]
    m = _masks_with(bundle, b.unlabeled_x, np.ones(5), np.ones(bundle.cfg.feature_dim))
    m.v_f = None
    with pytest.raises(ParameterError):
        A.restricted_pseudo_label(bundle, b.unlabeled_x, m, 0.5)


# -- agreement -----------------------------------------------------------------


def test_agreement_identical():
    a = _pl([0, 3, 5], [1, 2, 0])
    assert A.pl_agreement(a, a) == 1.0


def test_agreement_disjoint():
    assert A.pl_agreement(_pl([0, 1], [1, 1]), _pl([2, 3], [1, 1])) == 0.0


def test_agreement_subset_half():
    a = _pl([1, 2], [0, 1])
    b = _pl([1, 2, 3, 4], [0, 1, 2, 2])
    assert A.pl_agreement(a, b) == 0.5


def test_agreement_label_mismatch_counts_against():
    assert A.pl_agreement(_pl([1, 2], [0, 1]), _pl([1, 2], [0, 2])) == 0.5


def test_agreement_empty_union():
    assert A.pl_agreement(_pl([], []), _pl([], [])) == 1.0


@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 3)), max_size=12),
       st.lists(st.tuples(st.integers(0, 15), st.integers(0, 3)), max_size=12))
@settings(max_examples=80, deadline=None)
def test_agreement_symmetric(xs, ys):
    def mk(pairs):
        d = dict(pairs)
        return _pl(list(d), list(d.values()), 16)
    a, b = mk(xs), mk(ys)
    assert A.pl_agreement(a, b) == A.pl_agreement(b, a)
    assert 0.0 <= A.pl_agreement(a, b) <= 1.0


# -- gradient identity -----------------------------------------------------------


def test_identity_all_ones_mask_is_plain_ce(gen):
    W, f = gen.normal(size=(3, 8)), gen.normal(size=8)
    chk = A.verify_gradient_identity(W, np.ones_like(W), f, 1)
    z = f @ W.T
    p = np.exp(z - z.max())
    p /= p.sum()
    p[1] -= 1
    np.testing.assert_allclose(chk.grad_closed, np.outer(p, f), rtol=1e-12, atol=1e-14)


def test_identity_random_instances(gen):
    for _ in range(20):
        W, M, f = gen.normal(size=(3, 8)), gen.uniform(size=(3, 8)), gen.normal(size=8)
        chk = A.verify_gradient_identity(W, M, f, int(gen.integers(3)))
        assert chk.backward_vs_closed <= 1e-9
        assert chk.closed_vs_numeric <= 1e-5


def test_identity_batch(gen):
    W, M, F = gen.normal(size=(4, 6)), gen.uniform(size=(4, 6)), gen.normal(size=(5, 6))
    chk = A.verify_gradient_identity(W, M, F, gen.integers(4, size=5))
    assert chk.max_discrepancy <= 1e-5


def test_identity_zero_mask_row(gen):
    W, M, f = gen.normal(size=(3, 8)), gen.uniform(size=(3, 8)), gen.normal(size=8)
    M[2] = 0.0
    chk = A.verify_gradient_identity(W, M, f, 0)
    assert np.all(chk.grad_backward[2] == 0.0)
    assert np.all(chk.grad_closed[2] == 0.0)


@pytest.mark.parametrize("shapes", [((3, 8), (3, 7), (8,), 0), ((3, 8), (3, 8), (7,), 0),
                                    ((3, 8), (3, 8), (2, 8), [0])])
def test_identity_shape_errors(shapes):
    ws, ms, fs, y = shapes
    with pytest.raises(DimensionError):
        A.verify_gradient_identity(np.ones(ws), np.ones(ms), np.ones(fs), y)


# -- threshold sweep -------------------------------------------------------------


def test_sweep_tau_one_uses_nothing(trained, batches):
    res = A.threshold_sweep(trained[0], batches, [0.5, 0.9, 1.0])
    assert res.utilization["modulated"][-1] == 0.0
    assert res.utilization["baseline"][-1] == 0.0


def test_sweep_utilization_monotone(trained, batches):
    res = A.threshold_sweep(trained[0], batches, np.linspace(0.2, 1.0, 9))
    assert res.utilization_monotone()
    rows = res.to_rows()
    assert len(rows) == 18 and {r["variant"] for r in rows} == {"modulated", "baseline"}


@pytest.mark.parametrize("taus", [[0.0, 0.5], [0.5, 1.2], [0.9, 0.5]])
def test_sweep_rejects_bad_taus(trained, batches, taus):
    with pytest.raises(ParameterError):
        A.threshold_sweep(trained[0], batches, taus)


def test_sweep_wins_count():
    res = A.SweepResult([0.5, 0.9], {"modulated": [0.8, float("nan")], "baseline": [0.7, 0.6]},
                        {"modulated": [0.5, 0.0], "baseline": [0.6, 0.1]})
    assert res.modulated_wins() == 1


# -- read-only diagnostics -----------------------------------------------------


def test_diagnostics_do_not_touch_parameters(trained, batches, tmp_path):
    bundle, rec = trained
    before = bundle.checksum()
    A.threshold_sweep(bundle, batches)
    probe = A.RestrictedLabelProbe(batches, 0.5)
    probe.evaluate(bundle)
    b = batches[0]
    with no_grad():
        m = make_mask_pair(extract_features(bundle, b.unlabeled_x), bundle, Rng(1))
    A.restricted_pseudo_label(bundle, b.unlabeled_x, m, 0.5, flip=True)
    A.full_pseudo_label(bundle, b.unlabeled_x, None, 0.5)
    A.export_domain_info(rec, tmp_path / "info.csv")
    assert bundle.checksum() == before


def test_probe_rows(view, mcfg, batches):
    probe = A.RestrictedLabelProbe(batches, 0.3)
    _, rec = train(view, TrainConfig(epochs=2, steps_per_epoch=5, seed=1), mcfg, callbacks=[probe])
    assert [r["epoch"] for r in probe.rows] == [0, 1]
    assert rec.extras["restricted"] == probe.rows
    for r in probe.rows:
        assert 0.0 <= r["agreement_restricted"] <= 1.0
        assert 0.0 <= r["agreement_flipped"] <= 1.0


# -- adding domains ------------------------------------------------------------


def test_adding_domains_run_count():
    ds = generate(ShiftSpec(samples_per_class_per_domain=20, seed=1))
    res = A.adding_domains_study(ds, SplitPlan(target_domain=3, seed=1), TrainConfig(epochs=1, steps_per_epoch=3),
                                 ModelConfig(input_dim=20, num_classes=5))
    assert len(res.runs) == 6
    assert res.prefix_sizes == [1, 2, 3]
    assert res.runs[(1, True)].domain_info and not res.runs[(1, False)].domain_info
    assert len(res.series(True)) == 3


def test_adding_domains_needs_two_sources():
    ds = generate(ShiftSpec(num_domains=2, samples_per_class_per_domain=20))
    with pytest.raises(ParameterError):
        A.adding_domains_study(ds, SplitPlan(target_domain=1), TrainConfig(epochs=1), ModelConfig(input_dim=20,
                                                                                                   num_classes=5))


# -- overhead ------------------------------------------------------------------


def test_overhead_formula():
    assert A.OverheadReport(2.0, 2.5, [], []).percent == pytest.approx(25.0)


def test_overhead_off_vs_off_near_zero():
    # same work on both sides: the report should be timer noise only
    rep = A.OverheadReport(1.0, 1.0, [1.0], [1.0])
    assert rep.percent == 0.0


def test_overhead_report_runs(view, mcfg):
    rep = A.overhead_report(view, TrainConfig(epochs=2, steps_per_epoch=3), mcfg, repeats=1)
    assert len(rep.epochs_off) == 1 and len(rep.epochs_on) == 1
    assert rep.seconds_off > 0 and np.isfinite(rep.percent)


def test_overhead_needs_warmup_epoch(view, mcfg):
    with pytest.raises(ParameterError):
        A.overhead_report(view, TrainConfig(epochs=1), mcfg)


def test_epsilon_sweep_shape(view, mcfg):
    out = A.epsilon_sweep(view, TrainConfig(epochs=1, steps_per_epoch=3), mcfg, values=(0.1, 2.0), seeds=(0, 1))
    assert sorted(out) == [0.1, 2.0]
    for v in out.values():
        assert v["finite"] and len(v["accuracies"]) == 2


# -- export ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def export_run(view, mcfg):
    return train(view, TrainConfig(epochs=2, steps_per_epoch=50, seed=2), mcfg)[1]


def test_export_row_count(export_run, tmp_path):
    path = A.export_domain_info(export_run, tmp_path / "info.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 300
    assert rows[0][:3] == ["epoch", "step", "domain_id"]


def test_export_round_trip_exact(export_run, tmp_path):
    path = A.export_domain_info(export_run, tmp_path / "info.csv")
    back = A.read_domain_info(path)
    assert len(back) == len(export_run.domain_info)
    for (e, s, d, v), (e2, s2, d2, v2) in zip(export_run.domain_info, back):
        assert (e, s, d) == (e2, s2, d2)
        np.testing.assert_array_equal(v, v2)


def test_export_provenance(export_run, tmp_path):
    path = A.export_domain_info(export_run, tmp_path / "info.csv")
    side = json.loads((tmp_path / "info.csv.json").read_text())
    assert side["config_hash"] == A.config_hash(export_run.config)
    assert side["seed"] == 2 and "timestamp" in side


def test_export_needs_vectors(view, mcfg, tmp_path):
    _, rec = train(view, TrainConfig(epochs=1, steps_per_epoch=2, modulation=False), mcfg)
    with pytest.raises(ParameterError):
        A.export_domain_info(rec, tmp_path / "x.csv")


def test_export_unwritable_path(export_run, tmp_path):
    with pytest.raises(OSError):
        A.export_domain_info(export_run, tmp_path / "missing" / "info.csv")


def test_save_rows(tmp_path):
    path = A.save_rows([{"a": 1, "b": 2.5}], tmp_path / "r.csv", {"k": 1}, 7)
    assert path.read_text().splitlines() == ["a,b", "1,2.5"]
    assert json.loads((tmp_path / "r.csv.json").read_text())["seed"] == 7
    with pytest.raises(ParameterError):
        A.save_rows([], tmp_path / "e.csv")


@pytest.mark.xfail(strict=False, reason="mean-feature domain vectors vary more within a domain than between domains")
def test_domain_vectors_separate_after_training():
    ds = generate(ShiftSpec())
    _, rec = train(split(ds, SplitPlan(target_domain=3)), TrainConfig(epochs=10),
                   ModelConfig(input_dim=20, num_classes=5))
    between, spread = A.domain_separation(rec)
    assert between > spread
