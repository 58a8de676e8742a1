import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgwm.data import ShiftSpec, SplitPlan, generate, sample_step_batches, split, strong_augment, weak_augment
from dgwm.errors import ParameterError
from dgwm.model import ModelBundle, ModelConfig, extract_features
from dgwm.optim import SGD, SgdConfig, cosine_lr
from dgwm.pipeline import (CSV_COLUMNS, PseudoLabelResult, TrainConfig, accuracy, entmin_loss, labeled_loss,
                           predict, pseudo_label, step_loss, threshold_logits, train, train_step, unlabeled_loss)
from dgwm.reference import fixmatch_losses
from dgwm.rng import Rng
from dgwm.tensor import Tensor, cross_entropy
from dgwm.verify import loss_gradient_errors


@pytest.fixture(scope="module")
def dataset():
    return generate(ShiftSpec(samples_per_class_per_domain=40, seed=2))


@pytest.fixture(scope="module")
def view(dataset):
    return split(dataset, SplitPlan(target_domain=3, seed=2))


def mcfg(view, **kw):
    return ModelConfig(input_dim=view.target_x.shape[1], num_classes=view.num_classes, **kw)


SHORT = dict(epochs=2, steps_per_epoch=5)


# -- configuration ----------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(tau=0.0), dict(tau=1.5), dict(baseline="meanteacher"), dict(epochs=-1),
                                dict(labeled_batch=0)])
def test_train_config_validation(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.steps_per_epoch, c.labeled_batch, c.unlabeled_batch, c.tau) == (20, 50, 16, 16, 0.95)
    assert (c.lr_backbone, c.lr_head) == (0.003, 0.01)


# -- thresholding ----------------------------------------------------------------------------


def test_tau_one_accepts_nothing(gen):
    assert len(threshold_logits(gen.normal(0, 30, (50, 4)), 1.0).accepted) == 0


def test_tiny_tau_accepts_everything(gen):
    assert len(threshold_logits(gen.normal(size=(50, 4)), 1e-9).accepted) == 50


def test_known_logits():
    res = threshold_logits(np.array([[5.0, 0.0, 0.0]]), 0.95)
    assert res.accepted.tolist() == [0] and res.labels.tolist() == [0]
    assert res.confidences[0] == pytest.approx(math.exp(5) / (math.exp(5) + 2), rel=1e-14)


def test_tie_breaks_to_lowest_index():
    res = threshold_logits(np.array([[0.0, 3.0, 3.0]]), 0.1)
    assert res.labels.tolist() == [1]


def test_pl_accuracy_and_utilization():
    res = threshold_logits(np.array([[9.0, 0.0], [0.0, 9.0], [0.0, 0.0]]), 0.9, truth=np.array([0, 0, 1]))
    assert res.utilization == pytest.approx(2 / 3)
    assert res.pl_accuracy == 0.5
    assert math.isnan(threshold_logits(np.zeros((2, 2)), 0.9, truth=np.array([0, 1])).pl_accuracy)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_acceptance_sets_nest(t1, t2, seed):
    lo, hi = sorted((t1, t2))
    z = np.random.default_rng(seed).normal(0, 3, (40, 5))
    a, b = threshold_logits(z, lo), threshold_logits(z, hi)
    assert set(b.accepted.tolist()) <= set(a.accepted.tolist())
    assert b.utilization <= a.utilization


# -- losses --------------------------------------------------------------------------------------


def test_unlabeled_loss_empty_is_zero():
    plr = PseudoLabelResult(np.array([], dtype=int), np.array([], dtype=int), np.array([]), 4)
    assert unlabeled_loss(Tensor(np.zeros((4, 3))), plr).item() == 0.0


def test_unlabeled_loss_confident_is_zero():
    plr = threshold_logits(np.array([[900.0, 0.0]]), 0.9)
    assert unlabeled_loss(Tensor([[900.0, 0.0]]), plr).item() == pytest.approx(0.0, abs=1e-300)


def test_unlabeled_loss_two_points():
    plr = PseudoLabelResult(np.array([0, 2]), np.array([1, 0]), np.array([0.9, 0.9]), 3)
    z = np.array([[0.0, 1.0], [5.0, 5.0], [2.0, 0.0]])
    # CE([0,1], 1) = log(1 + e^-1);  CE([2,0], 0) = log(1 + e^-2)
    expected = 0.5 * (math.log(1 + math.exp(-1)) + math.log(1 + math.exp(-2)))
    assert unlabeled_loss(Tensor(z), plr).item() == pytest.approx(expected, rel=1e-14)


def test_unlabeled_loss_index_check():
    plr = PseudoLabelResult(np.array([5]), np.array([0]), np.array([0.9]), 6)
    with pytest.raises(IndexError):
        unlabeled_loss(Tensor(np.zeros((2, 2))), plr)


def test_labeled_loss_values():
    assert labeled_loss(Tensor(np.zeros((1, 4))), np.array([2])).item() == pytest.approx(math.log(4), rel=1e-15)
    z = np.array([[1.0, -1.0, 0.5]])
    once = labeled_loss(Tensor(z), np.array([0])).item()
    twice = labeled_loss(Tensor(np.vstack([z, z])), np.array([0, 0])).item()
    assert once == pytest.approx(twice, rel=1e-15)
    z2 = np.array([[1.0, 0.0], [0.0, 3.0]])
    expected = 0.5 * (math.log(1 + math.exp(-1)) + math.log(1 + math.exp(3)))
    assert labeled_loss(Tensor(z2), np.array([0, 0])).item() == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ParameterError):
        labeled_loss(Tensor(np.zeros((0, 2))), np.array([], dtype=int))


def test_entmin_values():
    assert entmin_loss(Tensor(np.zeros((3, 3)))).item() == pytest.approx(math.log(3), rel=1e-14)
    assert entmin_loss(Tensor([[800.0, 0.0]])).item() == pytest.approx(0.0, abs=1e-12)
    p = entmin_loss(Tensor([[math.log(0.8), math.log(0.2)]])).item()
    assert p == pytest.approx(-(0.8 * math.log(0.8) + 0.2 * math.log(0.2)), rel=1e-13)
    assert p == pytest.approx(0.50040, abs=5e-6)


# -- one step --------------------------------------------------------------------------------------


def test_step_needs_a_batch(view):
    bundle = ModelBundle(mcfg(view), seed=0)
    opt = SGD(bundle.param_groups())
    with pytest.raises(ParameterError):
        train_step([], bundle, opt, TrainConfig(), view.feature_std, Rng(0))


def test_supervised_only_reduces_to_labeled_ce(view):
    cfg = TrainConfig(modulation=False, tau=1.0, baseline="supervised_only")
    bundle = ModelBundle(mcfg(view), seed=1)
    batches = sample_step_batches(view, 16, 16, Rng(4))
    loss, _ = step_loss(batches, bundle, cfg, view.feature_std, Rng(5))
    rng, expected = Rng(5), 0.0
    for b in batches:
        weak_augment(b.unlabeled_x, rng, view.feature_std)
        strong_augment(b.unlabeled_x, rng, view.feature_std)
        xw = weak_augment(b.labeled_x, rng, view.feature_std)
        expected += labeled_loss(extract_features(bundle, xw) @ bundle.W.T, b.labeled_y).item()
    assert loss.item() == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_step_loss_gradients_match_fd(seed):
    assert max(loss_gradient_errors(seed).values()) < 1e-4


def test_pseudo_labels_carry_no_gradient(view):
    bundle = ModelBundle(mcfg(view, hidden=(8,)), seed=3)
    (b, *_) = sample_step_batches(view, 4, 16, Rng(1))
    strong = b.unlabeled_x * 1.1

    def grads(frozen):
        bundle.zero_grad()
        plr = frozen or pseudo_label(bundle, b.unlabeled_x, None, 0.201)
        unlabeled_loss(extract_features(bundle, strong) @ bundle.W.T, plr).backward()
        return [None if p.grad is None else p.grad.copy() for p in bundle.parameters()]

    frozen = pseudo_label(bundle, b.unlabeled_x, None, 0.201)
    assert len(frozen.accepted) > 0
    for a, c in zip(grads(None), grads(frozen)):
        assert (a is None and c is None) or np.array_equal(a, c)


def test_one_domain_step_matches_reference():
    ds = generate(ShiftSpec(num_domains=2, samples_per_class_per_domain=40, seed=8))
    v = split(ds, SplitPlan(target_domain=1, source_domains=(0,), seed=8))
    cfg = TrainConfig(epochs=1, steps_per_epoch=3, modulation=False, seed=8)
    _, rec = train(v, cfg, mcfg(v))
    assert rec.step_losses == fixmatch_losses(v, cfg, mcfg(v))


def test_reference_rejects_multi_domain(view):
    with pytest.raises(ParameterError):
        fixmatch_losses(view, TrainConfig(), mcfg(view))


# -- training runs ---------------------------------------------------------------------------------


def test_zero_epochs(view):
    bundle, rec = train(view, TrainConfig(epochs=0), mcfg(view))
    assert rec.rows == [] and rec.step_losses == []
    assert bundle.checksum() == ModelBundle(mcfg(view), seed=0).checksum()


def test_training_is_deterministic(view):
    _, a = train(view, TrainConfig(**SHORT, seed=4), mcfg(view))
    _, b = train(view, TrainConfig(**SHORT, seed=4), mcfg(view))
    assert a.step_losses == b.step_losses
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in rows]  # noqa: E731
    assert str(strip(a.rows)) == str(strip(b.rows))


def test_lr_follows_cosine_schedule(view):
    cfg = TrainConfig(epochs=4, steps_per_epoch=2)
    _, rec = train(view, cfg, mcfg(view))
    sched = SgdConfig(total_epochs=4)
    assert rec.series("lr_backbone").tolist() == [cosine_lr(e, sched, 0.003) for e in range(4)]
    assert rec.series("lr_head").tolist() == [cosine_lr(e, sched, 0.01) for e in range(4)]
    assert cosine_lr(4, sched, 0.01) == 0.0


def test_record_shape_and_ranges(view):
    _, rec = train(view, TrainConfig(**SHORT, tau=0.5), mcfg(view))
    assert len(rec.rows) == 2 * 4  # 3 domains + "all" per epoch
    for r in rec.rows:
        assert 0.0 <= r["pl_utilization"] <= 1.0
        assert math.isnan(r["pl_accuracy"]) or 0.0 <= r["pl_accuracy"] <= 1.0
    assert len(rec.domain_info) == 2 * 5 * 3


def test_csv_and_json(view, tmp_path):
    _, rec = train(view, TrainConfig(**SHORT, seed=6), mcfg(view))
    with open(rec.to_csv(tmp_path / "r.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == 1 + len(rec.rows)
    summary = json.loads(rec.to_json(tmp_path / "r.json").read_text())
    assert summary["seed"] == 6 and summary["config"]["train"]["seed"] == 6
    assert "final_target_accuracy" in summary


@pytest.mark.parametrize("kw", [dict(baseline="entmin"), dict(baseline="supervised_only"), dict(modulation=False),
                                dict(update_per_domain=True)])
def test_training_variants_run(view, kw):
    _, rec = train(view, TrainConfig(**SHORT, **kw), mcfg(view))
    assert np.all(np.isfinite(rec.step_losses))


@pytest.mark.parametrize("kw", [dict(mask_variant="general_map"), dict(mask_variant="off"), dict(noise_mode="add"),
                                dict(noise_mode="none"), dict(aggregation="principal_eig"),
                                dict(aggregation="mean_eig"), dict(separate_classifiers=True),
                                dict(detach_domain_info=False)])
def test_model_variants_run(view, kw):
    bundle, rec = train(view, TrainConfig(**SHORT), mcfg(view, **kw))
    assert np.all(np.isfinite(rec.step_losses))
    if kw.get("separate_classifiers"):
        assert len(bundle.classifiers) == 3


def test_setting_two_unlabeled_domains_use_only_lu(dataset):
    v = split(dataset, SplitPlan(target_domain=3, setting="one_labeled_domain", labeled_domain=0))
    _, rec = train(v, TrainConfig(epochs=3, steps_per_epoch=20, tau=0.22), mcfg(v))
    for dom in ("1", "2"):
        assert np.all(rec.series("loss_labeled", dom) == 0.0)
    assert np.all(rec.series("loss_labeled", "0") > 0.0)
    assert rec.series("loss_unlabeled", "1").sum() > 0.0


# -- inference -------------------------------------------------------------------------------------


def _bundle_with_logits(row):
    b = ModelBundle(ModelConfig(input_dim=2, num_classes=3, feature_dim=8, hidden=()), seed=0)
    b.f.layers[0].weight.data[...] = 0.0
    b.f.layers[0].bias.data[...] = 0.0
    b.f.layers[0].bias.data[0] = 1.0
    b.W.data[...] = 0.0
    b.W.data[:, 0] = row
    return b


def test_predict_argmax_and_ties():
    assert predict(_bundle_with_logits([0.1, 0.2, 0.9]), np.zeros((1, 2))).tolist() == [2]
    assert predict(_bundle_with_logits([0.5, 0.5, 0.1]), np.zeros((1, 2))).tolist() == [0]


def test_predict_ignores_mask_generator(view, gen):
    bundle = ModelBundle(mcfg(view), seed=2)
    before = predict(bundle, view.target_x)
    for p in bundle.mask_generator():
        p.data[...] += gen.normal(0, 5.0, p.shape)
    assert np.array_equal(predict(bundle, view.target_x), before)


def test_predict_separate_classifiers_uses_mean(view):
    bundle = ModelBundle(mcfg(view, separate_classifiers=True, num_domains=3), seed=2)
    W = np.mean([w.data for w in bundle.classifiers], axis=0)
    feats = extract_features(bundle, view.target_x).data
    assert np.array_equal(predict(bundle, view.target_x), np.argmax(feats @ W.T, axis=1))


def test_predict_width_and_accuracy(view):
    bundle = ModelBundle(mcfg(view), seed=2)
    with pytest.raises(Exception):
        predict(bundle, np.zeros((2, 3)))
    acc = accuracy(bundle, view.target_x, view.target_y)
    assert 0.0 <= acc <= 1.0


def test_cross_entropy_used_by_losses_is_mean():
    z, y = np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([1, 0])
    assert labeled_loss(Tensor(z), y).item() == cross_entropy(Tensor(z), y).item()
