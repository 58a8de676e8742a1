"""
Looking inside the mask generator
=================================

A fresh model, one unlabeled batch per domain. The mask for each domain is
an outer product of a class vector and a feature vector pushed through a
sigmoid, so every 2x2 minor of its logits vanishes.
"""
import numpy as np

from dgwm.analysis import partition_features, verify_gradient_identity
from dgwm.data import ShiftSpec, SplitPlan, generate, sample_step_batches, split
from dgwm.model import ModelBundle, ModelConfig, extract_features, make_mask_pairs
from dgwm.rng import Rng
from dgwm.tensor import no_grad
from dgwm.verify import max_minor

view = split(generate(ShiftSpec(samples_per_class_per_domain=60)), SplitPlan(target_domain=3))
bundle = ModelBundle(ModelConfig(input_dim=20, num_classes=5), seed=1)
batches = sample_step_batches(view, 4, 32, Rng(7))

with no_grad():
    feats = [extract_features(bundle, b.unlabeled_x) for b in batches]
    pairs = make_mask_pairs(feats, bundle, Rng(0))

for b, m in zip(batches, pairs):
    part = partition_features(m.v_f.data)
    print(f"domain {b.domain_id}: mask mean {m.M_ss.data.mean():.3f}, "
          f"|J+| = {part.J_plus.size}, |J-| = {part.J_minus.size}, "
          f"largest minor {max_minor(m.logits_ss.data):.1e}")

# The noisy learning mask differs from the noise-free one.
print("ss vs lrn max gap:", np.abs(pairs[0].M_ss.data - pairs[0].M_lrn.data).max())

# %% gradient of the masked cross-entropy: backward, closed form, finite differences
W, M = bundle.W.data, pairs[0].M_lrn.data
chk = verify_gradient_identity(W, M, feats[0].data[:8], batches[0].diagnostic_labels[:8])
print(f"backward vs closed {chk.backward_vs_closed:.1e}, closed vs numeric {chk.closed_vs_numeric:.1e}")
