"""Straight-line FixMatch with no mask machinery.

A second implementation of the mask-free training loop, written without
the autodiff engine: numpy forward passes, hand-derived gradients for the
MLP backbone and the linear head, its own sampling, augmentation, cosine
schedule and momentum update. It only handles a single source domain and
exists so the modulation-off path of :func:`dgwm.pipeline.train` can be
checked against something that shares none of its training code.
"""
from __future__ import annotations

import math

import numpy as np

from .data import TrainingView
from .errors import ParameterError
from .model import ModelConfig
from .pipeline import TrainConfig


def init_params(cfg: ModelConfig, seed: int) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backbone layers as (weight (in, out), bias) pairs and the C x d head."""
    gen = np.random.Generator(np.random.PCG64(seed))
    widths = [cfg.input_dim, *cfg.hidden, cfg.feature_dim]
    layers = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(n_in)
        layers.append((gen.uniform(-bound, bound, (n_in, n_out)), np.zeros(n_out)))
    bound = 1.0 / np.sqrt(cfg.feature_dim)
    W = gen.uniform(-bound, bound, (cfg.num_classes, cfg.feature_dim))
    return layers, W


def _forward(layers, x):
    acts = [x]
    for i, (w, b) in enumerate(layers):
        h = x @ w
        h += b
        if i < len(layers) - 1:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
        x = h
    return x, acts


def _backward(layers, acts, g):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (acts[i + 1] > 0)
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads


def _softmax_xent(z, y):
    rows = np.arange(len(y))
    s = z - z.max(axis=1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    loss = (-logp[rows, y]).mean()
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    return loss, dz * (1.0 / len(y))


def _confident(z, tau):
    top = z.argmax(axis=1)
    rows = np.arange(len(z))
    rest = np.exp(z - z[rows, top][:, None])
    rest[rows, top] = 0.0
    # max softmax >= tau  <=>  sum_{j != top} exp(z_j - z_top) <= (1 - tau) / tau
    return np.flatnonzero(rest.sum(axis=1) <= (1.0 - tau) / tau), top


def fixmatch_losses(view: TrainingView, cfg: TrainConfig, model_cfg: ModelConfig) -> list[float]:
    """Per-step training loss of plain FixMatch on a one-source view."""
    if len(view.sources) != 1:
        raise ParameterError("the reference loop trains on exactly one source domain")
    if cfg.baseline != "fixmatch":
        raise ParameterError("the reference loop implements FixMatch only")
    src = view.sources[0]
    std = view.feature_std
    layers, W = init_params(model_cfg, cfg.seed)
    gen = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
    vel_f = [None] * len(layers)
    vel_w = None
    losses = []
    n_l, n_u = len(src.labeled_y), len(src.unlabeled_x)

    for epoch in range(cfg.epochs):
        cos = math.cos(math.pi * epoch / cfg.epochs)
        lr_f = cfg.lr_backbone * 0.5 * (1.0 + cos)
        lr_w = cfg.lr_head * 0.5 * (1.0 + cos)
        for _ in range(cfg.steps_per_epoch):
            li = gen.choice(n_l, size=cfg.labeled_batch, replace=n_l < cfg.labeled_batch)
            ui = gen.choice(n_u, size=cfg.unlabeled_batch, replace=n_u < cfg.unlabeled_batch)
            xl, yl, u = src.labeled_x[li], src.labeled_y[li], src.unlabeled_x[ui]

            u_weak = u + gen.normal(0.0, 1.0, u.shape) * (cfg.weak_noise * std)
            u_strong = u + gen.normal(0.0, 1.0, u.shape) * (cfg.strong_noise * std)
            u_strong = u_strong * (gen.random(u.shape) >= cfg.strong_dropout)
            u_strong = u_strong * gen.uniform(0.8, 1.2, (len(u), 1))
            x_weak = xl + gen.normal(0.0, 1.0, xl.shape) * (cfg.weak_noise * std)

            feats_u, _ = _forward(layers, u_weak)
            keep, guess = _confident(feats_u @ W.T, cfg.tau)

            feats_l, acts_l = _forward(layers, x_weak)
            loss, dz_l = _softmax_xent(feats_l @ W.T, yl)
            grads_f = _backward(layers, acts_l, dz_l @ W)
            grad_w = (feats_l.T @ dz_l).T
            if keep.size:
                feats_s, acts_s = _forward(layers, u_strong)
                loss_u, dz_sel = _softmax_xent((feats_s @ W.T)[keep], guess[keep])
                dz_s = np.zeros((len(u), W.shape[0]))
                dz_s[keep] = dz_sel
                grads_s = _backward(layers, acts_s, dz_s @ W)
                grads_f = [(a + c, b + d) for (a, b), (c, d) in zip(grads_f, grads_s)]
                grad_w = grad_w + (feats_s.T @ dz_s).T
                loss = loss + loss_u
            losses.append(float(loss))

            for i, ((w, b), (gw, gb)) in enumerate(zip(layers, grads_f)):
                if vel_f[i] is None:
                    vel_f[i] = (gw, gb)
                else:
                    vel_f[i] = (cfg.momentum * vel_f[i][0] + gw, cfg.momentum * vel_f[i][1] + gb)
                layers[i] = (w - lr_f * vel_f[i][0], b - lr_f * vel_f[i][1])
            vel_w = grad_w if vel_w is None else cfg.momentum * vel_w + grad_w
            W = W - lr_w * vel_w
    return losses
