"""Independent numpy references used by several test modules.

Nothing here touches the autodiff engine: gradients are written out by hand.
"""

import math

import numpy as np


def abmil_ce_step(x, y, params):
    """Loss and hand-derived gradients of gated ABMIL + softmax CE on one bag."""
    V, bV, U, bU, w, Wc, bc = params
    t = np.tanh(x @ V + bV)
    s = 1.0 / (1.0 + np.exp(-(x @ U + bU)))
    g = t * s
    logits = g @ w
    a = np.exp(logits - logits.max())
    a /= a.sum()
    z = a @ x
    o = z @ Wc + bc
    lse = o.max() + math.log(np.exp(o - o.max()).sum())
    loss = lse - o[y]

    do = np.exp(o - lse)
    do[y] -= 1.0
    dWc = np.outer(z, do)
    dz = Wc @ do
    da = x @ dz
    dl = a * (da - a @ da)
    dw = g.T @ dl
    dg = np.outer(dl, w)
    dA = dg * s * (1 - t * t)
    dB = dg * t * s * (1 - s)
    grads = [x.T @ dA, dA.sum(0), x.T @ dB, dB.sum(0), dw, dWc, do]
    return loss, grads


def reference_training(bags, labels, params, lr, epochs, seed):
    """Plain batch-size-1 loop: Adam, cosine decay per epoch, one bag per step."""
    params = [p.copy() for p in params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    losses = []
    for epoch in range(epochs):
        lr_e = lr if epochs <= 1 else 0.5 * lr * (1 + math.cos(math.pi * epoch / epochs))
        for i in np.random.default_rng([seed, epoch]).permutation(len(bags)):
            loss, grads = abmil_ce_step(bags[i], labels[i], params)
            losses.append(loss)
            t += 1
            for j, gr in enumerate(grads):
                m[j] = b1 * m[j] + (1 - b1) * gr
                v[j] = b2 * v[j] + (1 - b2) * gr * gr
                params[j] = params[j] - lr_e * (m[j] / (1 - b1**t)) / (np.sqrt(v[j] / (1 - b2**t)) + eps)
    return losses


def ladder_config(n_bags=50, epochs=3, seed=0):
    from packmil.config import task_defaults

    cfg = task_defaults("grading")
    cfg.data.n_bags = n_bags
    cfg.data.len_min, cfg.data.len_max = 8, 120
    cfg.data.dim = 8
    cfg.model.d_attn = 16
    cfg.loss.lam = 0.0
    cfg.train.sampling = False
    cfg.ads.enabled = False
    cfg.train.batch_size = 1
    cfg.train.pack_length = 128
    cfg.train.epochs = epochs
    cfg.train.lr = 1e-3
    cfg.train.seed = seed
    return cfg


def ladder_gap(n_bags=50, epochs=3, seed=0):
    """Max abs difference between packed-trainer step losses and the reference loop."""
    from packmil.data import synthesize_bags
    from packmil.trainer import PackTrainer

    cfg = ladder_config(n_bags, epochs, seed)
    bags, _ = synthesize_bags(cfg.data, seed)
    assert max(b.n_patches for b in bags) <= cfg.train.pack_length
    trainer = PackTrainer(cfg, cfg.data.dim)
    init = [p.data.copy() for p in trainer.model.parameters()]
    for e in range(epochs):
        trainer.train_epoch(bags, e)
    got = np.array(trainer.state.step_losses)
    want = np.array(reference_training([b.features for b in bags], [b.label.grade for b in bags],
                                       init, cfg.train.lr, epochs, cfg.train.seed))
    assert got.shape == want.shape
    return float(np.abs(got - want).max())
