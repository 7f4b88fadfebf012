"""Central finite-difference checks for the autodiff graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (perturbed in place)."""
    if not x.flags.c_contiguous:
        raise ValueError("numerical_grad needs a C-contiguous array to perturb in place")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - b|| / max(||a||, ||b||)``; differences at or below ``floor`` count as 0."""
    diff = float(np.linalg.norm(a - b))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if diff <= floor:
        return 0.0
    return diff / scale


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_cases: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def check_gradients(
    build_loss: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Largest relative error between backprop and finite differences over ``inputs``.

    ``build_loss`` must rebuild the graph from scratch on every call, reading the
    current ``.data`` of the given tensors.
    """
    loss = build_loss(inputs)
    grads = backward(loss, inputs)
    # central differences carry round-off of roughly eps * |f| / step per entry;
    # parameters with an exactly zero true gradient only ever see that noise
    floor = 1e-8 * max(1.0, abs(float(loss.data)))
    worst = 0.0
    for t in inputs:
        analytic = grads[t].copy()

        def f():
            return float(build_loss(inputs).data)

        numeric = numerical_grad(f, t.data, step)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return float(worst)


# ---------------------------------------------------------------- suites


def _suite(name: str, n_cases: int, tol: float, case) -> CheckResult:
    worst = 0.0
    for i in range(n_cases):
        worst = max(worst, case(i))
    return CheckResult(name, worst, n_cases, tol)


def run_suites(n_cases: int = 50, seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """Finite-difference checks of every differentiable component on random inputs.

    Inputs are drawn uniformly from [-2, 2] (logits, features, weights).
    """
    # deferred: these modules import autograd themselves
    from . import autograd as ag
    from .ads import AdsParams, ads_forward_train
    from .losses import asl_loss, asl_loss_from_logits, focal_multilabel_loss, survival_nll
    from .masks import build_masks
    from .model import AbmilParams, aggregate_main, aggregate_residual, classify

    def u(rng, *shape):
        return rng.uniform(-2.0, 2.0, shape)

    def asl_case(i):
        rng = np.random.default_rng([seed, 1, i])
        G = int(rng.integers(2, 6))
        logits = ag.parameter(u(rng, G))
        y = np.eye(G)[rng.integers(G)]
        gp, gn = rng.uniform(0, 3), rng.uniform(0, 5)
        return check_gradients(lambda t: asl_loss(ag.softmax(t[0]), y, gp, gn), [logits])

    def focal_case(i):
        rng = np.random.default_rng([seed, 2, i])
        C = int(rng.integers(1, 5))
        logits = ag.parameter(u(rng, C))
        y = rng.uniform(0, 1, C)
        alpha, gamma = rng.uniform(0, 1), rng.uniform(0, 3)
        return check_gradients(lambda t: focal_multilabel_loss(ag.sigmoid(t[0]), y, alpha, gamma), [logits])

    def surv_case(i):
        rng = np.random.default_rng([seed, 3, i])
        T = int(rng.integers(2, 6))
        logits = ag.parameter(u(rng, T))
        k, d, a = int(rng.integers(1, T + 1)), int(rng.integers(0, 2)), rng.uniform(0, 1)
        return check_gradients(lambda t: survival_nll(ag.sigmoid(t[0]), d, k, a), [logits])

    def ads_case(pool):
        def case(i):
            rng = np.random.default_rng([seed, 4, i, pool == "max"])
            n, d = int(rng.integers(1, 10)), int(rng.integers(1, 5))
            params = AdsParams.init(d, hidden=6, k=int(rng.integers(1, 4)), pool=pool, rng=rng)
            for p in params.parameters():
                p.data = u(rng, *p.shape)
            x = ag.parameter(u(rng, n, d))
            probe = u(rng, -(-n // params.k), d)
            shuffle_seed = int(rng.integers(1 << 30))

            def loss(ts):
                out, _ = ads_forward_train(ts[0], params, seed=shuffle_seed)
                return ag.sum(ag.mul(ag.tanh(out), probe))

            return check_gradients(loss, [x, *params.parameters()])

        return case

    def composite_case(i):
        rng = np.random.default_rng([seed, 5, i])
        d, out = int(rng.integers(2, 5)), 3
        abmil = AbmilParams.init(d, out, d_attn=5, rng=rng)
        ads = AdsParams.init(d, hidden=4, k=2, pool="max", rng=rng)
        for p in abmil.parameters() + ads.parameters():
            p.data = u(rng, *p.shape)
        bags = [u(rng, int(rng.integers(1, 9)), d) for _ in range(int(rng.integers(1, 4)))]
        labels = rng.integers(0, out, len(bags))
        params = abmil.parameters() + ads.parameters()
        shuffle_seed = int(rng.integers(1 << 30))

        def loss(_):
            rows = [ads_forward_train(b, ads, seed=[shuffle_seed, j])[0] for j, b in enumerate(bags)]
            lengths = [r.shape[0] for r in rows]
            L = max(sum(lengths), 1)
            ids = np.concatenate([np.full(n, j + 1) for j, n in enumerate(lengths)])
            feats = ag.concat(rows, axis=0)
            masks = build_masks(ids, len(bags))
            _, Z, _ = aggregate_main(feats, masks, abmil)
            logp = ag.log_softmax(classify(Z, abmil), axis=-1)
            main = ag.neg(ag.mean(ag.sum(ag.mul(np.eye(out)[labels], logp), axis=-1)))
            res = aggregate_residual(feats, np.ones(L, dtype=bool), abmil)[0]
            res_loss = asl_loss_from_logits(classify(res, abmil), np.eye(out)[labels[0]], 1.0, 2.0)
            return ag.add(main, ag.mul(res_loss, 0.2))

        return check_gradients(loss, params)

    def core_case(i):
        rng = np.random.default_rng([seed, 6, i])
        a = ag.parameter(u(rng, 3, 4))
        b = ag.parameter(u(rng, 4, 2))
        mask = rng.random((3, 2)) < 0.3
        mask[:, 0] = False

        def loss(ts):
            x, y = ts
            s = ag.softmax(ag.masked_fill(ag.matmul(ag.tanh(x), y), mask), axis=1)
            m = ag.max(ag.exp(ag.rowscale(s, ag.sigmoid(ag.sum(x, axis=1)))), axis=0)
            return ag.add(ag.sum(ag.log(m)), ag.mean(ag.reshape(ag.take_rows(ag.transpose(y), [1, 0, 1]), (-1,))))

        return check_gradients(loss, [a, b])

    return [
        _suite("core_ops", n_cases, tol, core_case),
        _suite("asl", n_cases, tol, asl_case),
        _suite("focal", n_cases, tol, focal_case),
        _suite("survival_nll", n_cases, tol, surv_case),
        _suite("ads_max", n_cases, tol, ads_case("max")),
        _suite("ads_random", n_cases, tol, ads_case("random")),
        _suite("abmil_ads_loss", n_cases, tol, composite_case),
    ]
