"""Finite-difference verification of analytic gradients.

grad_check probes a random subset of parameter coordinates with central
differences in float64 and compares against the analytic gradient using a
guarded relative error. Networks must expose forward_and_tape / backward
over a flat float64 params vector for this to apply.
"""

from __future__ import annotations

import numpy as np


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient w.r.t. pred (sign/N)."""
    diff = pred - target
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def loss_and_grad(net, x: np.ndarray, target: np.ndarray,
                  t: float | None = None) -> tuple[float, np.ndarray]:
    """L1 training loss of net(x, t) against target, with parameter grads."""
    if getattr(net, "use_time", False):
        pred, tape = net.forward_and_tape(x, t)
    else:
        pred, tape = net.forward_and_tape(x)
    loss, dpred = l1_loss(pred, target)
    grad = np.zeros_like(net.params)
    net.backward(tape, dpred, grad)
    return loss, grad


def grad_check(net, x: np.ndarray, target: np.ndarray, t: float | None = None,
               n_probes: int = 64, h: float = 1e-5, tol: float = 1e-4,
               seed: int = 0) -> float:
    """Return the max relative error over probed coordinates; raise if > tol.

    The smooth L2 loss 0.5*mean((pred-target)^2) is used so central
    differences are valid everywhere (L1's kink would poison probes near
    zero residual).
    """
    if net.params.dtype != np.float64:
        raise ValueError("grad_check requires a float64 net")

    def run(params: np.ndarray) -> tuple[float, np.ndarray | None, list | None]:
        saved = net.params
        net.params = params
        try:
            if getattr(net, "use_time", False):
                pred, tape = net.forward_and_tape(x, t)
            else:
                pred, tape = net.forward_and_tape(x)
        finally:
            net.params = saved
        diff = pred - target
        return float(0.5 * np.mean(diff * diff)), diff / diff.size, tape

    base = net.params.copy()
    _, dpred, tape = run(base)
    analytic = np.zeros_like(base)
    saved = net.params
    net.params = base
    try:
        net.backward(tape, dpred, analytic)
    finally:
        net.params = saved

    n = base.size
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 424242]))
    n_probes = min(int(n_probes), n)
    idx = rng.choice(n, size=n_probes, replace=False)
    worst = 0.0
    for i in idx:
        pert = base.copy()
        pert[i] = base[i] + h
        lp, _, _ = run(pert)
        pert[i] = base[i] - h
        lm, _, _ = run(pert)
        numeric = (lp - lm) / (2.0 * h)
        a = float(analytic[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, rel)
        if rel > tol:
            raise AssertionError(
                f"gradient mismatch at param {i}: analytic {a:.3e}, "
                f"numeric {numeric:.3e}, rel {rel:.3e}")
    return worst
