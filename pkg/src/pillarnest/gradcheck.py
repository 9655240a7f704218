"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures


def _rel_err(a, n, atol):
    return abs(a - n) / max(abs(a), abs(n), atol)


def check_gradients(loss_fn, params, h=1e-5, rtol=5e-3, atol=1e-6, n_samples=None, rng=None):
    """Compare autodiff gradients with central differences.

    ``loss_fn()`` must rebuild the graph from the current parameter values and
    return a scalar Tensor. ``params`` is a list of leaf tensors. When
    ``n_samples`` is given, that many (param, index) pairs are spot-checked,
    otherwise every entry of every parameter is.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    pairs = []
    if n_samples is None:
        for pi, p in enumerate(params):
            pairs.extend((pi, idx) for idx in np.ndindex(p.shape))
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = np.array([p.size for p in params], dtype=float)
        for _ in range(n_samples):
            pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = int(rng.integers(params[pi].size))
            pairs.append((pi, np.unravel_index(flat, params[pi].shape)))

    worst, failures = 0.0, []
    with no_grad():
        for pi, idx in pairs:
            p = params[pi]
            orig = p.data[idx].copy()
            p.data[idx] = orig + h
            fp = float(loss_fn().data)
            p.data[idx] = orig - h
            fm = float(loss_fn().data)
            p.data[idx] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[pi][idx])
            err = _rel_err(ana, num, atol)
            worst = max(worst, err)
            if err > rtol:
                failures.append((getattr(p, "name", pi), idx, ana, num))
    return GradCheckResult(worst, len(pairs), failures)
