"""Finite-difference verification of tape gradients.

The checker is deliberately independent of the tape: it re-evaluates the
forward function at perturbed parameter values and compares central
differences against the analytic gradients collected from one backward pass.
Callers must disable stochastic ops (dropout) so the function is a pure
deterministic map of its parameters.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, recording

# Components whose analytic and FD magnitudes both sit below this floor are
# dominated by roundoff in f(theta+h) - f(theta-h); the floor keeps the
# relative error meaningful there.
REL_ERR_FLOOR = 1e-5


def relative_error(a, fd, floor=REL_ERR_FLOOR):
    return abs(a - fd) / max(abs(a), abs(fd), floor)


class GradCheckReport:
    """Per-parameter max relative error between tape and FD gradients."""

    def __init__(self):
        self.per_param = {}

    def add(self, name, err):
        self.per_param[name] = max(err, self.per_param.get(name, 0.0))

    @property
    def max_rel_err(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    def lines(self):
        width = max((len(n) for n in self.per_param), default=0)
        return [f"{n:<{width}}  {e:.3e}" for n, e in sorted(self.per_param.items())]

    def __str__(self):
        return "\n".join(self.lines() + [f"max rel err: {self.max_rel_err:.3e}"])


def check_gradients(f, params, h=1e-5, max_components=None, rng_seed=0):
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from the
    given parameters. When ``max_components`` is set, at most that many
    randomly chosen components per parameter are perturbed (the analytic
    side is always exact); otherwise every component is checked.

    Raises NonFiniteError naming the first op that produced NaN/Inf.
    """
    tape = Tape(check_finite=True)
    with recording(tape):
        loss = f()
    tape.backward(loss)
    analytic = {}
    for p in params:
        g = p.tensor.grad
        analytic[p.name] = np.zeros_like(p.data) if g is None else g.copy()
        p.tensor.grad = None
    tape.clear()

    rng = np.random.default_rng(rng_seed)
    report = GradCheckReport()
    for p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        if max_components is not None and flat.size > max_components:
            idxs = rng.choice(flat.size, size=max_components, replace=False)
            idxs.sort()
        else:
            idxs = range(flat.size)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fplus = float(f().data)
            flat[i] = orig - h
            fminus = float(f().data)
            flat[i] = orig
            fd = (fplus - fminus) / (2.0 * h)
            worst = max(worst, relative_error(a_flat[i], fd))
        report.add(p.name, worst)
    return report
