"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0
    skipped_kinks: int = 0

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g}, "
                f"{self.checked} entries, {self.skipped_kinks} kinks skipped)")


def grad_check(f: Callable[..., Tensor], inputs: Tensor | np.ndarray | Sequence,
               h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
               kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare ``backward`` against central differences of scalar ``f``.

    Inputs are promoted to float64 leaves.  The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``.  Entries where the forward and
    backward one-sided slopes disagree by more than ``kink_tol`` (relative)
    straddle a non-smooth point (relu, max, abs) and are skipped.
    """
    if isinstance(inputs, (Tensor, np.ndarray)):
        inputs = [inputs]
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
              for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    backward(out)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for t, a in zip(leaves, arrays)]

    def evaluate(k, flat_i, value):
        probe = [a.copy() for a in arrays]
        probe[k].reshape(-1)[flat_i] = value
        with no_grad():
            return f(*[Tensor(p) for p in probe]).item()

    with no_grad():
        f0 = f(*[Tensor(a) for a in arrays]).item()
    worst, per_input, checked, skipped = 0.0, [], 0, 0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        an = analytic[k].reshape(-1)
        local = 0.0
        for i in range(flat.size):
            x0 = flat[i]
            fp = evaluate(k, i, x0 + h)
            fm = evaluate(k, i, x0 - h)
            central = (fp - fm) / (2 * h)
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(central)):
                skipped += 1
                continue
            err = abs(an[i] - central) / max(abs(an[i]), abs(central), floor)
            local = max(local, err)
            checked += 1
        per_input.append(local)
        worst = max(worst, local)
    return GradCheckReport(worst, worst <= tol, tol, per_input, checked, skipped)
