"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ldelab.errors import NumericError
from ldelab.substrate.tensor import Tape, Tensor, forward_backward


def _scalar(t: Tensor) -> float:
    return float(np.asarray(t.data, dtype=np.float64).reshape(-1)[0])


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-4) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` receives a leaf tensor (double precision, on a fresh tape) and must
    return a scalar tensor recorded on the same tape.  The relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.

    The numeric derivative is the fourth-order central stencil
    ``(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h``; its truncation
    error is O(h^4), which allows a step large enough that rounding noise
    stays far below the tolerance even on small gradient coordinates.
    """
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x0)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite at the base point")
    analytic = forward_backward(tape, out)[leaf.id].reshape(-1)

    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        vals = []
        for step in (h, -h, 2 * h, -2 * h):
            xp = flat.copy()
            xp[i] += step
            t = Tape(grad=False)
            v = _scalar(f(t.leaf(xp.reshape(x0.shape), requires_grad=False)))
            if not np.isfinite(v):
                raise NumericError(f"non-finite function value at coordinate {i}")
            vals.append(v)
        numeric = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h)
        a = float(analytic[i])
        if not np.isfinite(a):
            raise NumericError(f"non-finite analytic gradient at coordinate {i}")
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


def grad_check_params(loss_fn: Callable[[Tape, dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                      h: float = 1e-4, names=None) -> dict[str, float]:
    """Run :func:`grad_check` for each named parameter array, holding the rest fixed."""
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    report = {}
    for name in names or list(params):
        def f(leaf: Tensor, _name=name) -> Tensor:
            tape = leaf.tape
            bound = {k: (leaf if k == _name else tape.const(v)) for k, v in params.items()}
            return loss_fn(tape, bound)

        report[name] = grad_check(f, params[name], h)
    return report
