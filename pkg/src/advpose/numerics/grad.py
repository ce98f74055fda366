from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tape, Tensor


def input_gradient(model: Callable[[Tensor], Tensor], image, label, loss_fn: Callable) -> np.ndarray:
    """Gradient of ``loss_fn(model(x), label)`` with respect to the input ``x``.

    ``model`` must treat its weights as constants (no ``requires_grad``); only
    the image is a differentiation target, so no weight gradient is produced.
    """
    x = Tensor(np.asarray(image), requires_grad=True)
    if not np.all(np.isfinite(x.data)):
        raise ContractError("input_gradient needs a finite image")
    with Tape() as tape:
        out = model(x)
        loss = loss_fn(out, label)
    if not isinstance(loss, Tensor) or len(tape) == 0:
        # output does not depend on the image
        return np.zeros_like(x.data)
    return tape.gradient(loss, [x])[0]


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-3,
                       indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    With ``indices`` only those entries are probed; the rest of the result is zero.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in it:
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(|a|, |b|, tiny), the comparison used by the gradient suite."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
