"""Central finite-difference checks against the autodiff gradients.

The networks here are only piecewise smooth (ReLU, max-pool, kNN selection).
A central difference whose probes land on different pieces measures a kink,
not a derivative, so every probe records its discrete branch decisions and
the step is halved for that element until all probes stay on the base
point's piece.

Layer norm over low-spread attention outputs gives these functions a
curvature scale of a few hundredths, so the O(h^2) truncation error of a
single central difference at h=1e-3 is itself around 1e-4. The estimate is
therefore refined with one Richardson step, (4 D(h/2) - D(h)) / 3, whose
error is O(h^4). The plain single-step estimate is reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

from .tensor import Tensor, no_grad, record_branches


@dataclass
class TensorCheck:
    error: float  # ||a - n|| / max(||a||, ||n||) against the refined estimate
    plain: float  # same metric against the single central difference at h
    elementwise: float  # worst |a - n| / max(|a|, |n|, 1e-8) against the refined estimate
    adapted: int  # elements whose step had to shrink to avoid a kink
    size: int


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _evaluate(fn: Callable[[], Tensor]) -> Tuple[float, List[np.ndarray]]:
    with no_grad(), record_branches() as branches:
        value = fn().item()
    return value, branches


def numerical_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-3,
    min_h: float = 1e-7,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Kink-aware central differences of ``fn`` with respect to ``param``.

    Perturbs ``param.data`` in place. Returns ``(refined, plain, adapted)``:
    the Richardson-refined estimate, the single-step estimate, and how many
    elements needed a step smaller than ``h``.
    """
    _, base = _evaluate(fn)
    refined = np.zeros_like(param.data, dtype=np.float64)
    plain = np.zeros_like(refined)
    flat = param.data.reshape(-1)
    adapted = 0
    for i in range(flat.size):
        orig = flat[i]
        step = h
        while True:
            values, smooth = [], True
            for delta in (step, -step, step / 2, -step / 2):
                flat[i] = orig + delta
                v, br = _evaluate(fn)
                values.append(v)
                smooth = smooth and _same_branches(base, br)
            flat[i] = orig
            if smooth or step / 2 < min_h:
                break
            step /= 2
        adapted += step < h
        d_full = (values[0] - values[1]) / (2.0 * step)
        d_half = (values[2] - values[3]) / step
        plain.reshape(-1)[i] = d_full
        refined.reshape(-1)[i] = (4.0 * d_half - d_full) / 3.0
    return refined, plain, adapted


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Tensor-level ``||a - n|| / max(||a||, ||n||, floor)`` in the 2-norm."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def elementwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if not analytic.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
) -> Dict[str, TensorCheck]:
    """Compare backward against finite differences for every named tensor."""
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    fn().backward()
    report = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        refined, plain, adapted = numerical_grad(fn, p, h)
        report[name] = TensorCheck(
            relative_error(analytic, refined),
            relative_error(analytic, plain),
            elementwise_error(analytic, refined),
            adapted,
            p.size,
        )
    return report


def worst(report: Mapping[str, TensorCheck]) -> Tuple[str, float]:
    name = max(report, key=lambda n: report[n].error)
    return name, report[name].error
