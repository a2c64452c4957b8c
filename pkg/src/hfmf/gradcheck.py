"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, record_relu_masks

ABS_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck_report(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                     max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients of ``loss_fn``.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of
    ``tensors`` on every call.  With ``max_entries`` only that many randomly
    chosen entries per tensor are compared.  An entry whose +-eps window
    flips any ReLU unit sits on a kink; it is counted in ``skipped_kinks``
    and, when sampling, replaced by the next candidate.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    backward(loss_fn())
    worst, checked, skipped = 0.0, 0, 0
    for t in tensors:
        analytic = t.grad.copy().ravel()
        order = rng.permutation(t.size) if max_entries is not None else np.arange(t.size)
        want = t.size if max_entries is None else min(max_entries, t.size)
        got: list[int] = []
        numeric: list[float] = []
        base = t.data
        for k in order:
            if len(got) == want:
                break
            pos = np.unravel_index(k, t.shape)
            plus = base.copy()
            plus[pos] += eps
            t.data = plus
            with record_relu_masks() as m_plus:
                fp = loss_fn().item()
            minus = base.copy()
            minus[pos] -= eps
            t.data = minus
            with record_relu_masks() as m_minus:
                fm = loss_fn().item()
            if not _same(m_plus, m_minus):
                skipped += 1
                continue
            got.append(int(k))
            numeric.append((fp - fm) / (2 * eps))
        t.data = base
        checked += len(got)
        worst = max(worst, relative_error(analytic[got], np.array(numeric)))
    for t in tensors:
        t.zero_grad()
    return GradCheckReport(worst, checked, skipped)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error of :func:`gradcheck_report`."""
    return gradcheck_report(loss_fn, tensors, eps, max_entries, rng).max_rel_error
