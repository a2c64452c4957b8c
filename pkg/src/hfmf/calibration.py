"""Platt scaling and expected calibration error."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError


@dataclass
class PlattParams:
    A: float = 1.0
    B: float = 0.0
    final_nll: float = 0.0
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B, "final_nll": self.final_nll, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "PlattParams":
        return cls(float(d["A"]), float(d["B"]), float(d.get("final_nll", 0.0)), int(d.get("iterations", 0)))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def apply_platt(z, params: PlattParams):
    """Calibrated positive-class probability ``sigmoid(A z + B)``."""
    out = _sigmoid(params.A * np.asarray(z, dtype=np.float64) + params.B)
    return float(out) if out.ndim == 0 else out


def calibrated_logit(z, params: PlattParams):
    """Log-odds of the calibrated probability, i.e. ``A z + B``."""
    return params.A * np.asarray(z, dtype=np.float64) + params.B


def platt_nll(A: float, B: float, z: np.ndarray, y: np.ndarray) -> float:
    """Mean binary negative log-likelihood of ``sigmoid(A z + B)``."""
    s = A * z + B
    # -[y log p + (1-y) log(1-p)] = softplus(s) - y s
    return float(np.mean(np.logaddexp(0.0, s) - y * s))


def fit_platt(logits, labels, tol: float = 1e-8, max_iter: int = 10_000) -> PlattParams:
    """Fit (A, B) by damped Newton on the mean NLL, starting from (1, 0).

    Each step is backtracked until the NLL does not increase, so the fit is
    never worse than the identity map.
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if z.shape != y.shape:
        raise ContractError(f"{z.size} logits vs {y.size} labels")
    if z.size < 2:
        raise ContractError("fit_platt needs at least 2 samples")
    if np.all(y == y[0]):
        raise DegenerateInputError("fit_platt needs both classes present (single-class optimum is unbounded)")
    if not np.all(np.isfinite(z)):
        raise ContractError("logits must be finite")
    w = np.array([1.0, 0.0])
    nll = platt_nll(w[0], w[1], z, y)
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(w[0] * z + w[1])
        r = p - y
        grad = np.array([np.mean(r * z), np.mean(r)])
        if np.linalg.norm(grad) < tol:
            it -= 1
            break
        s = p * (1.0 - p)
        H = np.array([[np.mean(s * z * z), np.mean(s * z)], [np.mean(s * z), np.mean(s)]])
        H += 1e-12 * np.eye(2)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        while True:
            cand = w - t * step
            cand_nll = platt_nll(cand[0], cand[1], z, y)
            if cand_nll <= nll:
                break
            t *= 0.5
            if t < 1e-10:
                # Newton direction stalled; fall back to a small gradient step
                cand = w - 1e-3 * grad
                cand_nll = platt_nll(cand[0], cand[1], z, y)
                if cand_nll > nll:
                    cand, cand_nll = w, nll
                break
        if np.array_equal(cand, w):
            break
        w, nll = cand, cand_nll
    return PlattParams(A=float(w[0]), B=float(w[1]), final_nll=float(nll), iterations=int(it))


# --------------------------------------------------------------------------
# ECE
# --------------------------------------------------------------------------
@dataclass
class ReliabilityTable:
    n_bins: int
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    total: int = field(default=0)

    def ece(self) -> float:
        if self.total == 0:
            return 0.0
        total = 0.0
        # sequential accumulation keeps the result reproducible from the table rows
        for n, a, c in zip(self.counts.tolist(), self.accuracy.tolist(), self.confidence.tolist()):
            total += (n / self.total) * abs(a - c)
        return total

    def rows(self) -> list[dict]:
        return [{"bin_lo": float(self.edges[i]), "bin_hi": float(self.edges[i + 1]),
                 "count": int(self.counts[i]), "accuracy": float(self.accuracy[i]),
                 "confidence": float(self.confidence[i])} for i in range(self.n_bins)]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _confidences(probs, labels):
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if p.size == 0:
        raise ContractError("ece of an empty sample set")
    if p.shape != y.shape:
        raise ContractError(f"{p.size} probabilities vs {y.size} labels")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ContractError("probabilities must lie in [0, 1]")
    pred = (p >= 0.5).astype(np.int64)
    conf = np.maximum(p, 1.0 - p)
    return conf, (pred == y).astype(np.float64)


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1]; bin i covers [i/n, (i+1)/n), the last bin is closed."""
    return np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)


def reliability_table(probs, labels, n_bins: int = 15) -> ReliabilityTable:
    if n_bins < 1:
        raise ContractError(f"n_bins must be >= 1, got {n_bins}")
    conf, correct = _confidences(probs, labels)
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    sum_acc = np.bincount(idx, weights=correct, minlength=n_bins)
    sum_conf = np.bincount(idx, weights=conf, minlength=n_bins)
    nz = counts > 0
    acc = np.zeros(n_bins)
    cf = np.zeros(n_bins)
    acc[nz] = sum_acc[nz] / counts[nz]
    cf[nz] = sum_conf[nz] / counts[nz]
    return ReliabilityTable(n_bins, np.linspace(0.0, 1.0, n_bins + 1), counts, acc, cf, int(conf.size))


def ece(probs, labels, n_bins: int = 15) -> float:
    """Expected calibration error, weights |B_i| / N."""
    return reliability_table(probs, labels, n_bins).ece()
