"""Central finite differences and analytic-vs-numeric gradient comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from foam.tensor import Tensor


@dataclass
class GradReport:
    """Outcome of comparing backward() against finite differences."""

    max_rel_error: float
    passed: bool
    worst_index: int
    worst_param: str = ""
    per_param: dict[str, float] = field(default_factory=dict)


def finite_diff_grad(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``p.data`` by central differences.

    ``f`` is re-evaluated with ``p.data`` perturbed in place, one element at a time.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective while perturbing element {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(p.shape)


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    tol: float = 1e-3,
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare analytic and finite-difference gradients of ``f`` for each parameter.

    Relative error per element is ``|a - b| / max(1e-8, |a| + |b|)``. With
    ``max_elements`` set, only a seeded random subset of each parameter's
    entries is perturbed (the analytic side is still the full backward pass).
    Failures are reported, never raised.
    """
    named = dict(params) if isinstance(params, dict) else {f"p{i}": t for i, t in enumerate(params)}
    for t in named.values():
        t.grad = None
    f().backward()
    rng = np.random.default_rng(seed)

    worst, worst_idx, worst_name = 0.0, -1, ""
    per_param: dict[str, float] = {}
    for name, t in named.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        errs = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            errs[k] = rel_error(np.float64(analytic.reshape(-1)[i]), np.float64(numeric))
        m = float(errs.max()) if errs.size else 0.0
        per_param[name] = m
        if m > worst or worst_idx < 0:
            worst, worst_idx, worst_name = m, int(idx[int(errs.argmax())]) if errs.size else 0, name
    return GradReport(worst, worst < tol, worst_idx, worst_name, per_param)
