"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import NumericalError, Tensor, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _evaluate(f: Callable[[], Tensor]):
    value = f()
    out = value.data.reshape(())[()] if isinstance(value, Tensor) else value
    if not np.isfinite(float(out)):
        raise NumericalError(f"grad_check: objective evaluated to {out}")
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | Mapping[str, Tensor],
               h: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None, oracle: str = "float64") -> dict[str, float]:
    """Max relative error between backprop and central differences, per parameter.

    ``f`` must be a deterministic closure returning a scalar Tensor that reads
    the current values of ``params``.  Entries are perturbed in place and
    restored.  ``max_entries`` checks a random subset of a large parameter.

    ``oracle="extended"`` evaluates the finite differences with every listed
    parameter promoted to long double.  In float64 the difference quotient
    carries rounding noise near ulp(f) / 2h (about 2e-11 for f ~ 3), so
    entries whose true gradient is below ~1e-6 cannot reach 1e-4 relative
    agreement however exact the backward pass is.  The analytic side is
    always computed at the parameters' own precision.
    """
    named = dict(params) if isinstance(params, Mapping) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)}
    if not named:
        return {}
    for p in named.values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check: objective is not finite")
    out.backward()

    analytic_all = {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for name, p in named.items()}
    if oracle == "float64":
        return _numeric_pass(f, named, analytic_all, h, max_entries, rng)
    if oracle != "extended":
        raise ValueError(f"oracle must be 'float64' or 'extended', got {oracle!r}")
    saved = {name: p.data for name, p in named.items()}
    try:
        for p in named.values():
            p.data = p.data.astype(np.longdouble)
        with precision("extended"), no_grad():
            return _numeric_pass(f, named, analytic_all, h, max_entries, rng)
    finally:
        for name, p in named.items():
            p.data = saved[name]


def _numeric_pass(f, named, analytic_all, h, max_entries, rng) -> dict[str, float]:
    report: dict[str, float] = {}
    for name, p in named.items():
        analytic = analytic_all[name]
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picker = rng if rng is not None else np.random.default_rng(0)
            entries = np.sort(picker.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(f)
            flat[i] = orig - h
            fm = _evaluate(f)
            flat[i] = orig
            numeric = float((fp - fm) / (2 * h))
            err = float(relative_error(np.array(analytic.reshape(-1)[i]), np.array(numeric)))
            worst = max(worst, err)
        report[name] = worst
    return report
