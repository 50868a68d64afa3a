"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericalError, Tensor, _Freezer, freezing


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tol: float
    worst_param: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28} {self.n_checked:>8d} {self.max_rel_error:>12.3e} {self.tol:>9.1e}  {status}"


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _scalar(loss: Tensor) -> float:
    value = float(np.asarray(loss.data).reshape(-1)[0]) if loss.size == 1 else None
    if value is None:
        raise GradCheckError("objective must be scalar")
    if not np.isfinite(value):
        raise GradCheckError(f"non-finite objective value {value}")
    return value


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    name: str = "f",
    names: Sequence[str] | None = None,
    richardson: bool = False,
    sample: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward()`` gradients of ``f()`` w.r.t. ``params`` to central differences.

    The baseline evaluation records every stop-gradient value, gradient
    reversal point and frozen mask; perturbed evaluations replay them, so the
    numeric derivative follows only the paths the backward rules keep.

    ``richardson`` combines central differences at ``h`` and ``h/2`` as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the h^2 error term so a larger
    step (less round-off) can be used on nearly flat directions.

    ``sample`` limits the check to that many randomly chosen elements per
    parameter (all elements when None).
    """
    freezer = _Freezer()
    for p in params:
        p.zero_grad()
    try:
        with freezing(freezer):
            loss = f()
            _scalar(loss)
            loss.backward()
    except NumericalError as exc:
        raise GradCheckError(f"{name}: baseline evaluation failed: {exc}") from exc
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        freezer.rewind()
        with freezing(freezer):
            try:
                return _scalar(f())
            except NumericalError as exc:
                raise GradCheckError(f"{name}: perturbed evaluation failed: {exc}") from exc

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_name = ""
    count = 0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        if sample is None or sample >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=sample, replace=False))
        numeric = np.empty(idx.size)
        for k, j in enumerate(idx):
            orig = flat[j]

            def central(step):
                flat[j] = orig + step
                fp = evaluate()
                flat[j] = orig - step
                fm = evaluate()
                flat[j] = orig
                return (fp - fm) / (2 * step)

            d = central(h)
            numeric[k] = (4 * central(h / 2) - d) / 3 if richardson else d
        err = rel_error(analytic[i].reshape(-1)[idx], numeric)
        count += idx.size
        if err.size and err.max() > worst:
            worst = float(err.max())
            worst_name = names[i] if names else f"param[{i}]"
    return GradCheckReport(name=name, max_rel_error=worst, n_checked=count, tol=tol, worst_param=worst_name)


def format_reports(reports: Sequence[GradCheckReport]) -> str:
    header = f"{'check':<28} {'elements':>8} {'max_rel_err':>12} {'tol':>9}  status"
    lines = [header, "-" * len(header)]
    lines += [r.row() for r in reports]
    return "\n".join(lines)
