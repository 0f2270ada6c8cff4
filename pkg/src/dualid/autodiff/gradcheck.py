"""Central finite-difference oracle for autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    n_checked: int
    worst_index: tuple[int, ...] | None = None
    nonfinite: bool = False


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(not p.nonfinite and p.max_rel_error < self.tolerance for p in self.params)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.nonfinite or p.max_rel_error >= self.tolerance]

    def __str__(self) -> str:
        lines = [f"gradcheck tol={self.tolerance:g} max_rel={self.max_rel_error:.3e} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for p in self.params:
            flag = " NONFINITE" if p.nonfinite else ""
            lines.append(f"  {p.name}: {p.max_rel_error:.3e} over {p.n_checked} entries "
                         f"(worst {p.worst_index}){flag}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    model_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``model_fn`` rebuilds the scalar loss from the current parameter values
    and must be deterministic.  Parameters should be float64.  When
    ``max_entries`` is set, that many randomly chosen entries per parameter
    are checked instead of all of them.  Relative errors are taken against
    ``max(|analytic|, |numeric|, floor)`` so exact zeros do not blow up.
    """
    report = GradCheckReport(tolerance=tolerance)
    if not params:
        return report
    for p in params:
        p.grad = None
    loss = model_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    for i, p in enumerate(params):
        name = (names[i] if names is not None else getattr(p, "name", "")) or f"param{i}"
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            gen = rng if rng is not None else np.random.default_rng(i)
            idxs = np.sort(gen.choice(flat.size, size=max_entries, replace=False))
        else:
            idxs = np.arange(flat.size)
        worst, worst_idx, nonfinite = 0.0, None, False
        for j in idxs:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                fp = float(model_fn().data)
                flat[j] = orig - h
                fm = float(model_fn().data)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[i].reshape(-1)[j])
            loc = tuple(int(k) for k in np.unravel_index(j, p.shape))
            if not (np.isfinite(num) and np.isfinite(ana)):
                nonfinite = True
                worst_idx = loc
                continue
            err = relative_error(ana, num, floor)
            if err >= worst:
                worst, worst_idx = err, loc
        report.params.append(ParamCheck(name, worst, len(idxs), worst_idx, nonfinite))
    return report
