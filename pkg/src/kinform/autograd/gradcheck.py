"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor

# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6
# at most this fraction of probed coordinates may sit on a ReLU kink
MAX_KINK_FRACTION = 0.05


class GradCheckError(RuntimeError):
    """The function under test is not deterministic, so no check is possible."""


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    errors: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    kinks: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list:
        bad = [n for n, e in self.errors.items() if not e < self.tol]
        bad += [n for n in self.errors if n not in bad and self.kinks[n] > MAX_KINK_FRACTION * max(self.checked[n], 1)]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    def format_table(self) -> str:
        width = max([len(n) for n in self.errors] + [9])
        lines = [f"{'parameter':<{width}}  {'max rel err':>12}  {'checked':>7}  {'kinks':>5}  status"]
        for name, err in self.errors.items():
            status = "FAIL" if name in self.failures else "ok"
            lines.append(f"{name:<{width}}  {err:>12.3e}  {self.checked[name]:>7d}  {self.kinks[name]:>5d}  {status}")
        return "\n".join(lines)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), GRAD_FLOOR)


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and reads the tensors in ``params``, which are
    perturbed in place. With ``max_coords`` only that many randomly chosen
    entries per parameter are probed. A coordinate whose central difference
    straddles a ReLU kink (one one-sided difference matches the tape, the
    other does not) is counted in ``kinks`` instead of ``errors``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    named = dict(params) if isinstance(params, Mapping) else {f"p{i}": p for i, p in enumerate(params)}

    f0 = f().item()
    if f().item() != f0:
        raise GradCheckError("function returned different values for identical inputs")

    with Tape() as tape:
        loss = f()
    tape.backward(loss, leaves=named.values())
    analytic = {name: p.grad.copy() for name, p in named.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, eps=eps)
    for name, p in named.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst, kinks = 0.0, 0
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            central = (fp - fm) / (2 * eps)
            err = _rel(ga[i], central)
            if err >= tol:
                one_sided = min(_rel(ga[i], (fp - f0) / eps), _rel(ga[i], (f0 - fm) / eps))
                if one_sided < tol * 10 and _rel((fp - f0) / eps, (f0 - fm) / eps) > tol:
                    kinks += 1
                    continue
            worst = max(worst, err)
        report.errors[name] = worst
        report.checked[name] = int(coords.size)
        report.kinks[name] = kinks
    return report
