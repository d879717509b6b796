"""Central-difference gradient checking for tensor functions."""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, backward, float64_shadow, mul, no_grad, sum_all


@dataclass
class GradCheckReport:
    """Outcome of one gradient check."""

    max_rel_error: float
    tol: float
    passed: bool
    per_input: List[float] = field(default_factory=list)
    checked: int = 0


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare backward() against central differences in 64-bit precision.

    Args:
        f: deterministic function of ``inputs`` (dropout disabled)
        inputs: leaf tensors with ``requires_grad`` set
        h: finite-difference step
        tol: pass threshold on the maximum relative error
        samples: check at most this many coordinates per input (seeded)
        seed: seeds the output projection and coordinate sampling
        floor: lower bound on the relative-error denominator, so coordinates
            whose true gradient is ~0 are judged on absolute error

    Returns:
        GradCheckReport with the maximum relative error over all checked
        coordinates.

    Non-scalar outputs are reduced to ``sum(out * R)`` with a fixed random
    projection ``R`` so every output coordinate contributes.
    """
    for t in inputs:
        if not t.requires_grad:
            raise ConfigurationError("grad_check inputs must have requires_grad set")

    rng = np.random.default_rng(seed)
    per_input: List[float] = []
    checked = 0

    with float64_shadow(inputs):
        with no_grad():
            shape = f(*inputs).shape
        projection = rng.standard_normal(shape) if shape else np.float64(1.0)

        def objective() -> Tensor:
            return sum_all(mul(f(*inputs), projection))

        for t in inputs:
            t.zero_grad()
        backward(objective())
        analytic = [t.grad.copy().reshape(-1) for t in inputs]

        for t, grads in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if samples is not None and samples < flat.size:
                coords = rng.choice(flat.size, size=samples, replace=False)
            else:
                coords = np.arange(flat.size)
            worst = 0.0
            with no_grad():
                for idx in coords:
                    original = flat[idx]
                    flat[idx] = original + h
                    plus = objective().item()
                    flat[idx] = original - h
                    minus = objective().item()
                    flat[idx] = original
                    numeric = (plus - minus) / (2 * h)
                    worst = max(worst, _relative_error(float(grads[idx]), numeric, floor))
            per_input.append(worst)
            checked += len(coords)

        for t in inputs:
            t.zero_grad()

    max_rel = max(per_input) if per_input else 0.0
    return GradCheckReport(
        max_rel_error=max_rel,
        tol=tol,
        passed=bool(max_rel < tol),
        per_input=per_input,
        checked=checked,
    )
