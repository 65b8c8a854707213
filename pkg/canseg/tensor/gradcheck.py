"""Central-difference gradient checking at F64."""

from typing import Callable, List, Optional, Sequence

import numpy as np

from canseg.core.errors import ConfigError, NumericError, PrecisionError
from canseg.tensor.tensor import Precision, Tensor, no_grad


def relative_error(analytic: float, numeric: float, atol: float = 1e-9) -> float:
    """|a - n| / max(1e-8, |a| + |n|), with `atol` as a tolerance floor.

    Absolute discrepancies at or below `atol` count as zero: near-zero gradients
    (sum of a softmax, say) otherwise turn central-difference roundoff into a
    large ratio. Pass atol=0 for the bare formula.
    """
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(1e-8, abs(analytic) + abs(numeric))


def param_errors(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    atol: float = 1e-9,
) -> List[float]:
    """Max relative error per parameter tensor, comparing backward() against central differences.

    `f` recomputes the scalar loss from the current parameter values. With
    `max_entries` set, each parameter is probed at that many random entries.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ConfigError(f"finite-difference step {step} outside [1e-6, 1e-4]", path="step")
    for k, p in enumerate(params):
        if p.precision is not Precision.F64:
            raise PrecisionError(f"grad_check needs F64 parameters; parameter {k} is {p.precision.value}")
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    errors = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            entries = range(flat.size)
        worst = 0.0
        for idx in entries:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + step
                f_plus = f().item()
                flat[idx] = original - step
                f_minus = f().item()
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2 * step)
            if not np.isfinite(numeric):
                raise NumericError(f"non-finite finite-difference value for parameter {k}", param_index=k)
            worst = max(worst, relative_error(float(analytic[k].reshape(-1)[idx]), numeric, atol))
        errors.append(worst)
    return errors


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    errors = param_errors(f, params, step=step, max_entries=max_entries, rng=rng)
    return max(errors) if errors else 0.0
