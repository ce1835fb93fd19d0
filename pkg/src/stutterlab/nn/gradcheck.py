"""Central finite-difference verification of analytic gradients.

Loss functions under check take a dict of named float64 arrays and return
(loss, grads) where grads maps the same names to arrays. They must be
deterministic at the checked point (dropout off).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..errors import GradCheckError

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray] | None]]


def grad_check(loss_fn: LossFn, point: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max over all coordinates of |analytic - central| / max(1, |central|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    loss0, grads = loss_fn(point)
    if not math.isfinite(loss0):
        raise GradCheckError(f"loss non-finite at the checked point: {loss0}")
    if grads is None:
        raise GradCheckError("loss_fn returned no analytic gradients")

    worst = 0.0
    for name, x in point.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != x.shape:
            raise GradCheckError(f"gradient shape mismatch for {name!r}")
        flat = x.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(point)[0]
            flat[i] = orig - eps
            lm = loss_fn(point)[0]
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (lp - lm) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
