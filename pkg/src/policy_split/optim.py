"""AdamW with global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamMoments":
        return cls(np.zeros(n), np.zeros(n), 0)


def clip_global_norm(grad: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def optimizer_update(moments: AdamMoments, params: np.ndarray, gradient: np.ndarray, lr: float,
                     *, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2,
                     clip_norm: float | None = 1.0) -> tuple[AdamMoments, np.ndarray]:
    """One AdamW descent step on `gradient` (the gradient of a loss to minimize).

    Returns fresh moment and parameter arrays; inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.shape or moments.m.shape != params.shape:
        raise ValidationError(
            f"shape mismatch: params {params.shape}, gradient {gradient.shape}, moments {moments.m.shape}")
    if not np.all(np.isfinite(gradient)):
        bad = int(np.flatnonzero(~np.isfinite(gradient))[0])
        raise NumericError(f"non-finite gradient at index {bad}", {"index": bad})
    g, _ = clip_global_norm(gradient, clip_norm)
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * g
    v = beta2 * moments.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_params = params - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params)
    return AdamMoments(m, v, t), new_params
