"""Independent reference computations used to check the solver.

Nothing here touches co-states: the area-under-curve objective is obtained
by plain unrolled training and its gradient by central differences.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

from ocds.errors import ConfigError, NumericalError
from ocds.model import Dataset, DownstreamLoss, Model
from ocds.optim import AdamState, adam_update


@dataclass(frozen=True)
class AucValue:
    value: float
    config_hash: str

    def __float__(self):
        return self.value


def _config_hash(gamma, theta0, T, lr, optimizer) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(gamma, dtype="<f8").tobytes())
    h.update(np.asarray(theta0, dtype="<f8").tobytes())
    h.update(f"{T}|{lr!r}|{optimizer}".encode())
    return h.hexdigest()[:16]


def auc_objective(
    model: Model,
    data: Dataset,
    gamma,
    theta0,
    J: DownstreamLoss,
    T: int,
    lr: float,
    adam: AdamState | None = None,
) -> AucValue:
    """``sum_{t=1}^T J(theta_t)`` after full-batch training with weights ``gamma``.

    Pass a fresh :class:`AdamState` to unroll Adam instead of GD.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    state = adam
    curve = []
    for t in range(T):
        g = model.weighted_grad(data, gamma, theta)
        if state is None:
            theta = theta - lr * g
        else:
            theta, state, _, _ = adam_update(theta, g, state)
        j = J.value(model, theta)
        if not np.isfinite(j):
            raise NumericalError("training diverged while evaluating the AUC objective", step=t + 1, stage="oracle")
        curve.append(j)
    return AucValue(math.fsum(curve), _config_hash(gamma, theta0, T, lr, "gd" if adam is None else "adam"))


def fd_gamma_gradient(
    model: Model,
    data: Dataset,
    gamma,
    theta0,
    J: DownstreamLoss,
    T: int,
    lr: float,
    h: float = 1e-5,
    adam: AdamState | None = None,
) -> np.ndarray:
    """Central-difference gradient of the AUC objective in ``gamma``.

    Perturbations are not projected back onto the simplex.
    """
    if not h > 0:
        raise ConfigError("step h must be > 0")
    gamma = np.asarray(gamma, dtype=np.float64)
    out = np.empty(gamma.size)
    for n in range(gamma.size):
        e = np.zeros_like(gamma)
        e[n] = h
        up = auc_objective(model, data, gamma + e, theta0, J, T, lr, adam).value
        dn = auc_objective(model, data, gamma - e, theta0, J, T, lr, adam).value
        out[n] = (up - dn) / (2.0 * h)
    return out


def brute_simplex_projection(v) -> np.ndarray:
    """Projection onto the simplex by enumerating every support set (dim <= 4)."""
    v = np.asarray(v, dtype=np.float64)
    d = v.size
    if d == 0 or d > 4:
        raise ConfigError("brute-force projection supports 1 <= dim <= 4")
    best, best_dist = None, np.inf
    for k in range(1, d + 1):
        for support in itertools.combinations(range(d), k):
            idx = list(support)
            # KKT on the support: g_i = v_i - tau, sum g_i = 1.
            tau = (v[idx].sum() - 1.0) / k
            g = np.zeros(d)
            g[idx] = v[idx] - tau
            if np.any(g[idx] < 0):
                continue
            dist = np.sum((g - v) ** 2)
            if dist < best_dist:
                best, best_dist = g, dist
    return best
