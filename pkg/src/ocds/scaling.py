"""Scaling-law fitting, loss-curve AUC and FLOPs accounting.

The loss surface is ``L(N, D) = E + A / N**alpha + B / D**beta``.  Fitting
follows a two-stage scheme: per-model-size data curves are fitted first,
their constants seed a Huber fit of the log-sum-exp form of the surface.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit, minimize

from ocds.errors import ConfigError


@dataclass(frozen=True)
class LossPoint:
    N: float
    D: float
    L: float

    def __post_init__(self):
        if not (self.N > 0 and self.D > 0 and self.L > 0):
            raise ConfigError(f"loss point needs N, D, L > 0: {self}")


@dataclass
class ScalingFit:
    A: float
    B: float
    E: float
    alpha: float
    beta: float
    objective: float = float("nan")
    init_objective: float = float("nan")
    steps: int = 0
    converged: bool = True
    init: dict = field(default_factory=dict)

    def as_log_params(self) -> np.ndarray:
        return np.array([math.log(self.A), math.log(self.B), math.log(self.E), self.alpha, self.beta])

    def to_dict(self) -> dict:
        return asdict(self)


def predict_loss(fit: ScalingFit, N, D):
    N = np.asarray(N, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    out = fit.E + fit.A / N ** fit.alpha + fit.B / D ** fit.beta
    return float(out) if out.ndim == 0 else out


# -- Huber / log-sum-exp objective ------------------------------------------

def huber(r, delta: float):
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _arrays(points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts = list(points)
    if not pts:
        raise ConfigError("no loss points")
    N = np.array([p.N for p in pts], dtype=np.float64)
    D = np.array([p.D for p in pts], dtype=np.float64)
    L = np.array([p.L for p in pts], dtype=np.float64)
    if np.any(L <= 0) or np.any(N <= 0) or np.any(D <= 0):
        raise ConfigError("loss points must have positive N, D and L")
    return N, D, L


def _huber_lse(params, logN, logD, logL, delta):
    a, b, e, alpha, beta = params
    terms = np.stack([a - alpha * logN, b - beta * logD, np.full_like(logN, e)])
    top = terms.max(axis=0)
    ex = np.exp(terms - top)
    s = ex.sum(axis=0)
    lse = top + np.log(s)
    r = lse - logL
    val = float(np.sum(huber(r, delta)))
    dr = np.clip(r, -delta, delta)
    wts = ex / s
    grad = np.array([
        np.sum(dr * wts[0]),
        np.sum(dr * wts[1]),
        np.sum(dr * wts[2]),
        -np.sum(dr * wts[0] * logN),
        -np.sum(dr * wts[1] * logD),
    ])
    return val, grad


def huber_lse_objective(params, points, delta: float = 1e-3) -> float:
    """Sum of Huber penalties of ``LSE(a - alpha log N, b - beta log D, e) - log L``.

    ``params`` is ``(a, b, e, alpha, beta)`` with ``A = exp(a)`` etc.
    """
    if not delta > 0:
        raise ConfigError("delta must be > 0")
    N, D, L = _arrays(points)
    return _huber_lse(np.asarray(params, dtype=np.float64), np.log(N), np.log(D), np.log(L), delta)[0]


# -- offset power-law fits ---------------------------------------------------

@dataclass
class OffsetPowerFit:
    """``y = offset + scale / x**exponent``."""

    offset: float
    scale: float
    exponent: float
    residual_norm: float
    converged: bool = True
    degenerate: bool = False

    def __call__(self, x):
        return self.offset + self.scale * np.asarray(x, dtype=np.float64) ** (-self.exponent)


def _fit_offset_power(x, y, exponents, bounds_nonneg_offset=False) -> OffsetPowerFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 4 or np.unique(x).size < 4:
        raise ConfigError("need at least 4 points with distinct x")
    logx = np.log(x)
    yscale = max(float(np.max(np.abs(y))), 1e-300)

    def model(lx, off, logscale, expo):
        return off + np.exp(logscale - expo * lx)

    best = None
    for start, expo0 in enumerate(exponents):
        # For a fixed exponent the model is linear in (offset, scale).
        basis = np.exp(-expo0 * logx)
        M = np.stack([np.ones_like(x), basis], axis=1)
        off0, sc0 = np.linalg.lstsq(M, y, rcond=None)[0]
        if bounds_nonneg_offset and off0 < 0:
            off0 = 0.0
        if not sc0 > 0:
            cand = OffsetPowerFit(float(np.mean(y)), 0.0, float(expo0), float(np.linalg.norm(y - np.mean(y))), True, True)
        else:
            p0 = [off0, math.log(sc0), expo0]
            lo = [0.0 if bounds_nonneg_offset else -np.inf, -np.inf, 1e-8]
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", OptimizeWarning)
                    popt, _ = curve_fit(model, logx, y, p0=p0, bounds=(lo, [np.inf, np.inf, 50.0]),
                                        method="trf", x_scale=[yscale, 1.0, 1.0],
                                        ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=20000)
                ok = True
            except RuntimeError:
                popt, ok = np.array(p0), False
            res = float(np.linalg.norm(model(logx, *popt) - y))
            cand = OffsetPowerFit(float(popt[0]), float(math.exp(popt[1])), float(popt[2]), res, ok, False)
        if best is None or cand.residual_norm < best.residual_norm - 1e-15 * yscale:
            best = cand
    if best.scale * float(np.max(np.exp(-best.exponent * logx))) < 1e-9 * yscale:
        best.degenerate = True
    return best


def _default_starts(n=8):
    return np.logspace(-1.0, 0.0, n)


def fit_data_scaling(D, L, starts=None) -> OffsetPowerFit:
    """Fit ``L(D) = E' + B0 / D**beta0`` at one model size (multi-start)."""
    return _fit_offset_power(D, L, _default_starts() if starts is None else starts)


def fit_model_scaling(N, E_prime, starts=None) -> OffsetPowerFit:
    """Fit ``E'(N) = E0 + A0 / N**alpha0`` across model sizes."""
    N = np.asarray(N, dtype=np.float64)
    if N.size < 3:
        raise ConfigError("need at least 3 model sizes")
    if N.size == 3:
        # Exactly determined; fall back to a grid over the exponent.
        return _fit_offset_power_exact3(N, np.asarray(E_prime, dtype=np.float64))
    return _fit_offset_power(N, E_prime, _default_starts() if starts is None else starts)


def _fit_offset_power_exact3(x, y) -> OffsetPowerFit:
    best = None
    for expo in np.linspace(0.01, 2.0, 2000):
        b = x ** (-expo)
        M = np.stack([np.ones_like(x), b], axis=1)
        coef, *_ = np.linalg.lstsq(M, y, rcond=None)
        res = float(np.linalg.norm(M @ coef - y))
        if best is None or res < best.residual_norm:
            best = OffsetPowerFit(float(coef[0]), float(coef[1]), float(expo), res)
    return best


def fit_scaling_law(
    points: Sequence[LossPoint],
    delta: float = 1e-3,
    lr: float = 0.05,
    max_steps: int = 10_000,
    tol: float = 1e-10,
    optimizer: str = "lbfgs",
) -> ScalingFit:
    """Two-stage fit of the loss surface.

    ``optimizer="lbfgs"`` uses a line-searched quasi-Newton method; ``"adam"``
    runs an adaptive-gradient loop with step ``lr``.  Both stop when the
    objective changes by less than ``tol`` or after ``max_steps``.
    """
    # Canonical order: the result must not depend on how points were listed.
    points = sorted(points, key=lambda p: (p.N, p.D, p.L))
    N, D, L = _arrays(points)
    sizes = np.unique(N)
    if sizes.size < 2:
        raise ConfigError("need at least 2 distinct model sizes")

    per_size = []
    for n in sizes:
        mask = N == n
        if np.unique(D[mask]).size < 4:
            raise ConfigError(f"model size {n:g} has fewer than 4 distinct D values")
        per_size.append(fit_data_scaling(D[mask], L[mask]))

    e_prime = np.array([f.offset for f in per_size])
    if sizes.size >= 3:
        ms = fit_model_scaling(sizes, e_prime)
        E0, A0, alpha0 = ms.offset, ms.scale, ms.exponent
    else:
        # Two sizes cannot pin three constants; assume the smallest E' is mostly irreducible.
        alpha0 = 0.3
        A0 = (e_prime[0] - e_prime[1]) / (sizes[0] ** -alpha0 - sizes[1] ** -alpha0)
        E0 = e_prime[0] - A0 * sizes[0] ** -alpha0
    B0 = float(np.mean([f.scale for f in per_size]))
    beta0 = float(np.mean([f.exponent for f in per_size]))
    A0 = max(A0, 1e-12)
    E0 = max(E0, 1e-12)
    B0 = max(B0, 1e-12)
    x0 = np.array([math.log(A0), math.log(B0), math.log(E0), alpha0, beta0])

    logN, logD, logL = np.log(N), np.log(D), np.log(L)
    fun = lambda p: _huber_lse(p, logN, logD, logL, delta)
    f0 = fun(x0)[0]

    if optimizer == "lbfgs":
        res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_steps, "ftol": tol, "gtol": 1e-14, "maxcor": 20})
        x, fx, steps, conv = res.x, float(res.fun), int(res.nit), bool(res.success)
    elif optimizer == "adam":
        x, fx, steps, conv = _adam_minimize(fun, x0, lr, max_steps, tol)
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    if not fx <= f0:
        x, fx = x0, f0
    a, b, e, alpha, beta = x
    init = {"a": x0[0], "b": x0[1], "e": x0[2], "alpha": x0[3], "beta": x0[4]}
    return ScalingFit(math.exp(a), math.exp(b), math.exp(e), float(alpha), float(beta),
                      fx, f0, steps, conv, {k: float(v) for k, v in init.items()})


def _adam_minimize(fun, x0, lr, max_steps, tol):
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_f = x.copy(), fun(x)[0]
    prev = best_f
    for k in range(1, max_steps + 1):
        f, g = fun(x)
        if f < best_f:
            best_x, best_f = x.copy(), f
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - lr * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-12)
        if abs(prev - f) < tol and k > 1:
            return best_x, best_f, k, True
        prev = f
    return best_x, best_f, max_steps, False


# -- loss-curve area and reducible-loss power law ---------------------------

def compute_auc(losses) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ConfigError("compute_auc needs at least one loss value")
    return math.fsum(losses)


@dataclass
class PowerLawFit:
    """``L(t) = C / t**c + irreducible`` for ``t > t0``."""

    C: float
    c: float
    irreducible: float
    residual_norm: float
    flagged: bool = False

    def __call__(self, t):
        return self.C * np.asarray(t, dtype=np.float64) ** (-self.c) + self.irreducible


def fit_reducible_power_law(losses, t0: int, steps=None) -> PowerLawFit:
    """Fit the post-warmup curve; ``losses[i]`` is taken at step ``t0 + 1 + i`` unless ``steps`` is given."""
    y = np.asarray(losses, dtype=np.float64)
    t = np.arange(t0 + 1, t0 + 1 + y.size, dtype=np.float64) if steps is None else np.asarray(steps, dtype=np.float64)
    if y.size < 4 or t.shape != y.shape:
        raise ConfigError("need at least 4 losses after warmup")
    if np.any(t <= 0):
        raise ConfigError("steps must be positive")
    fit = _fit_offset_power(t, y, np.logspace(-2, 1, 8), bounds_nonneg_offset=True)
    flagged = fit.degenerate or not fit.scale > 0 or not fit.converged
    if np.all(np.diff(y) > 0):
        flagged = True
    return PowerLawFit(fit.scale, fit.exponent, fit.offset, fit.residual_norm, flagged)


def power_law_auc(C: float, c: float, t0: float, T: float) -> float:
    """Closed-form integral of ``C / t**c`` over ``[t0, T]``."""
    if c == 1.0:
        return C * math.log(T / t0)
    return C / (1.0 - c) * (T ** (1.0 - c) - t0 ** (1.0 - c))


# -- FLOPs ---------------------------------------------------------------------

def estimate_flops(N: float, D: float, N_prx: float, D_prx: float, N_score: float, M: int) -> dict:
    """Per-stage FLOPs with forward = 2ND and backward = 4ND.

    One solver pass over the proxy data costs a forward inner loop (6), a
    reverse inner loop (12) and a score update (6), all in units of
    ``N_prx * D_prx``.
    """
    for name, val in (("N", N), ("D", D), ("N_prx", N_prx), ("D_prx", D_prx), ("N_score", N_score)):
        if not val > 0:
            raise ConfigError(f"{name} must be > 0")
    if M < 0:
        raise ConfigError("M must be >= 0")
    proxy_pretrain = 6.0 * N_prx * D
    forward = 6.0 * N_prx * D_prx
    reverse = 12.0 * N_prx * D_prx
    update = 6.0 * N_prx * D_prx
    return {
        "solver": proxy_pretrain + M * (forward + reverse + update),
        "solver_breakdown": {
            "proxy_pretrain": proxy_pretrain,
            "forward_inner": M * forward,
            "reverse_inner": M * reverse,
            "gamma_update": M * update,
        },
        "scorer": 6.0 * N_score * D_prx + 2.0 * N_score * D,
        "selection": 0.0,
        "pretraining": 6.0 * N * D,
    }


# -- I/O ---------------------------------------------------------------------

def read_points_csv(path) -> list[LossPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["N", "D", "L"]:
            raise ConfigError(f"{path}: header must be N,D,L")
        try:
            return [LossPoint(float(r["N"]), float(r["D"]), float(r["L"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def points_digest(points) -> str:
    h = hashlib.sha256()
    for p in points:
        h.update(f"{p.N!r},{p.D!r},{p.L!r}\n".encode())
    return h.hexdigest()


def write_fit(path, fit: ScalingFit, points) -> None:
    doc = {"constants": {"A": fit.A, "B": fit.B, "E": fit.E, "alpha": fit.alpha, "beta": fit.beta},
           "diagnostics": {"objective": fit.objective, "init_objective": fit.init_objective,
                           "steps": fit.steps, "converged": fit.converged, "init": fit.init},
           "input_digest": points_digest(points)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_fit(path) -> ScalingFit:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    c = doc["constants"]
    return ScalingFit(c["A"], c["B"], c["E"], c["alpha"], c["beta"])
