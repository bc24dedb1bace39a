"""Optimal-control solver for data quality scores.

The solver alternates a forward training loop, a reverse co-state
recursion and a projected "soft" update of the scores:

    lambda_T = grad J(theta_T)
    lambda_t = lambda_{t+1} + grad J(theta_t) - lr * H_t lambda_{t+1}
    s_n      = sum_{t=0}^{T-1} lambda_{t+1} . grad l(x_n, theta_t)
    gamma   <- Proj_simplex(gamma + alpha * s)

``-lr * s`` is the exact gradient of ``A(gamma) = sum_{t=1}^T J(theta_t)``
for full-batch GD, so one outer step is projected gradient descent on
``A`` with step ``alpha / lr``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ocds.errors import ConfigError, NumericalError
from ocds.model import Dataset, DownstreamLoss, Model, _hvp
from ocds.optim import BatchConfig, OptimizerConfig, Trajectory, step_weights, train

COSTATE_LIMIT = 1e12


@dataclass(frozen=True)
class SolverConfig:
    lr: float = 0.008
    outer_lr: float = 1.0
    steps: int = 100
    outer_epochs: int = 1
    n_checkpoints: int = 5
    batch_size: int | None = 256
    seed: int = 0
    hvp: str = "exact"
    stride: int = 1

    def __post_init__(self):
        if not self.lr > 0 or not self.outer_lr > 0:
            raise ConfigError("lr and outer_lr must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.outer_epochs < 0:
            raise ConfigError("outer_epochs must be >= 0")
        if self.n_checkpoints < 1:
            raise ConfigError("n_checkpoints must be >= 1")
        if self.hvp not in ("exact", "fd"):
            raise ConfigError(f"unknown HVP path {self.hvp!r}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig("gd", self.lr)

    def batch(self) -> BatchConfig:
        return BatchConfig(self.batch_size, self.seed)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class CoStateTrajectory:
    """``lambdas[t - 1]`` is the co-state at step ``t`` for ``t = 1..T``."""

    lambdas: list[np.ndarray]

    @property
    def T(self) -> int:
        return len(self.lambdas)

    def at(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise IndexError(t)
        return self.lambdas[t - 1]


# -- simplex projection ------------------------------------------------------

def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{g >= 0, sum g = 1}`` by sort-and-threshold."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ConfigError("projection needs a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericalError("cannot project a non-finite vector", stage="project_simplex")
    # Sums run over sorted values so the result does not depend on input order.
    if np.all(v >= 0) and abs(np.sort(v).sum() - 1.0) <= 4 * v.size * np.finfo(float).eps:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    tau = css[rho] / (rho + 1)
    out = np.maximum(v - tau, 0.0)
    return out / np.sort(out).sum()


# -- GD solver ---------------------------------------------------------------

def reverse_inner(
    model: Model,
    data: Dataset,
    gamma,
    trajectory: Trajectory,
    J: DownstreamLoss,
    lr: float,
    hvp: str = "exact",
) -> CoStateTrajectory:
    """Co-states ``lambda_1..lambda_T`` along a recorded GD trajectory.

    The Hessian at step ``t`` is that of the loss actually used at step ``t``
    (the rescaled mini-batch loss when the trajectory was trained in batches).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    T = trajectory.T
    if T < 1:
        raise ConfigError("trajectory must contain at least one step")
    lam = J.grad(model, trajectory.checkpoints[T])
    lambdas = [lam]
    for t in range(T - 1, 0, -1):
        theta_t = trajectory.checkpoints[t]
        w = trajectory.weights(gamma, t)
        lam = lam + J.grad(model, theta_t) - lr * _hvp(model, data, w, theta_t, lam, hvp)
        norm = np.linalg.norm(lam)
        if not np.isfinite(norm) or norm > COSTATE_LIMIT:
            raise NumericalError(f"co-state norm {norm:.3e} exceeds {COSTATE_LIMIT:.0e}", step=t, stage="reverse_inner")
        lambdas.append(lam)
    lambdas.reverse()
    return CoStateTrajectory(lambdas)


def gamma_gradient(
    model: Model,
    data: Dataset,
    trajectory: Trajectory,
    costates: CoStateTrajectory,
    stride: int = 1,
) -> np.ndarray:
    """``s_n = sum_t lambda_{t+1} . grad l(x_n, theta_t)`` over every instance.

    With ``stride > 1`` only every ``stride``-th step is evaluated and each
    term is scaled by ``stride``.
    """
    T = trajectory.T
    if costates.T != T:
        raise ConfigError(f"co-states cover {costates.T} steps, trajectory {T}")
    s = np.zeros(len(data))
    for t in range(0, T, stride):
        s += stride * model.grad_dots(data, trajectory.checkpoints[t], costates.at(t + 1))
    return s


def _outer_step(model, data, J, theta0, gamma, config: SolverConfig) -> np.ndarray:
    traj = train(model, data, gamma, theta0, config.steps, config.optimizer(), config.batch())
    lams = reverse_inner(model, data, gamma, traj, J, config.lr, config.hvp)
    s = gamma_gradient(model, data, traj, lams, config.stride)
    new = gamma + config.outer_lr * s
    if not np.all(np.isfinite(new)):
        raise NumericalError("score update is non-finite", stage="pmp_solve")
    return project_simplex(new)


def pmp_solve(
    model: Model,
    proxy: Dataset,
    J: DownstreamLoss,
    theta0,
    config: SolverConfig,
    gamma0=None,
) -> np.ndarray:
    """Run the outer loop for ``config.outer_epochs`` epochs from uniform scores."""
    theta0 = model.check_params(theta0)
    n = len(proxy)
    gamma = np.full(n, 1.0 / n) if gamma0 is None else np.asarray(gamma0, dtype=np.float64)
    for _ in range(config.outer_epochs):
        gamma = _outer_step(model, proxy, J, theta0, gamma, config)
    return gamma


# -- Adam solver -------------------------------------------------------------

@dataclass
class AdamCoStates:
    """Three co-state blocks per step; index ``t - 1`` holds step ``t``."""

    theta: list[np.ndarray]
    moment1: list[np.ndarray]
    moment2: list[np.ndarray]


def reverse_inner_adam(
    model: Model,
    data: Dataset,
    gamma,
    trajectory: Trajectory,
    J: DownstreamLoss,
    hvp: str = "exact",
    third_block: bool = True,
) -> AdamCoStates:
    """Adjoint recursion for Adam dynamics, treating ``v`` as gradient-independent.

    Blocks are the sensitivities of the remaining objective to ``theta_t``,
    ``m_t`` and ``v_t``.  The ``v`` block is tracked for completeness; under
    the approximation it feeds neither the other blocks nor the score
    gradient.
    """
    opt = trajectory.optimizer
    if opt.kind != "adam" or trajectory.moments is None:
        raise ConfigError("reverse_inner_adam needs an Adam trajectory")
    gamma = np.asarray(gamma, dtype=np.float64)
    lr, b1, b2, eps = opt.lr, opt.beta1, opt.beta2, opt.eps
    T = trajectory.T
    ck = trajectory.checkpoints

    l1 = J.grad(model, ck[T])
    l2 = np.zeros_like(l1)
    l3 = np.zeros_like(l1)
    out1, out2, out3 = [l1], [l2], [l3]
    for t in range(T - 1, 0, -1):
        theta_t = ck[t]
        m_hat, v_hat = trajectory.moments[t]
        sq = np.sqrt(v_hat)
        denom = sq + eps
        c1 = 1.0 - b1 ** (t + 1)
        w = trajectory.weights(gamma, t)
        h_theta = _hvp(model, data, w, theta_t, l1 / denom, hvp)
        h_m = _hvp(model, data, w, theta_t, l2, hvp)
        n1 = J.grad(model, theta_t) + l1 - (lr * (1.0 - b1) / c1) * h_theta + (1.0 - b1) * h_m
        n2 = -(lr * b1 / c1) * l1 / denom + b1 * l2
        if third_block:
            with np.errstate(divide="ignore", invalid="ignore"):
                dv = np.where(sq > 0, m_hat / (2.0 * sq * denom ** 2), 0.0)
            n3 = (lr * b2 / (1.0 - b2 ** (t + 1))) * dv * l1 + b2 * l3
        else:
            n3 = np.zeros_like(l3)
        l1, l2, l3 = n1, n2, n3
        norm = max(np.linalg.norm(l1), np.linalg.norm(l2))
        if not np.isfinite(norm) or norm > COSTATE_LIMIT:
            raise NumericalError(f"co-state norm {norm:.3e} exceeds {COSTATE_LIMIT:.0e}", step=t, stage="reverse_inner_adam")
        out1.append(l1)
        out2.append(l2)
        out3.append(l3)
    for lst in (out1, out2, out3):
        lst.reverse()
    return AdamCoStates(out1, out2, out3)


def gamma_gradient_adam(model: Model, data: Dataset, trajectory: Trajectory, costates: AdamCoStates) -> np.ndarray:
    """Descent direction ``-dA/dgamma`` under the frozen-``v`` approximation.

    Only the ``theta`` and ``m`` blocks enter; the ``v`` block is unused.
    """
    opt = trajectory.optimizer
    lr, b1, eps = opt.lr, opt.beta1, opt.eps
    s = np.zeros(len(data))
    for t in range(trajectory.T):
        theta_t = trajectory.checkpoints[t]
        _, v_hat = trajectory.moments[t]
        c1 = 1.0 - b1 ** (t + 1)
        vec = (lr * (1.0 - b1) / c1) * costates.theta[t] / (np.sqrt(v_hat) + eps) - (1.0 - b1) * costates.moment1[t]
        s += model.grad_dots(data, theta_t, vec)
    return s


def pmp_solve_adam(
    model: Model,
    proxy: Dataset,
    J: DownstreamLoss,
    theta0,
    config: SolverConfig,
    adam: AdamConfig | None = None,
    third_block: bool = True,
) -> np.ndarray:
    adam = adam or AdamConfig()
    theta0 = model.check_params(theta0)
    opt = OptimizerConfig("adam", config.lr, adam.beta1, adam.beta2, adam.eps)
    n = len(proxy)
    gamma = np.full(n, 1.0 / n)
    for _ in range(config.outer_epochs):
        traj = train(model, proxy, gamma, theta0, config.steps, opt, config.batch())
        cs = reverse_inner_adam(model, proxy, gamma, traj, J, config.hvp, third_block)
        s = gamma_gradient_adam(model, proxy, traj, cs)
        new = gamma + config.outer_lr * s
        if not np.all(np.isfinite(new)):
            raise NumericalError("score update is non-finite", stage="pmp_solve_adam")
        gamma = project_simplex(new)
    return gamma


# -- multi-checkpoint averaging ---------------------------------------------

def harvest_checkpoints(
    model: Model,
    data: Dataset,
    theta_init,
    pretrain_steps: int,
    n_checkpoints: int,
    lr: float,
    batch: BatchConfig | None = None,
) -> list[np.ndarray]:
    """Pre-train on uniform weights and keep ``n_checkpoints`` evenly spaced checkpoints.

    Checkpoints are taken every ``pretrain_steps // n_checkpoints`` steps,
    the last one at ``n_checkpoints`` times that interval.
    """
    if n_checkpoints < 1:
        raise ConfigError("n_checkpoints must be >= 1")
    interval = pretrain_steps // n_checkpoints
    if interval < 1:
        raise ConfigError("pretrain_steps must be >= n_checkpoints")
    gamma = np.full(len(data), 1.0 / len(data))
    traj = train(model, data, gamma, theta_init, interval * n_checkpoints, OptimizerConfig("gd", lr), batch)
    return [traj.checkpoints[interval * (m + 1)].copy() for m in range(n_checkpoints)]


def multi_checkpoint_scores(
    model: Model,
    proxy: Dataset,
    J: DownstreamLoss,
    checkpoints: Sequence[np.ndarray],
    config: SolverConfig,
) -> np.ndarray:
    """Mean of single-epoch solver runs started from each checkpoint."""
    if len(checkpoints) < 1:
        raise ConfigError("need at least one checkpoint")
    single = replace(config, outer_epochs=1)
    runs = [pmp_solve(model, proxy, J, ck, single) for ck in checkpoints]
    # Sort so the mean does not depend on checkpoint order.
    stacked = np.sort(np.stack(runs), axis=0)
    return stacked.sum(axis=0) / len(runs)


# -- persistence -------------------------------------------------------------

def write_scores(path, values, column: str = "gamma", ids=None) -> None:
    values = np.asarray(values, dtype=np.float64)
    ids = np.arange(values.size) if ids is None else np.asarray(ids)
    order = np.argsort(ids, kind="stable")
    lines = [f"instance_id\t{column}"]
    lines += [f"{int(ids[i])}\t{float(values[i])!r}" for i in order]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("instance_id\t"):
        raise ConfigError(f"{path}: missing 'instance_id' header")
    ids, vals = [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ConfigError(f"{path}:{ln}: expected two tab-separated columns")
        ids.append(int(parts[0]))
        vals.append(float(parts[1]))
    return np.asarray(ids, dtype=np.int64), np.asarray(vals)


def write_solver_manifest(path, config: SolverConfig, **extra) -> None:
    doc = {"solver": asdict(config), **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
