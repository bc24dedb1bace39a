"""Training-step primitives and the trajectory-recording training loop."""

from __future__ import annotations

import shutil
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ocds.errors import ConfigError, NumericalError
from ocds.model import Dataset, Model

PARAM_MAGIC = b"OCDSPAR1"


# -- checkpoint files --------------------------------------------------------

def write_checkpoint(path, theta: np.ndarray) -> None:
    theta = np.asarray(theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<Q", theta.size))
        fh.write(theta.tobytes())


def read_checkpoint(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != PARAM_MAGIC:
        raise ConfigError(f"{path}: bad magic, expected {PARAM_MAGIC!r}")
    (n,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) != 16 + 8 * n:
        raise ConfigError(f"{path}: expected {n} parameters, file size {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", count=n, offset=16).astype(np.float64)


def checkpoint_name(t: int) -> str:
    return f"ckpt_{t:06d}.bin"


class CheckpointStore:
    """Append-only sequence of parameter vectors, in memory or spilled to disk."""

    def __init__(self, spill_dir=None):
        self._mem: list[np.ndarray] = []
        self._n = 0
        self._owned = False
        self.spill_dir = None
        if spill_dir is not None:
            self.spill_dir = Path(spill_dir)
            self.spill_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def temporary(cls) -> "CheckpointStore":
        store = cls(tempfile.mkdtemp(prefix="ocds-ckpt-"))
        store._owned = True
        return store

    def append(self, theta: np.ndarray) -> None:
        if self.spill_dir is None:
            self._mem.append(np.array(theta, dtype=np.float64))
        else:
            write_checkpoint(self.spill_dir / checkpoint_name(self._n), theta)
        self._n += 1

    def __len__(self):
        return self._n

    def __getitem__(self, t: int) -> np.ndarray:
        if t < 0:
            t += self._n
        if not 0 <= t < self._n:
            raise IndexError(t)
        if self.spill_dir is None:
            return self._mem[t]
        return read_checkpoint(self.spill_dir / checkpoint_name(t))

    def __iter__(self):
        for t in range(self._n):
            yield self[t]

    def cleanup(self):
        if self._owned and self.spill_dir is not None:
            shutil.rmtree(self.spill_dir, ignore_errors=True)

    def __del__(self):
        self.cleanup()


# -- configs -----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "gd"
    lr: float = 0.008
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")


@dataclass(frozen=True)
class BatchConfig:
    """``batch_size=None`` (or >= |D|) means full-batch GD."""

    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def zeros(cls, n: int, **hp) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hp)

    @classmethod
    def from_config(cls, n: int, cfg: OptimizerConfig) -> "AdamState":
        return cls.zeros(n, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, lr=cfg.lr)


@dataclass
class StepMeta:
    step: int
    batch: np.ndarray | None
    seed: int | None


@dataclass
class Trajectory:
    """Checkpoints ``theta_0..theta_T`` and the per-step batch schedule.

    For Adam runs ``moments[t]`` holds the bias-corrected ``(m_hat, v_hat)``
    produced by step ``t`` (i.e. the ones used to move from ``theta_t``).
    """

    checkpoints: CheckpointStore
    step_meta: list[StepMeta]
    optimizer: OptimizerConfig
    n_instances: int
    moments: list[tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def T(self) -> int:
        return len(self.checkpoints) - 1

    def __len__(self):
        return len(self.checkpoints)

    def weights(self, gamma: np.ndarray, t: int) -> np.ndarray:
        return step_weights(gamma, self.step_meta[t].batch)


def step_weights(gamma: np.ndarray, batch) -> np.ndarray:
    """Weights applied at one step: ``gamma`` restricted to the batch, scaled by |D|/|batch|."""
    if batch is None:
        return gamma
    w = np.zeros_like(gamma)
    w[batch] = gamma[batch] * (gamma.size / len(batch))
    return w


def batch_schedule(n: int, T: int, batch: BatchConfig) -> list[StepMeta]:
    if batch.batch_size is None or batch.batch_size >= n:
        return [StepMeta(t, None, None) for t in range(T)]
    rng = np.random.default_rng(batch.seed)
    bs = batch.batch_size
    out: list[StepMeta] = []
    order = np.empty(0, dtype=np.int64)
    pos = 0
    while len(out) < T:
        if pos >= order.size:
            order = rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        out.append(StepMeta(len(out), idx, batch.seed))
    return out


# -- steps -------------------------------------------------------------------

def _checked_grad(model: Model, data: Dataset, w: np.ndarray, theta: np.ndarray, step=None) -> np.ndarray:
    g = model.weighted_grad(data, w, theta)
    if not np.all(np.isfinite(g)):
        bad = None
        for n in np.flatnonzero(w):
            gn = model.grads(data.subset([n]), theta)[0]
            if not np.all(np.isfinite(gn)):
                bad = int(n)
                break
        raise NumericalError("non-finite gradient", step=step, instance=bad, stage="train")
    return g


def gd_step(model: Model, data: Dataset, gamma, theta, lr: float, step=None) -> np.ndarray:
    """``theta - lr * grad L(theta, gamma)``."""
    if not lr > 0:
        raise ConfigError("learning rate must be > 0")
    gamma = np.asarray(gamma, dtype=np.float64)
    return theta - lr * _checked_grad(model, data, gamma, theta, step)


def adam_update(theta: np.ndarray, g: np.ndarray, state: AdamState):
    """One Adam update from gradient ``g``.

    Returns ``(theta_next, state_next, m_hat, v_hat)``.
    """
    b1, b2 = state.beta1, state.beta2
    k = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1 ** k)
    v_hat = v / (1.0 - b2 ** k)
    theta_next = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_next, replace(state, m=m, v=v, t=k), m_hat, v_hat


def adam_step(model: Model, data: Dataset, gamma, theta, state: AdamState, step=None):
    gamma = np.asarray(gamma, dtype=np.float64)
    g = _checked_grad(model, data, gamma, theta, step)
    theta_next, state_next, _, _ = adam_update(theta, g, state)
    return theta_next, state_next


def train(
    model: Model,
    data: Dataset,
    gamma,
    theta0,
    T: int,
    optimizer: OptimizerConfig | None = None,
    batch: BatchConfig | None = None,
    *,
    spill_dir=None,
    memory_budget: int | None = None,
) -> Trajectory:
    """Run ``T`` optimizer steps from ``theta0`` and record every checkpoint.

    Checkpoints go to disk when ``spill_dir`` is given or when keeping
    ``T + 1`` vectors in memory would exceed ``memory_budget`` bytes.
    """
    if T < 0:
        raise ConfigError("T must be >= 0")
    optimizer = optimizer or OptimizerConfig()
    batch = batch or BatchConfig()
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (len(data),):
        raise ConfigError("gamma length does not match dataset")
    theta = model.check_params(theta0).copy()

    if spill_dir is not None:
        store = CheckpointStore(spill_dir)
    elif memory_budget is not None and (T + 1) * theta.size * 8 > memory_budget:
        store = CheckpointStore.temporary()
    else:
        store = CheckpointStore()

    meta = batch_schedule(len(data), T, batch)
    moments = [] if optimizer.kind == "adam" else None
    state = AdamState.from_config(theta.size, optimizer) if optimizer.kind == "adam" else None

    store.append(theta)
    for t in range(T):
        w = step_weights(gamma, meta[t].batch)
        g = _checked_grad(model, data, w, theta, step=t)
        if state is None:
            theta = theta - optimizer.lr * g
        else:
            theta, state, m_hat, v_hat = adam_update(theta, g, state)
            moments.append((m_hat, v_hat))
        if not np.all(np.isfinite(theta)):
            raise NumericalError("parameters became non-finite", step=t + 1, stage="train")
        store.append(theta)
    return Trajectory(store, meta, optimizer, len(data), moments)
