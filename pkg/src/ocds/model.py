"""Differentiable models, datasets and the downstream objective.

Every model exposes per-instance losses and gradients plus weighted
aggregates over a :class:`Dataset`.  Aggregates take a weight vector ``w``
over *all* instances of the dataset; zero weights drop instances, which is
how mini-batches are expressed without copying data.

Two reference models ship with the package:

* :class:`QuadraticModel`: ``l(x, theta) = 0.5 * ||theta - x||^2``.
* :class:`BigramModel`: a softmax bigram language model whose parameters are
  a ``(V + 1) x V`` logit table (one row per previous token plus a start row).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ocds.errors import ConfigError

ROLES = ("corpus", "proxy", "downstream")


@dataclass(frozen=True, eq=False)
class Instance:
    id: int
    payload: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Ordered collection of instances with ids ``0..n-1``.

    ``origin`` maps each instance back to its id in the dataset it was drawn
    from (identity for datasets loaded from disk).
    """

    instances: list[Instance]
    role: str = "corpus"
    origin: np.ndarray | None = None

    def __post_init__(self):
        if not self.instances:
            raise ConfigError("dataset must be non-empty")
        if self.role not in ROLES:
            raise ConfigError(f"unknown dataset role {self.role!r}")
        for i, inst in enumerate(self.instances):
            if inst.id != i:
                raise ConfigError(f"instance ids must be 0..n-1 in order; got {inst.id} at {i}")
        if self.origin is None:
            self.origin = np.arange(len(self.instances), dtype=np.int64)
        else:
            self.origin = np.asarray(self.origin, dtype=np.int64)
            if self.origin.shape != (len(self.instances),):
                raise ConfigError("origin must have one entry per instance")

    @classmethod
    def from_payloads(cls, payloads: Iterable, role: str = "corpus", origin=None) -> "Dataset":
        insts = [Instance(i, np.asarray(p)) for i, p in enumerate(payloads)]
        return cls(insts, role=role, origin=origin)

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    def __iter__(self):
        return iter(self.instances)

    @property
    def payloads(self) -> list[np.ndarray]:
        return [inst.payload for inst in self.instances]

    def subset(self, idx: Sequence[int], role: str | None = None) -> "Dataset":
        """Sub-dataset re-indexed from 0, keeping the original ids in ``origin``."""
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset.from_payloads(
            [self.instances[i].payload for i in idx],
            role=role or self.role,
            origin=self.origin[idx],
        )

    def with_role(self, role: str) -> "Dataset":
        return Dataset(list(self.instances), role=role, origin=self.origin.copy())


class Model:
    """Base class for models.

    Subclasses implement ``_prepare`` (dataset statistics, cached per
    dataset object) and the vectorised ``losses``/``grads``/``weighted_*``
    methods.  ``hvp_exact`` is optional; :func:`hvp` falls back to finite
    differences of ``weighted_grad``.
    """

    n_params: int

    def __init__(self):
        self._cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    # -- per-dataset statistics --------------------------------------------
    def stats(self, data: Dataset):
        try:
            return self._cache[data]
        except KeyError:
            for inst in data:
                self.check_instance(inst)
            s = self._prepare(data)
            self._cache[data] = s
            return s

    def check_instance(self, x: Instance) -> None:
        raise NotImplementedError

    def _prepare(self, data: Dataset):
        raise NotImplementedError

    def check_params(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ConfigError(f"parameter vector has shape {theta.shape}, expected ({self.n_params},)")
        if not np.all(np.isfinite(theta)):
            raise ConfigError("parameter vector contains non-finite entries")
        return theta

    # -- vectorised API ------------------------------------------------------
    def losses(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weighted_loss(self, data: Dataset, w: np.ndarray, theta: np.ndarray) -> float:
        return float(np.dot(w, self.losses(data, theta)))

    def weighted_grad(self, data: Dataset, w: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return w @ self.grads(data, theta)

    def grad_dots(self, data: Dataset, theta: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """``[vec . grad l(x_n, theta) for n]`` without keeping the gradients."""
        return self.grads(data, theta) @ vec

    def hvp_exact(self, data: Dataset, w: np.ndarray, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact HVP")

    def init_params(self, rng: np.random.Generator, scale: float = 0.0) -> np.ndarray:
        return scale * rng.standard_normal(self.n_params)


class QuadraticModel(Model):
    """``l(x, theta) = 0.5 * ||theta - x||^2`` on real vectors of length ``dim``."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 1:
            raise ConfigError("dim must be >= 1")
        self.dim = int(dim)
        self.n_params = self.dim

    def check_instance(self, x):
        p = np.asarray(x.payload)
        if p.shape != (self.dim,):
            raise ConfigError(f"instance {x.id}: expected feature vector of length {self.dim}, got shape {p.shape}")

    def _prepare(self, data):
        return np.stack([np.asarray(x.payload, dtype=np.float64) for x in data])

    def losses(self, data, theta):
        X = self.stats(data)
        return 0.5 * np.sum((theta[None, :] - X) ** 2, axis=1)

    def grads(self, data, theta):
        return theta[None, :] - self.stats(data)

    def weighted_grad(self, data, w, theta):
        return np.sum(w) * theta - w @ self.stats(data)

    def grad_dots(self, data, theta, vec):
        return float(theta @ vec) - self.stats(data) @ vec

    def hvp_exact(self, data, w, theta, v):
        return np.sum(w) * np.asarray(v, dtype=np.float64)


class BigramModel(Model):
    """Softmax bigram LM with a start-of-sequence context row.

    ``theta`` reshaped to ``(V + 1, V)`` holds next-token logits; row ``c < V``
    conditions on previous token ``c`` and row ``V`` predicts the first token.
    The loss of a sequence is its summed negative log-likelihood, so every
    token (including the first) contributes one term.
    """

    def __init__(self, vocab_size: int, max_len: int | None = None):
        super().__init__()
        if vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        self.vocab_size = int(vocab_size)
        self.max_len = max_len
        self.shape = (self.vocab_size + 1, self.vocab_size)
        self.n_params = self.shape[0] * self.shape[1]

    def check_instance(self, x):
        p = np.asarray(x.payload)
        if p.ndim != 1:
            raise ConfigError(f"instance {x.id}: token sequence must be one-dimensional")
        if p.size and (not np.issubdtype(p.dtype, np.integer)):
            raise ConfigError(f"instance {x.id}: token ids must be integers")
        if p.size and (p.min() < 0 or p.max() >= self.vocab_size):
            raise ConfigError(f"instance {x.id}: token id out of range for vocabulary of {self.vocab_size}")
        if self.max_len is not None and p.size > self.max_len:
            raise ConfigError(f"instance {x.id}: length {p.size} exceeds max_len {self.max_len}")

    def _prepare(self, data):
        V = self.vocab_size
        B = np.zeros((len(data), V + 1, V))
        for n, x in enumerate(data):
            seq = np.asarray(x.payload, dtype=np.int64)
            if seq.size == 0:
                continue
            prev = np.concatenate(([V], seq[:-1]))
            np.add.at(B[n], (prev, seq), 1.0)
        return B

    def _log_probs(self, theta):
        W = theta.reshape(self.shape)
        Wmax = W.max(axis=1, keepdims=True)
        logZ = Wmax + np.log(np.sum(np.exp(W - Wmax), axis=1, keepdims=True))
        return W - logZ

    def losses(self, data, theta):
        B = self.stats(data)
        logP = self._log_probs(theta)
        return -np.einsum("ncj,cj->n", B, logP)

    def grads(self, data, theta):
        B = self.stats(data)
        P = np.exp(self._log_probs(theta))
        C = B.sum(axis=2)
        G = C[:, :, None] * P[None] - B
        return G.reshape(len(data), -1)

    def _weighted_counts(self, data, w):
        B = self.stats(data)
        Bw = np.tensordot(np.asarray(w, dtype=np.float64), B, axes=1)
        return Bw, Bw.sum(axis=1)

    def weighted_loss(self, data, w, theta):
        Bw, _ = self._weighted_counts(data, w)
        return float(-np.sum(Bw * self._log_probs(theta)))

    def weighted_grad(self, data, w, theta):
        Bw, Cw = self._weighted_counts(data, w)
        P = np.exp(self._log_probs(theta))
        return (Cw[:, None] * P - Bw).ravel()

    def grad_dots(self, data, theta, vec):
        B = self.stats(data)
        P = np.exp(self._log_probs(theta))
        Lam = np.asarray(vec).reshape(self.shape)
        C = B.sum(axis=2)
        return C @ np.sum(P * Lam, axis=1) - np.einsum("ncj,cj->n", B, Lam)

    def hvp_exact(self, data, w, theta, v):
        # Each occurrence of context c contributes (diag(p_c) - p_c p_c^T).
        _, Cw = self._weighted_counts(data, w)
        P = np.exp(self._log_probs(theta))
        Vm = np.asarray(v, dtype=np.float64).reshape(self.shape)
        PV = P * Vm
        out = Cw[:, None] * (PV - P * PV.sum(axis=1, keepdims=True))
        return out.ravel()

    def init_params(self, rng, scale=0.0):
        return scale * rng.standard_normal(self.n_params)


# -- module-level operations -------------------------------------------------

def _single(x: Instance) -> Dataset:
    return Dataset([Instance(0, np.asarray(x.payload))])


def _as_instance(x) -> Instance:
    return x if isinstance(x, Instance) else Instance(0, np.asarray(x))


def loss(model: Model, x, theta) -> float:
    """Per-instance loss ``l(x, theta)``."""
    theta = model.check_params(theta)
    return float(model.losses(_single(_as_instance(x)), theta)[0])


def grad(model: Model, x, theta) -> np.ndarray:
    theta = model.check_params(theta)
    return model.grads(_single(_as_instance(x)), theta)[0]


def _check_weights(data: Dataset, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (len(data),):
        raise ConfigError(f"weight vector has length {gamma.shape}, dataset has {len(data)} instances")
    return gamma


def weighted_loss(model: Model, data: Dataset, gamma, theta) -> float:
    """``sum_n gamma_n * l(x_n, theta)``."""
    gamma = _check_weights(data, gamma)
    theta = model.check_params(theta)
    return model.weighted_loss(data, gamma, theta)


def weighted_grad(model: Model, data: Dataset, gamma, theta) -> np.ndarray:
    gamma = _check_weights(data, gamma)
    theta = model.check_params(theta)
    return model.weighted_grad(data, gamma, theta)


def fd_step(theta: np.ndarray, v: np.ndarray) -> float:
    """Finite-difference step used by the FD HVP path."""
    return 1e-4 * (1.0 + np.linalg.norm(theta)) / np.linalg.norm(v)


def hvp_fd(model: Model, data: Dataset, w, theta, v) -> np.ndarray:
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(theta)
    eps = fd_step(theta, v)
    gp = model.weighted_grad(data, w, theta + eps * v)
    gm = model.weighted_grad(data, w, theta - eps * v)
    return (gp - gm) / (2.0 * eps)


def hvp(model: Model, data: Dataset, gamma, theta, v, method: str = "exact") -> np.ndarray:
    """Hessian of the weighted loss times ``v``.

    ``method`` is ``"exact"`` (model-supplied rule, falling back to FD when the
    model has none) or ``"fd"`` (central differences of the gradient).
    """
    gamma = _check_weights(data, gamma)
    theta = model.check_params(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ConfigError(f"vector has shape {v.shape}, expected {theta.shape}")
    return _hvp(model, data, gamma, theta, v, method)


def _hvp(model, data, w, theta, v, method):
    if method == "exact":
        try:
            return model.hvp_exact(data, w, theta, v)
        except NotImplementedError:
            return hvp_fd(model, data, w, theta, v)
    if method == "fd":
        return hvp_fd(model, data, w, theta, v)
    raise ConfigError(f"unknown HVP method {method!r}")


@dataclass(eq=False)
class DownstreamLoss:
    """``J(theta)``: mean per-instance loss over a downstream dataset."""

    dataset: Dataset
    _w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ConfigError("downstream dataset is empty")
        self._w = np.full(len(self.dataset), 1.0 / len(self.dataset))

    def value(self, model: Model, theta) -> float:
        return model.weighted_loss(self.dataset, self._w, theta)

    def grad(self, model: Model, theta) -> np.ndarray:
        return model.weighted_grad(self.dataset, self._w, theta)


def downstream_loss(J: DownstreamLoss, model: Model, theta) -> float:
    return J.value(model, model.check_params(theta))


def downstream_grad(J: DownstreamLoss, model: Model, theta) -> np.ndarray:
    return J.grad(model, model.check_params(theta))
