"""Data scorer: regress solved quality scores on instance features.

The reference feature extractor is a hashed bag of token n-grams.  Fitting
is closed-form ridge regression on standardized targets; the regularizer is
picked by validation Spearman correlation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ocds.errors import ConfigError, UndefinedCorrelationError
from ocds.model import Dataset

DEFAULT_REG_GRID = (1e-6, 1e-4, 1e-2, 1.0)
RHO_FLAG_THRESHOLD = 0.2


@dataclass(frozen=True)
class HashedNgramExtractor:
    dim: int = 256
    orders: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.dim < 1 or not self.orders or min(self.orders) < 1:
            raise ConfigError("extractor needs dim >= 1 and positive n-gram orders")
        object.__setattr__(self, "orders", tuple(int(o) for o in self.orders))

    def config_hash(self) -> str:
        doc = json.dumps({"kind": "hashed-ngram", "dim": self.dim, "orders": list(self.orders)}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def bucket(self, ngram) -> int:
        key = ",".join(str(int(t)) for t in ngram).encode()
        digest = hashlib.blake2b(key, digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def counts(self, tokens) -> np.ndarray:
        """Raw hashed n-gram counts before normalization."""
        tokens = np.asarray(tokens, dtype=np.int64)
        out = np.zeros(self.dim)
        for k in self.orders:
            for i in range(tokens.size - k + 1):
                out[self.bucket(tokens[i:i + k])] += 1.0
        return out

    def __call__(self, tokens) -> np.ndarray:
        c = self.counts(tokens)
        norm = np.linalg.norm(c)
        return c / norm if norm > 0 else c


def extract_features(extractor: HashedNgramExtractor, x) -> np.ndarray:
    payload = x.payload if hasattr(x, "payload") else x
    return extractor(payload)


def feature_matrix(extractor, data: Dataset) -> np.ndarray:
    return np.stack([extractor(x.payload) for x in data])


def spearman(a, b) -> float:
    """Spearman's rho: Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ConfigError("spearman needs two equal-length vectors with at least 2 entries")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0.0:
        raise UndefinedCorrelationError("zero rank variance")
    return float(np.dot(ra, rb) / denom)


def ridge_fit(X: np.ndarray, y: np.ndarray, reg: float) -> tuple[np.ndarray, float]:
    """Minimize ``mean((Xw + b - y)^2) + reg * ||w||^2``; the intercept is unpenalized."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    n = X.shape[0]
    A = Xc.T @ Xc / n + reg * np.eye(X.shape[1])
    w = np.linalg.lstsq(A, Xc.T @ (y - ym) / n, rcond=None)[0]
    return w, float(ym - xm @ w)


def _adamw_fit(X, y, epochs=5, lr=1e-4, batch_size=512, weight_decay=0.01, seed=0):
    rng = np.random.default_rng(seed)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    m = np.zeros(d + 1)
    v = np.zeros(d + 1)
    b1, b2, eps = 0.9, 0.999, 1e-8
    k = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            r = X[idx] @ w + b - y[idx]
            g = np.concatenate([2.0 * X[idx].T @ r, [2.0 * r.sum()]]) / idx.size
            k += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            step = lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps)
            w = w * (1 - lr * weight_decay) - step[:d]
            b = b - step[d]
    return w, float(b)


@dataclass
class ScorerModel:
    w: np.ndarray
    b: float
    extractor: HashedNgramExtractor
    target_mean: float
    target_std: float
    val_spearman: float | None
    reg: float | None = None
    flagged: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def extractor_hash(self) -> str:
        return self.extractor.config_hash()

    def predict_features(self, F: np.ndarray) -> np.ndarray:
        z = F @ self.w + self.b
        return z * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {
            "d": self.extractor.dim,
            "extractor": {"kind": "hashed-ngram", "dim": self.extractor.dim, "orders": list(self.extractor.orders)},
            "extractor_hash": self.extractor_hash,
            "w": [float(x) for x in self.w],
            "b": self.b,
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "val_spearman": self.val_spearman,
            "reg": self.reg,
            "flagged": self.flagged,
            "notes": list(self.notes),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ScorerModel":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        ext = doc["extractor"]
        extractor = HashedNgramExtractor(ext["dim"], tuple(ext["orders"]))
        if extractor.config_hash() != doc.get("extractor_hash", extractor.config_hash()):
            raise ConfigError(f"{path}: extractor hash does not match its configuration")
        w = np.asarray(doc["w"], dtype=np.float64)
        if w.shape != (extractor.dim,):
            raise ConfigError(f"{path}: weight vector length {w.size} != d={extractor.dim}")
        return cls(w, float(doc["b"]), extractor, float(doc["target_mean"]), float(doc["target_std"]),
                   doc.get("val_spearman"), doc.get("reg"), bool(doc.get("flagged", False)), list(doc.get("notes", [])))


def _payload_key(payload, seed: int) -> int:
    h = hashlib.blake2b(np.asarray(payload, dtype="<i8").tobytes(), digest_size=8, key=str(seed).encode())
    return int.from_bytes(h.digest(), "little")


def split_indices(n: int, val_fraction: float, seed: int, payloads=None) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split.

    With ``payloads`` the validation set is the instances with the smallest
    seeded content hash, so the split follows instances under reordering.
    """
    if not 0 < val_fraction <= 0.5:
        raise ConfigError("val_fraction must be in (0, 0.5]")
    n_val = max(1, int(round(val_fraction * n)))
    if n - n_val < 1:
        raise ConfigError("not enough instances for a train/validation split")
    if payloads is None:
        perm = np.random.default_rng(seed).permutation(n)
    else:
        keys = np.array([_payload_key(p, seed) for p in payloads], dtype=np.uint64)
        perm = np.lexsort((np.arange(n), keys))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_scorer(
    proxy: Dataset,
    gamma,
    extractor: HashedNgramExtractor | None = None,
    regs=DEFAULT_REG_GRID,
    val_fraction: float = 0.1,
    seed: int = 0,
    method: str = "ridge",
) -> ScorerModel:
    """Fit ``gamma ~ w . h(x) + b`` and keep the regularizer with the best validation rho.

    ``method="adamw"`` trains the linear head iteratively (5 epochs, lr 1e-4,
    batch 512) instead of solving it in closed form.
    """
    extractor = extractor or HashedNgramExtractor()
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (len(proxy),):
        raise ConfigError(f"{gamma.size} targets for {len(proxy)} instances")
    F = feature_matrix(extractor, proxy)
    mu, sd = float(gamma.mean()), float(gamma.std())
    if sd == 0.0 or not np.isfinite(sd):
        return ScorerModel(np.zeros(extractor.dim), 0.0, extractor, mu, 1.0, None, None, True,
                           ["degenerate targets: zero variance, constant predictor"])
    z = (gamma - mu) / sd
    tr, va = split_indices(len(proxy), val_fraction, seed, proxy.payloads)

    best = None
    for reg in (regs if method == "ridge" else (None,)):
        if method == "ridge":
            w, b = ridge_fit(F[tr], z[tr], reg)
        elif method == "adamw":
            w, b = _adamw_fit(F[tr], z[tr], seed=seed)
        else:
            raise ConfigError(f"unknown scorer fitting method {method!r}")
        try:
            rho = spearman(F[va] @ w + b, z[va])
        except UndefinedCorrelationError:
            rho = None
        key = -np.inf if rho is None else rho
        if best is None or key > best[0]:
            best = (key, w, b, reg, rho)
    _, w, b, reg, rho = best
    model = ScorerModel(w, b, extractor, mu, sd, rho, reg)
    if rho is None or rho < RHO_FLAG_THRESHOLD:
        model.flagged = True
        model.notes.append(f"validation spearman {rho} below {RHO_FLAG_THRESHOLD}")
    return model


def infer_scores(model: ScorerModel, corpus: Dataset, extractor_hash: str | None = None) -> np.ndarray:
    """Predicted quality score for every corpus instance, on the original target scale."""
    if extractor_hash is not None and extractor_hash != model.extractor_hash:
        raise ConfigError("extractor configuration does not match the fitted scorer")
    F = feature_matrix(model.extractor, corpus)
    return model.predict_features(F)
