"""Shallow feed-forward classifier trained from scratch.

Architecture: input -> 512 (batch norm, ReLU, dropout 0.5) -> 256 (ReLU)
-> 5-way softmax, optimized with mini-batch adaptive-moment gradient
descent on categorical cross-entropy. The input width follows the feature
vector (10/18/26 for LBP histograms, 1024 for deep embeddings).

Everything is plain numpy in double precision. Given (seed, data, config)
the trained parameters are reproducible; linear algebra may run on a
threaded BLAS, whose reductions are stable for a fixed thread count, so
cross-machine reruns are guaranteed only to 1e-6 relative (declared in
run metadata).

Model file (``.mmlp``): magic ``MMLP``, u32 version=1, four u32 layer
widths (d, 512, 256, 5), then each tensor as u32 rank, u32 dims,
little-endian float64 values (C order), in the order W1, b1, bn_gamma,
bn_beta, bn_running_mean, bn_running_var, W2, b2, W3, b3. A JSON sidecar
carries the architecture, train config, seed and loss history.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import MagscopeError, TrainingDivergedError
from .levels import N_CLASSES
from .seeding import spawn_rng
from .validation import check_feature_matrix, check_labels

HIDDEN1 = 512
HIDDEN2 = 256
DROPOUT_RATE = 0.5

MAGIC = b"MMLP"
VERSION = 1

_TENSOR_ORDER = ("w1", "b1", "bn_gamma", "bn_beta", "bn_running_mean",
                 "bn_running_var", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden1: int = HIDDEN1
    hidden2: int = HIDDEN2
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, learning_rate > 0")


@dataclass
class MlpParams:
    arch: MlpArchitecture
    w1: np.ndarray
    b1: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in
                ("w1", "b1", "bn_gamma", "bn_beta", "w2", "b2", "w3", "b3")}

    def copy(self) -> "MlpParams":
        return MlpParams(self.arch, **{k: getattr(self, k).copy() for k in _TENSOR_ORDER})


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(arch: MlpArchitecture, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    return MlpParams(
        arch=arch,
        w1=_glorot(rng, arch.input_dim, arch.hidden1),
        b1=np.zeros(arch.hidden1),
        bn_gamma=np.ones(arch.hidden1),
        bn_beta=np.zeros(arch.hidden1),
        bn_running_mean=np.zeros(arch.hidden1),
        bn_running_var=np.ones(arch.hidden1),
        w2=_glorot(rng, arch.hidden1, arch.hidden2),
        b2=np.zeros(arch.hidden2),
        w3=_glorot(rng, arch.hidden2, arch.n_classes),
        b3=np.zeros(arch.n_classes),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: MlpParams, batch: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None, *, apply_dropout: bool = True,
            update_running: bool = False, bn_eps: float = 1e-5,
            bn_momentum: float = 0.9) -> tuple[np.ndarray, dict]:
    """Class probabilities for a batch, plus cached activations.

    ``train`` mode normalizes with batch statistics and (by default)
    applies inverted dropout from ``rng``; ``eval`` mode uses the running
    statistics and no dropout, so it is deterministic.
    """
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ValueError(f"batch shape {X.shape} does not match input_dim {params.arch.input_dim}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"

    z1 = X @ params.w1 + params.b1
    if train:
        mu = z1.mean(axis=0)
        var = z1.var(axis=0)
        if update_running:
            params.bn_running_mean *= bn_momentum
            params.bn_running_mean += (1.0 - bn_momentum) * mu
            params.bn_running_var *= bn_momentum
            params.bn_running_var += (1.0 - bn_momentum) * var
    else:
        mu = params.bn_running_mean
        var = params.bn_running_var
    inv_std = 1.0 / np.sqrt(var + bn_eps)
    xhat = (z1 - mu) * inv_std
    bn = params.bn_gamma * xhat + params.bn_beta
    h1 = np.maximum(bn, 0.0)

    if train and apply_dropout:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = 1.0 - DROPOUT_RATE
        mask = (rng.random(h1.shape) < keep).astype(np.float64) / keep
        h1d = h1 * mask
    else:
        mask = None
        h1d = h1

    z2 = h1d @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ params.w3 + params.b3
    probs = _softmax(z3)
    cache = {"X": X, "z1": z1, "xhat": xhat, "inv_std": inv_std, "bn": bn,
             "h1": h1, "mask": mask, "h1d": h1d, "z2": z2, "h2": h2, "z3": z3,
             "train": train}
    return probs, cache


def cross_entropy(probs_logits: np.ndarray, labels: np.ndarray, *, from_logits: bool = True) -> float:
    """Mean categorical cross-entropy, log-sum-exp stabilized."""
    z = np.asarray(probs_logits, dtype=np.float64)
    y = np.asarray(labels)
    if from_logits:
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        return float(np.mean(lse - z[np.arange(len(y)), y]))
    return float(-np.mean(np.log(z[np.arange(len(y)), y])))


def backward(params: MlpParams, cache: dict, probs: np.ndarray,
             labels: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of mean cross-entropy w.r.t. every trainable tensor."""
    n = probs.shape[0]
    y = np.asarray(labels)
    dz3 = probs.copy()
    dz3[np.arange(n), y] -= 1.0
    dz3 /= n

    grads: dict[str, np.ndarray] = {}
    grads["w3"] = cache["h2"].T @ dz3
    grads["b3"] = dz3.sum(axis=0)
    dh2 = dz3 @ params.w3.T
    dz2 = dh2 * (cache["z2"] > 0)
    grads["w2"] = cache["h1d"].T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1d = dz2 @ params.w2.T
    dh1 = dh1d * cache["mask"] if cache["mask"] is not None else dh1d
    dbn = dh1 * (cache["bn"] > 0)
    grads["bn_gamma"] = (dbn * cache["xhat"]).sum(axis=0)
    grads["bn_beta"] = dbn.sum(axis=0)
    dxhat = dbn * params.bn_gamma
    if cache["train"]:
        xhat = cache["xhat"]
        dz1 = cache["inv_std"] * (
            dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    else:
        dz1 = dxhat * cache["inv_std"]
    grads["w1"] = cache["X"].T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


@dataclass
class _AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _adam_step(params: MlpParams, grads: dict[str, np.ndarray], state: _AdamState,
               cfg: TrainConfig) -> None:
    state.t += 1
    b1c = 1.0 - cfg.beta1 ** state.t
    b2c = 1.0 - cfg.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        tensor = getattr(params, name)
        tensor -= cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)


def train(features: np.ndarray, labels: np.ndarray, arch: MlpArchitecture | None = None,
          cfg: TrainConfig = TrainConfig()) -> tuple[MlpParams, list[float]]:
    """Fit the network; returns trained parameters and per-epoch mean loss.

    Deterministic per (cfg.seed, data, cfg). A non-finite loss aborts with
    a diagnostic rather than silently producing garbage.
    """
    X = check_feature_matrix(features)
    y = check_labels(labels, X.shape[0])
    n = X.shape[0]
    if arch is None:
        arch = MlpArchitecture(input_dim=X.shape[1])
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} samples, got {n}")

    params = init_params(arch, cfg.seed)
    rng = spawn_rng(cfg.seed, "mlp-train")
    adam = _AdamState()
    history: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if idx.size < 2:
                continue  # batch statistics need at least two samples
            xb, yb = X[idx], y[idx]
            probs, cache = forward(params, xb, mode="train", rng=rng,
                                   update_running=True, bn_eps=cfg.bn_eps,
                                   bn_momentum=cfg.bn_momentum)
            loss = cross_entropy(cache["z3"], yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(lr={cfg.learning_rate})")
            loss_sum += loss * idx.size
            seen += idx.size
            grads = backward(params, cache, probs, yb)
            _adam_step(params, grads, adam, cfg)
        history.append(loss_sum / max(seen, 1))
    return params, history


def predict_proba(params: MlpParams, batch: np.ndarray, bn_eps: float = 1e-5) -> np.ndarray:
    probs, _ = forward(params, batch, mode="eval", bn_eps=bn_eps)
    return probs


def predict(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    """Class ordinals; ties resolve to the lowest ordinal."""
    return np.argmax(predict_proba(params, batch), axis=1)


def grad_check(params: MlpParams, batch: np.ndarray, labels: np.ndarray,
               eps: float = 1e-5, samples_per_tensor: int | None = 300,
               rng_seed: int = 0) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    Runs in batch-statistics mode with dropout disabled so the loss is a
    smooth deterministic function of the parameters. Every trainable tensor
    is checked on up to ``samples_per_tensor`` entries (all entries when
    None).
    """
    X = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels)

    def loss_of(p: MlpParams) -> float:
        _, cache = forward(p, X, mode="train", apply_dropout=False)
        return cross_entropy(cache["z3"], y)

    probs, cache = forward(params, X, mode="train", apply_dropout=False)
    analytic = backward(params, cache, probs, y)

    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for name, grad in analytic.items():
        flat = grad.ravel()
        size = flat.size
        if samples_per_tensor is None or size <= samples_per_tensor:
            indices = np.arange(size)
        else:
            indices = rng.choice(size, size=samples_per_tensor, replace=False)
        work = params.copy()
        tensor = getattr(work, name).ravel()
        for i in indices:
            orig = tensor[i]
            tensor[i] = orig + eps
            up = loss_of(work)
            tensor[i] = orig - eps
            down = loss_of(work)
            tensor[i] = orig
            fd = (up - down) / (2.0 * eps)
            a = flat[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


def save_mmlp(params: MlpParams, path: Path | str, *, cfg: TrainConfig | None = None,
              loss_history: list[float] | None = None) -> None:
    path = Path(path)
    arch = params.arch
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", VERSION, arch.input_dim, arch.hidden1,
                             arch.hidden2, arch.n_classes))
        for name in _TENSOR_ORDER:
            tensor = np.asarray(getattr(params, name), dtype=np.float64)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.astype("<f8").tobytes(order="C"))
    sidecar = {
        "arch": asdict(arch),
        "train_config": asdict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "loss_history": loss_history,
        "determinism": "blas-threaded linear algebra; rerun tolerance 1e-6 relative",
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_mmlp(path: Path | str) -> MlpParams:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise MagscopeError(f"{path}: not an MMLP model file")
    version, d, h1, h2, k = struct.unpack_from("<IIIII", data, 4)
    if version != VERSION:
        raise MagscopeError(f"{path}: unsupported MMLP version {version}")
    arch = MlpArchitecture(input_dim=d, hidden1=h1, hidden2=h2, n_classes=k)
    off = 24
    tensors: dict[str, np.ndarray] = {}
    for name in _TENSOR_ORDER:
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += 8 * count
    if off != len(data):
        raise MagscopeError(f"{path}: trailing bytes after tensors")
    return MlpParams(arch=arch, **tensors)


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Estimator wrapper around the from-scratch network."""

    def __init__(self, epochs: int = 30, batch_size: int = 128,
                 learning_rate: float = 1e-3, seed: int = 42):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        X = check_feature_matrix(X)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, seed=self.seed)
        self.params_, self.loss_history_ = train(X, y, cfg=cfg)
        return self

    def predict(self, X) -> np.ndarray:
        return predict(self.params_, check_feature_matrix(X))

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self.params_, check_feature_matrix(X))
