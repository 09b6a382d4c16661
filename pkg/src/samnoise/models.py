"""Linear, two-layer deep linear and two-layer ReLU models.

Every model is an immutable value holding a tuple of float64 parameter
blocks. Binary models emit one logit and train on targets in {-1, +1} with
the logistic loss; multiclass models emit K logits and use cross-entropy.

The per-example gradient is factored into a *logit scale* (the derivative
of the loss with respect to the logits, up to sign) and the *Jacobian* of
the logits with respect to the parameters:

    binary:      grad = -t * sigmoid(-t f) * df/dw
    multiclass:  grad = sum_k (softmax(f) - e_t)_k * df_k/dw
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

from samnoise.errors import DataFormatError, DegenerateGradient, UnsupportedModel

Blocks = Tuple[np.ndarray, ...]

DEGENERATE_NORM = 1e-300


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    # log(1 / (1 + e^-x)) without overflow for large |x|
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _relu(a):
    return np.maximum(a, 0.0)


@dataclass(frozen=True)
class LinearModel:
    w: np.ndarray

    family = "linear"
    multiclass = False

    def params(self) -> Blocks:
        return (self.w,)

    def replace(self, params) -> "LinearModel":
        (w,) = params
        return LinearModel(np.asarray(w, dtype=np.float64))

    @property
    def dim(self):
        return self.w.shape[0]


@dataclass(frozen=True)
class DLN2Model:
    """f(x) = <v, W x> with W of shape (h, d)."""

    W: np.ndarray
    v: np.ndarray

    family = "dln2"
    multiclass = False

    def params(self) -> Blocks:
        return (self.W, self.v)

    def replace(self, params) -> "DLN2Model":
        W, v = params
        return DLN2Model(np.asarray(W, dtype=np.float64), np.asarray(v, dtype=np.float64))

    @property
    def dim(self):
        return self.W.shape[1]

    def two_layer(self):
        return self.W, self.v[None, :], "identity"

    def from_two_layer(self, W1, W2):
        return DLN2Model(W1, W2[0])


@dataclass(frozen=True)
class MLPModel:
    """f(x) = W2 act(W1 x), no biases.

    ``activation`` is "relu" or "identity" (a multiclass deep linear
    network). K = 1 gives a single binary logit.
    """

    W1: np.ndarray
    W2: np.ndarray
    activation: str = "relu"

    family = "mlp"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def multiclass(self):
        return self.W2.shape[0] >= 2

    @property
    def num_classes(self):
        return self.W2.shape[0]

    @property
    def dim(self):
        return self.W1.shape[1]

    def params(self) -> Blocks:
        return (self.W1, self.W2)

    def replace(self, params) -> "MLPModel":
        W1, W2 = params
        return MLPModel(np.asarray(W1, dtype=np.float64), np.asarray(W2, dtype=np.float64), self.activation)

    def two_layer(self):
        return self.W1, self.W2, self.activation

    def from_two_layer(self, W1, W2):
        return MLPModel(W1, W2, self.activation)


@dataclass(frozen=True)
class GradDecomp:
    logit_scale: object  # float (binary) or (K,) array
    jacobian: Blocks  # binary: parameter shapes; multiclass: leading K axis
    grad: Blocks
    loss: float
    logits: object


# ---------------------------------------------------------------- init


def _std(std, fan_in):
    # "lecun" matches the variance-1/fan_in normal scheme common in Flax
    return 1.0 / np.sqrt(fan_in) if std == "lecun" else float(std)


def init_linear(dim, std=0.01, rng=None) -> LinearModel:
    rng = np.random.default_rng(rng)
    if std == 0:
        return LinearModel(np.zeros(dim))
    return LinearModel(rng.normal(0.0, _std(std, dim), size=dim))


def init_dln2(dim, width, std=0.01, rng=None) -> DLN2Model:
    if width < 1:
        raise ValueError("width must be >= 1")
    rng = np.random.default_rng(rng)
    W = rng.normal(0.0, _std(std, dim), size=(width, dim))
    v = rng.normal(0.0, _std(std, width), size=width)
    return DLN2Model(W, v)


def init_mlp(dim, width, num_classes, std=0.01, rng=None, activation="relu") -> MLPModel:
    rng = np.random.default_rng(rng)
    W1 = rng.normal(0.0, _std(std, dim), size=(width, dim))
    W2 = rng.normal(0.0, _std(std, width), size=(num_classes, width))
    return MLPModel(W1, W2, activation)


def init_model(family, dim, width=500, num_classes=2, std=0.01, rng=None):
    if family == "linear":
        return init_linear(dim, std, rng)
    if family == "dln2":
        if num_classes > 2:
            return init_mlp(dim, width, num_classes, std, rng, "identity")
        return init_dln2(dim, width, std, rng)
    if family == "mlp":
        k = num_classes if num_classes > 2 else 1
        return init_mlp(dim, width, k, std, rng, "relu")
    raise ValueError(f"unknown model family {family!r}")


# ---------------------------------------------------------------- helpers


def joint_norm(blocks) -> float:
    return float(np.sqrt(sum(float(np.vdot(b, b)) for b in blocks)))


def add_scaled(params, direction, scale) -> Blocks:
    return tuple(p + scale * d for p, d in zip(params, direction))


def _check_dim(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {model.dim}")
    return x


def forward(model, x):
    """Logits for one example (1-D ``x``) or a batch (2-D ``x``).

    Binary models return a scalar per example, multiclass models a K-vector.
    """
    x = _check_dim(model, x)
    if isinstance(model, LinearModel):
        out = x @ model.w
    elif isinstance(model, DLN2Model):
        out = (x @ model.W.T) @ model.v
    elif isinstance(model, MLPModel):
        a = x @ model.W1.T
        h = _relu(a) if model.activation == "relu" else a
        out = h @ model.W2.T
        if not model.multiclass:
            out = out[..., 0]
    else:
        raise UnsupportedModel(type(model).__name__)
    return out if np.ndim(out) else float(out)


def hidden_activation(model, x):
    """Last hidden activation z (W x for the DLN, act(W1 x) for the MLP)."""
    x = _check_dim(model, x)
    if isinstance(model, DLN2Model):
        return x @ model.W.T
    if isinstance(model, MLPModel):
        a = x @ model.W1.T
        return _relu(a) if model.activation == "relu" else a
    raise UnsupportedModel(f"{type(model).__name__} has no hidden layer")


def last_layer(model) -> np.ndarray:
    if isinstance(model, DLN2Model):
        return model.v
    if isinstance(model, MLPModel):
        return model.W2
    raise UnsupportedModel(f"{type(model).__name__} has no hidden layer")


def predict(model, x):
    """Class predictions; ties go to +1 (binary) or the lowest index."""
    f = np.asarray(forward(model, x))
    if getattr(model, "multiclass", False):
        return np.argmax(f, axis=-1)
    return np.where(f >= 0, 1, -1)


def per_example_loss(model, x, t):
    """Logistic / cross-entropy loss, vectorized over a batch."""
    f = np.asarray(forward(model, x))
    t = np.asarray(t)
    if getattr(model, "multiclass", False):
        ls = log_softmax(f, axis=-1)
        return -np.take_along_axis(np.atleast_2d(ls), np.atleast_1d(t)[:, None], axis=-1)[:, 0].reshape(t.shape)
    return -log_sigmoid(t * f)


def _jacobian(model, x):
    if isinstance(model, LinearModel):
        return (x.copy(),), float(x @ model.w)
    if isinstance(model, DLN2Model):
        z = model.W @ x
        return (np.outer(model.v, x), z), float(model.v @ z)
    if isinstance(model, MLPModel):
        a = model.W1 @ x
        if model.activation == "relu":
            mask = (a > 0).astype(np.float64)
            h = a * mask
        else:
            mask = np.ones_like(a)
            h = a
        f = model.W2 @ h
        K, width = model.W2.shape
        # df_k/dW1 = (W2[k] * mask) x^T ; df_k/dW2 = e_k h^T
        j1 = (model.W2 * mask)[:, :, None] * x[None, None, :]
        j2 = np.zeros((K, K, width))
        j2[np.arange(K), np.arange(K)] = h
        if K == 1:
            return (j1[0], j2[0]), float(f[0])
        return (j1, j2), f
    raise UnsupportedModel(type(model).__name__)


def assemble(logit_scale, jacobian, t, multiclass) -> Blocks:
    """Rebuild the per-example gradient from its two factors."""
    if multiclass:
        g = np.asarray(logit_scale)
        return tuple(np.tensordot(g, j, axes=(0, 0)) for j in jacobian)
    c = -t * logit_scale
    return tuple(c * j for j in jacobian)


def grad_decomp(model, x, t) -> GradDecomp:
    """Per-example gradient split into logit scale and network Jacobian."""
    x = _check_dim(model, x)
    if x.ndim != 1:
        raise ValueError("grad_decomp takes a single example")
    jac, f = _jacobian(model, x)
    if getattr(model, "multiclass", False):
        K = len(f)
        t = int(t)
        if not 0 <= t < K:
            raise ValueError(f"class label {t} outside 0..{K - 1}")
        p = softmax(f)
        g = p.copy()
        g[t] -= 1.0
        loss = float(-log_softmax(f)[t])
        return GradDecomp(g, jac, assemble(g, jac, t, True), loss, f)
    if t not in (-1, 1):
        raise ValueError(f"binary label must be -1 or +1, got {t}")
    s = float(sigmoid(-t * f))
    loss = float(-log_sigmoid(t * f))
    return GradDecomp(s, jac, assemble(s, jac, t, False), loss, f)


def perturb(model, direction, rho):
    """Shift parameters by rho * direction / ||direction|| (joint norm).

    Raises DegenerateGradient when the direction has zero norm; callers then
    use the unperturbed model.
    """
    if rho == 0:
        return model
    direction = tuple(np.asarray(d, dtype=np.float64) for d in direction)
    params = model.params()
    if len(direction) != len(params) or any(d.shape != p.shape for d, p in zip(direction, params)):
        raise ValueError("direction blocks do not match model parameter shapes")
    norm = joint_norm(direction)
    if not norm > DEGENERATE_NORM:
        raise DegenerateGradient(f"perturbation direction has norm {norm!r}")
    return model.replace(add_scaled(params, direction, rho / norm))


# ---------------------------------------------------------------- checkpoints

SNLM_MAGIC = b"SNLM"
_FAMILY_TAGS = {("linear", None): 0, ("dln2", None): 1, ("mlp", "relu"): 2, ("mlp", "identity"): 3}


def save_model(model, path) -> None:
    """Flat binary checkpoint: magic, family tag, shape header, f64 parameters."""
    key = (model.family, getattr(model, "activation", None))
    blocks = model.params()
    parts = [SNLM_MAGIC, struct.pack("<II", _FAMILY_TAGS[key], len(blocks))]
    for b in blocks:
        parts.append(struct.pack("<I", b.ndim) + struct.pack(f"<{b.ndim}Q", *b.shape))
    for b in blocks:
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != SNLM_MAGIC:
        raise DataFormatError(path, 0, f"bad magic {raw[:4]!r}, expected {SNLM_MAGIC!r}")
    try:
        tag, nblocks = struct.unpack_from("<II", raw, 4)
        off = 12
        shapes = []
        for _ in range(nblocks):
            (ndim,) = struct.unpack_from("<I", raw, off)
            shapes.append(struct.unpack_from(f"<{ndim}Q", raw, off + 4))
            off += 4 + 8 * ndim
    except struct.error as exc:
        raise DataFormatError(path, len(raw), "truncated SNLM header") from exc
    blocks = []
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        if off + 8 * count > len(raw):
            raise DataFormatError(path, len(raw), "truncated SNLM parameter payload")
        blocks.append(np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(np.float64))
        off += 8 * count
    family = {v: k for k, v in _FAMILY_TAGS.items()}.get(tag)
    if family is None:
        raise DataFormatError(path, 4, f"unknown family tag {tag}")
    if family[0] == "linear":
        return LinearModel(*blocks)
    if family[0] == "dln2":
        return DLN2Model(*blocks)
    return MLPModel(*blocks, activation=family[1])
