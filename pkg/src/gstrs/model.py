"""Trainable embedding and classifier head with manual backpropagation.

The embedding is an affine map (optionally preceded by one tanh hidden
layer) with an optional L2-normalization output head, standing in for a
CNN backbone: every loss-side computation operates on its outputs. All
gradients are exact chain rules, validated against finite differences in
the test suite.

Checkpoint layout (little-endian), version 1:

    offset 0   magic   8 bytes  b"GSTRSMDL"
    offset 8   version u32      1
    offset 12  d_in      u32
    offset 16  d_hidden  u32    0 means no hidden layer
    offset 20  d_out     u32
    offset 24  n_classes u32
    offset 28  normalize u32    0 or 1
    offset 32  arrays, float64 row-major, in order:
               [W1 (d_hidden x d_in), b1 (d_hidden)]   only if d_hidden > 0
               W  (d_out x d_mid), b (d_out)           d_mid = d_hidden or d_in
               V  (n_classes x d_out), c0 (n_classes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._validation import as_feature_matrix, check_finite

__all__ = [
    "CHECKPOINT_MAGIC",
    "EmbeddingModel",
    "ClassifierHead",
    "init_embedding",
    "init_head",
    "embed",
    "embed_with_cache",
    "backprop_embedding",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"GSTRSMDL"
_CKPT_HEADER = struct.Struct("<8sIIIIII")


@dataclass
class EmbeddingModel:
    """Affine embedding, optional tanh hidden layer, optional unit-norm output."""

    W: np.ndarray
    b: np.ndarray
    normalize: bool = True
    W1: np.ndarray | None = None  # hidden layer, None = pure affine
    b1: np.ndarray | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        check_finite(self.W, "W")
        check_finite(self.b, "b")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("W must be (d_out, d_mid) and b (d_out,)")
        if self.W.shape[0] < 2:
            raise ValueError("output dimension must be >= 2")
        if (self.W1 is None) != (self.b1 is None):
            raise ValueError("W1 and b1 must be given together")
        if self.W1 is not None:
            self.W1 = np.asarray(self.W1, dtype=np.float64)
            self.b1 = np.asarray(self.b1, dtype=np.float64)
            check_finite(self.W1, "W1")
            check_finite(self.b1, "b1")
            if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[0],):
                raise ValueError("W1 must be (d_hidden, d_in) and b1 (d_hidden,)")
            if self.W.shape[1] != self.W1.shape[0]:
                raise ValueError("W input dim must equal hidden width")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1] if self.W1 is not None else self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {"W": self.W, "b": self.b}
        if self.W1 is not None:
            out["W1"] = self.W1
            out["b1"] = self.b1
        return out


@dataclass
class ClassifierHead:
    """Linear softmax classifier over embedded features."""

    V: np.ndarray
    c0: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.c0 = np.asarray(self.c0, dtype=np.float64)
        check_finite(self.V, "V")
        check_finite(self.c0, "c0")
        if self.V.ndim != 2 or self.c0.shape != (self.V.shape[0],):
            raise ValueError("V must be (n_classes, d_out) and c0 (n_classes,)")
        if self.V.shape[0] < 2:
            raise ValueError("need at least 2 classes")

    @property
    def n_classes(self) -> int:
        return self.V.shape[0]

    def logits(self, embedded: np.ndarray) -> np.ndarray:
        return embedded @ self.V.T + self.c0

    def params(self) -> dict[str, np.ndarray]:
        return {"V": self.V, "c0": self.c0}


def _glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def init_embedding(
    d_in: int, d_out: int, rng: np.random.Generator, hidden: int = 0, normalize: bool = True
) -> EmbeddingModel:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if hidden > 0:
        W1 = _glorot_uniform(rng, hidden, d_in)
        W = _glorot_uniform(rng, d_out, hidden)
        return EmbeddingModel(W=W, b=np.zeros(d_out), normalize=normalize, W1=W1, b1=np.zeros(hidden))
    W = _glorot_uniform(rng, d_out, d_in)
    return EmbeddingModel(W=W, b=np.zeros(d_out), normalize=normalize)


def init_head(d_out: int, n_classes: int, rng: np.random.Generator) -> ClassifierHead:
    return ClassifierHead(V=_glorot_uniform(rng, n_classes, d_out), c0=np.zeros(n_classes))


def embed_with_cache(model: EmbeddingModel, X, validate: bool = True) -> tuple[np.ndarray, dict]:
    """Forward pass keeping intermediates for the backward pass."""
    if validate:
        X = as_feature_matrix(X, "X")
        if X.shape[1] != model.d_in:
            raise ValueError(f"input dim {X.shape[1]} != model input dim {model.d_in}")
    cache: dict = {"X": X}
    mid = X
    if model.W1 is not None:
        pre1 = X @ model.W1.T + model.b1
        mid = np.tanh(pre1)
        cache["hidden"] = mid
    z = mid @ model.W.T + model.b
    cache["mid"] = mid
    cache["z"] = z
    if model.normalize:
        norms = np.linalg.norm(z, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ValueError(
                f"sample {zero[0]} maps to the zero vector; cannot l2-normalize"
            )
        out = z / norms[:, None]
        cache["norms"] = norms
        cache["out"] = out
        return out, cache
    return z, cache


def embed(model: EmbeddingModel, X) -> np.ndarray:
    """Embedded features: l2_normalize(W x + b) rows (normalization optional)."""
    out, _ = embed_with_cache(model, X)
    return out


def backprop_embedding(
    model: EmbeddingModel, cache: dict, grad_out: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact chain rule from output gradients to parameter gradients.

    ``cache`` comes from :func:`embed_with_cache` on the same inputs.
    Returns gradients keyed like ``model.params()``.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache["z"].shape:
        raise ValueError(
            f"grad shape {grad_out.shape} != output shape {cache['z'].shape}"
        )
    if model.normalize:
        # y = z / |z|; dz = (g - (g.y) y) / |z|
        norms = cache["norms"][:, None]
        y = cache["out"]
        gy = np.sum(grad_out * y, axis=1, keepdims=True)
        grad_z = (grad_out - gy * y) / norms
    else:
        grad_z = grad_out
    mid = cache["mid"]
    grads = {"W": grad_z.T @ mid, "b": grad_z.sum(axis=0)}
    if model.W1 is not None:
        grad_mid = grad_z @ model.W
        grad_pre1 = grad_mid * (1.0 - cache["hidden"] ** 2)
        grads["W1"] = grad_pre1.T @ cache["X"]
        grads["b1"] = grad_pre1.sum(axis=0)
    return grads


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    learning_rate: float,
    momentum: float = 0.9,
) -> None:
    """Classic momentum update in place: v <- m v - lr g; p <- p + v.

    ``velocity`` is mutated alongside ``params`` and may start empty.
    """
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    if not (0.0 <= momentum < 1.0):
        raise ValueError("momentum must be in [0, 1)")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter block {name!r}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            velocity[name] = v
        v *= momentum
        v -= learning_rate * g
        p += v


def save_checkpoint(path, model: EmbeddingModel, head: ClassifierHead) -> None:
    d_hidden = model.W1.shape[0] if model.W1 is not None else 0
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC,
        1,
        model.d_in,
        d_hidden,
        model.d_out,
        head.n_classes,
        1 if model.normalize else 0,
    )
    arrays = []
    if model.W1 is not None:
        arrays += [model.W1, model.b1]
    arrays += [model.W, model.b, head.V, head.c0]
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EmbeddingModel, ClassifierHead]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(
            f"truncated header in {path}: expected {_CKPT_HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, d_in, d_hidden, d_out, n_classes, norm_flag = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic at byte 0 in {path}: {magic!r}")
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    d_mid = d_hidden if d_hidden > 0 else d_in
    shapes = []
    if d_hidden > 0:
        shapes += [("W1", (d_hidden, d_in)), ("b1", (d_hidden,))]
    shapes += [("W", (d_out, d_mid)), ("b", (d_out,)), ("V", (n_classes, d_out)), ("c0", (n_classes,))]
    offset = _CKPT_HEADER.size
    arrays = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        nbytes = count * 8
        if len(raw) - offset < nbytes:
            raise ValueError(
                f"truncated {name} in {path}: expected {nbytes} bytes at offset "
                f"{offset}, got {len(raw) - offset}"
            )
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"trailing data in {path} at byte {offset}")
    model = EmbeddingModel(
        W=arrays["W"],
        b=arrays["b"],
        normalize=bool(norm_flag),
        W1=arrays.get("W1"),
        b1=arrays.get("b1"),
    )
    head = ClassifierHead(V=arrays["V"], c0=arrays["c0"])
    return model, head
