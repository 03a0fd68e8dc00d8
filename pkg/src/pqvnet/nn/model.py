"""Layer-chain model: construction, initialization, forward/backward, checkpoints.

The default classifier mirrors the screening architecture: three
conv/pool/relu stages (9x9x20, 7x7x40, 5x5x80), a flatten, a 250-unit dense
stage with relu and 20% dropout, and a 2-way dense + softmax head.  Applied
to 162x162x3 inputs this yields layer parameter counts
4,880 / 39,240 / 80,080 / 8,000,250 / 502 (8,124,952 total).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import layers
from .loss import LossConfig, loss as loss_fn, weight_decay_grads


class ModelError(Exception):
    """Chain construction or shape-propagation failure."""


class CheckpointError(Exception):
    """Checkpoint (de)serialization failure."""


# ---------------------------------------------------------------------------
# layer chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    kernel: int
    filters: int


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.2


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Union[Conv, MaxPool, Relu, Flatten, Dense, Dropout, Softmax]


def classifier_chain(
    kernels: tuple[int, ...] = (9, 7, 5),
    filters: tuple[int, ...] = (20, 40, 80),
    dense_units: int = 250,
    n_classes: int = 2,
    dropout_rate: float = 0.2,
) -> tuple[LayerSpec, ...]:
    """Conv/pool/relu stages followed by dense-relu-dropout and a softmax head."""
    if len(kernels) != len(filters):
        raise ModelError("kernels and filters must pair up")
    chain: list[LayerSpec] = []
    for k, f in zip(kernels, filters):
        chain += [Conv(k, f), MaxPool(), Relu()]
    chain += [Flatten(), Dense(dense_units), Relu(), Dropout(dropout_rate), Dense(n_classes), Softmax()]
    return tuple(chain)


def layer_shapes(chain: Sequence[LayerSpec], input_shape: tuple[int, int, int]) -> list[tuple[int, ...]]:
    """Propagate per-sample shapes through the chain, validating as it goes."""
    shape: tuple[int, ...] = tuple(input_shape)
    out = []
    for i, spec in enumerate(chain):
        if isinstance(spec, Conv):
            if len(shape) != 3:
                raise ModelError(f"layer {i}: conv needs (h, w, c) input, got {shape}")
            if spec.kernel % 2 == 0 or spec.kernel < 1:
                raise ModelError(f"layer {i}: conv kernel must be odd and positive")
            shape = (shape[0], shape[1], spec.filters)
        elif isinstance(spec, MaxPool):
            if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                raise ModelError(f"layer {i}: cannot pool shape {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Dense):
            if len(shape) != 1:
                raise ModelError(f"layer {i}: dense needs flattened input, got {shape}")
            shape = (spec.units,)
        elif isinstance(spec, Dropout):
            if not 0.0 <= spec.rate < 1.0:
                raise ModelError(f"layer {i}: dropout rate out of range")
        elif isinstance(spec, (Relu, Softmax)):
            pass
        else:
            raise ModelError(f"layer {i}: unknown spec {spec!r}")
        out.append(shape)
    if not chain or not isinstance(chain[-1], Softmax):
        raise ModelError("chain must end in a softmax head")
    return out


def parameter_counts(chain: Sequence[LayerSpec], input_shape: tuple[int, int, int]) -> list[int]:
    """Trainable parameter count per layer (zero for parameterless layers)."""
    shapes = [tuple(input_shape)] + layer_shapes(chain, input_shape)
    counts = []
    for spec, prev in zip(chain, shapes):
        if isinstance(spec, Conv):
            counts.append(spec.kernel * spec.kernel * prev[2] * spec.filters + spec.filters)
        elif isinstance(spec, Dense):
            counts.append(prev[0] * spec.units + spec.units)
        else:
            counts.append(0)
    return counts


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    m: np.ndarray  # Adam first moment
    v: np.ndarray  # Adam second moment
    is_weight: bool  # True for kernels/matrices (L2-penalized), False for biases

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.name, self.value.copy(), self.m.copy(), self.v.copy(), self.is_weight)


@dataclass
class ModelParams:
    chain: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    tensors: list[ParamTensor]
    step: int = 0

    @property
    def dtype(self):
        return self.tensors[0].value.dtype if self.tensors else np.dtype(np.float32)

    def copy(self) -> "ModelParams":
        return ModelParams(self.chain, self.input_shape, [t.copy() for t in self.tensors], self.step)

    def weights(self) -> list[np.ndarray]:
        return [t.value for t in self.tensors if t.is_weight]

    def n_params(self) -> int:
        return int(sum(t.value.size for t in self.tensors))


def init_params(
    chain: Sequence[LayerSpec],
    input_shape: tuple[int, int, int],
    seed: int = 0,
    dtype=np.float32,
) -> ModelParams:
    """He-scaled uniform initialization, U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
    with zero biases.  Draws happen in chain order from one seeded generator,
    so a (chain, input_shape, seed) triple pins every tensor bit-for-bit."""
    shapes = [tuple(input_shape)] + layer_shapes(chain, input_shape)
    rng = np.random.default_rng(seed)
    tensors: list[ParamTensor] = []
    idx = 0
    for spec, prev in zip(chain, shapes):
        if isinstance(spec, Conv):
            fan_in = spec.kernel * spec.kernel * prev[2]
            wshape = (spec.kernel, spec.kernel, prev[2], spec.filters)
            bshape = (spec.filters,)
        elif isinstance(spec, Dense):
            fan_in = prev[0]
            wshape = (prev[0], spec.units)
            bshape = (spec.units,)
        else:
            continue
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=wshape).astype(dtype)
        name = f"layer{idx}"
        tensors.append(ParamTensor(f"{name}.w", w, np.zeros(wshape, dtype), np.zeros(wshape, dtype), True))
        tensors.append(ParamTensor(f"{name}.b", np.zeros(bshape, dtype), np.zeros(bshape, dtype), np.zeros(bshape, dtype), False))
        idx += 1
    return ModelParams(chain=tuple(chain), input_shape=tuple(input_shape), tensors=tensors)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _run(
    params: ModelParams,
    images: np.ndarray,
    training: bool,
    dropout_seed,
    keep_caches: bool,
):
    if images.ndim != 4 or images.shape[1:] != params.input_shape:
        raise ModelError(f"expected batch of shape (b, {params.input_shape}), got {images.shape}")
    x = np.ascontiguousarray(images, dtype=params.dtype)
    rng = np.random.default_rng(dropout_seed) if training else None
    caches: list[tuple] = []
    t = 0
    for spec in params.chain:
        if isinstance(spec, Conv):
            w, b = params.tensors[t].value, params.tensors[t + 1].value
            if keep_caches:
                caches.append(("conv", x, t))
            x = layers.conv2d_forward(x, w, b)
            t += 2
        elif isinstance(spec, MaxPool):
            if keep_caches:
                caches.append(("pool", x))
            x = layers.maxpool_forward(x)
        elif isinstance(spec, Relu):
            if keep_caches:
                caches.append(("relu", x))
            x = layers.relu_forward(x)
        elif isinstance(spec, Flatten):
            if keep_caches:
                caches.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(spec, Dense):
            w, b = params.tensors[t].value, params.tensors[t + 1].value
            if keep_caches:
                caches.append(("dense", x, t))
            x = layers.dense_forward(x, w, b)
            t += 2
        elif isinstance(spec, Dropout):
            if training and spec.rate > 0:
                mask = layers.dropout_mask(x.shape, spec.rate, rng, dtype=x.dtype)
                if keep_caches:
                    caches.append(("dropout", mask))
                x = x * mask
            elif keep_caches:
                caches.append(("dropout", None))
        elif isinstance(spec, Softmax):
            x = layers.softmax(x)
            if keep_caches:
                caches.append(("softmax", x))
    return x, caches


def forward(params: ModelParams, images: np.ndarray, training: bool = False, dropout_seed=None) -> np.ndarray:
    """Class probabilities for a batch.  Dropout only acts when ``training``
    is set, in which case ``dropout_seed`` pins the masks."""
    probs, _ = _run(params, images, training, dropout_seed, keep_caches=False)
    return probs


def predict(probs: np.ndarray) -> np.ndarray:
    """Class indices (0 = unsafe, 1 = safe); exact ties resolve to unsafe."""
    return np.argmax(probs, axis=1)


def loss_and_gradients(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    training: bool = True,
    dropout_seed=None,
) -> tuple[float, list[np.ndarray]]:
    """Loss of one batch plus exact gradients for every parameter tensor."""
    probs, caches = _run(params, images, training, dropout_seed, keep_caches=True)
    value, grad = loss_fn(probs, np.asarray(labels, dtype=float), config, weights=params.weights())
    grads: dict[int, np.ndarray] = {}
    g = grad.astype(params.dtype, copy=False)
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "softmax":
            g = layers.softmax_backward(cache[1], g)
        elif kind == "dense":
            _, x, t = cache
            g, gw, gb = layers.dense_backward(x, params.tensors[t].value, g)
            grads[t], grads[t + 1] = gw, gb
        elif kind == "dropout":
            if cache[1] is not None:
                g = g * cache[1]
        elif kind == "flatten":
            g = g.reshape(cache[1])
        elif kind == "relu":
            g = layers.relu_backward(cache[1], g)
        elif kind == "pool":
            g = layers.maxpool_backward(cache[1], g)
        elif kind == "conv":
            _, x, t = cache
            g, gw, gb = layers.conv2d_backward(x, params.tensors[t].value, g)
            grads[t], grads[t + 1] = gw, gb
    out = [grads[i].astype(params.dtype, copy=False) for i in range(len(params.tensors))]
    if config.l2 > 0:
        decay = iter(weight_decay_grads(params.weights(), config))
        for i, tensor in enumerate(params.tensors):
            if tensor.is_weight:
                out[i] = out[i] + next(decay)
    return value, out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_step(
    params: ModelParams,
    grads: Sequence[np.ndarray],
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction.

        m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
        p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    if len(grads) != len(params.tensors):
        raise ModelError("gradient list not aligned with parameter tensors")
    if not (lr > 0 and 0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
        raise ModelError("invalid Adam hyper-parameters")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for tensor, g in zip(params.tensors, grads):
        if g.shape != tensor.value.shape:
            raise ModelError(f"gradient shape mismatch for {tensor.name}")
        g = g.astype(tensor.value.dtype, copy=False)
        tensor.m[...] = beta1 * tensor.m + (1.0 - beta1) * g
        tensor.v[...] = beta2 * tensor.v + (1.0 - beta2) * np.square(g)
        m_hat = tensor.m / c1
        v_hat = tensor.v / c2
        tensor.value[...] = tensor.value - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PQVM"
CKPT_VERSION = 1
_KIND_CODES = {Conv: 0, MaxPool: 1, Relu: 2, Flatten: 3, Dense: 4, Dropout: 5, Softmax: 6}
_DTYPE_CODES = {0: "<f4", 1: "<f8"}


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Serialize chain, parameters, Adam moments, and step counter."""
    dtype_code = 0 if params.dtype == np.float32 else 1
    dt = _DTYPE_CODES[dtype_code]
    with open(Path(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IBQ", CKPT_VERSION, dtype_code, params.step))
        fh.write(struct.pack("<III", *params.input_shape))
        fh.write(struct.pack("<I", len(params.chain)))
        for spec in params.chain:
            code = _KIND_CODES[type(spec)]
            a = getattr(spec, "kernel", getattr(spec, "units", 0))
            b = getattr(spec, "filters", 0)
            c = getattr(spec, "rate", 0.0)
            fh.write(struct.pack("<BIId", code, a, b, c))
        fh.write(struct.pack("<I", len(params.tensors)))
        for tensor in params.tensors:
            name = tensor.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", int(tensor.is_weight), tensor.value.ndim))
            fh.write(struct.pack(f"<{tensor.value.ndim}I", *tensor.value.shape))
            for arr in (tensor.value, tensor.m, tensor.v):
                fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dt)).tobytes())


def _read_exact(fh, count: int) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CheckpointError("truncated checkpoint file")
    return raw


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(Path(path), "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, dtype_code, step = struct.unpack("<IBQ", _read_exact(fh, 13))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if dtype_code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {dtype_code}")
        dt = np.dtype(_DTYPE_CODES[dtype_code])
        input_shape = struct.unpack("<III", _read_exact(fh, 12))
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4))
        chain: list[LayerSpec] = []
        for _ in range(n_layers):
            code, a, b, c = struct.unpack("<BIId", _read_exact(fh, 17))
            if code == 0:
                chain.append(Conv(kernel=a, filters=b))
            elif code == 1:
                chain.append(MaxPool())
            elif code == 2:
                chain.append(Relu())
            elif code == 3:
                chain.append(Flatten())
            elif code == 4:
                chain.append(Dense(units=a))
            elif code == 5:
                chain.append(Dropout(rate=c))
            elif code == 6:
                chain.append(Softmax())
            else:
                raise CheckpointError(f"unknown layer code {code}")
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: list[ParamTensor] = []
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode()
            is_weight, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arrs = []
            for _ in range(3):
                raw = _read_exact(fh, size * dt.itemsize)
                arrs.append(np.frombuffer(raw, dtype=dt).reshape(shape).copy())
            tensors.append(ParamTensor(name, arrs[0], arrs[1], arrs[2], bool(is_weight)))
        if fh.read(1) != b"":
            raise CheckpointError("trailing bytes after checkpoint tensors")
    params = ModelParams(chain=tuple(chain), input_shape=tuple(input_shape), tensors=tensors, step=step)
    expected = parameter_counts(params.chain, params.input_shape)
    if params.n_params() != sum(expected):
        raise CheckpointError("tensor sizes do not match the stored chain")
    return params
