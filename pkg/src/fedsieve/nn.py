"""Minimal dense CNN with manual backprop: two conv blocks (conv, ReLU,
max-pool) followed by two fully connected layers, cross-entropy loss, and
Adam / plain SGD updates.

Everything is float64 numpy.  Parameters are value objects: every update
returns fresh arrays and nothing here keeps hidden state, so concurrent
use on disjoint parameter sets is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RejectedInputError

PARAM_KEYS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the network; defaults fit 28x28 grayscale digits 0-5."""

    image_size: int = 28
    in_channels: int = 1
    conv1_channels: int = 8
    conv2_channels: int = 16
    kernel_size: int = 3
    pool_size: int = 2
    hidden_units: int = 64
    n_classes: int = 6
    # Which fully connected weight matrices feed the server-side defense.
    fc_slice_layers: tuple[str, ...] = ("fc2",)

    def __post_init__(self) -> None:
        for name in ("image_size", "in_channels", "conv1_channels", "conv2_channels",
                     "kernel_size", "pool_size", "hidden_units", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model config: {name} must be >= 1")
        if not self.fc_slice_layers or any(l not in ("fc1", "fc2") for l in self.fc_slice_layers):
            raise ConfigError("model config: fc_slice_layers must be a subset of ('fc1', 'fc2')")
        if self.pool2_out < 1:
            raise ConfigError(
                f"model config: image_size {self.image_size} too small for two "
                f"conv({self.kernel_size})+pool({self.pool_size}) blocks")

    @property
    def conv1_out(self) -> int:
        return self.image_size - self.kernel_size + 1

    @property
    def pool1_out(self) -> int:
        return self.conv1_out // self.pool_size

    @property
    def conv2_out(self) -> int:
        return self.pool1_out - self.kernel_size + 1

    @property
    def pool2_out(self) -> int:
        return self.conv2_out // self.pool_size

    @property
    def flat_size(self) -> int:
        return self.conv2_channels * self.pool2_out * self.pool2_out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel_size
        return {
            "conv1_w": (self.conv1_channels, self.in_channels, k, k),
            "conv1_b": (self.conv1_channels,),
            "conv2_w": (self.conv2_channels, self.conv1_channels, k, k),
            "conv2_b": (self.conv2_channels,),
            "fc1_w": (self.flat_size, self.hidden_units),
            "fc1_b": (self.hidden_units,),
            "fc2_w": (self.hidden_units, self.n_classes),
            "fc2_b": (self.n_classes,),
        }


@dataclass(eq=False)
class ModelParams:
    """Named parameter tensors in canonical (layer, then row-major) order."""

    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if tuple(self.tensors) != PARAM_KEYS:
            raise RejectedInputError(
                f"params must hold exactly {PARAM_KEYS}, got {tuple(self.tensors)}")

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of two parameter sets."""
    return all(
        a[k].shape == b[k].shape and np.array_equal(a[k], b[k], equal_nan=True)
        for k in PARAM_KEYS
    )


def zeros_params(config: ModelConfig) -> ModelParams:
    return ModelParams({k: np.zeros(s) for k, s in config.param_shapes().items()})


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per layer, biases included."""
    k = config.kernel_size
    fan_in = {
        "conv1": config.in_channels * k * k,
        "conv2": config.conv1_channels * k * k,
        "fc1": config.flat_size,
        "fc2": config.hidden_units,
    }
    tensors = {}
    for key, shape in config.param_shapes().items():
        bound = 1.0 / np.sqrt(fan_in[key.split("_")[0]])
        tensors[key] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward / backward primitives


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """Strided (B, C, oh, ow, k, k) view of all kxk patches; no copy."""
    b, c, h, w = x.shape
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, h - k + 1, w - k + 1, k, k), (s0, s1, s2, s3, s2, s3))


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    v = _windows(x, w.shape[2])
    out = np.tensordot(v, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv_grad_w(x: np.ndarray, gout: np.ndarray, k: int) -> np.ndarray:
    v = _windows(x, k)
    # (O, C, k, k) = sum over batch and spatial positions
    return np.tensordot(gout, v, axes=([0, 2, 3], [0, 2, 3]))


def _conv_grad_x(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Full correlation of the padded output gradient with the flipped kernel.
    k = w.shape[2]
    gp = np.pad(gout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    v = _windows(gp, k)
    w_flip = w[:, :, ::-1, ::-1]
    gx = np.tensordot(v, w_flip, axes=([1, 4, 5], [0, 2, 3]))
    return gx.transpose(0, 3, 1, 2)


def _maxpool_forward(x: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = x.shape
    oh, ow = h // p, w // p
    win = (x[:, :, :oh * p, :ow * p]
           .reshape(b, c, oh, p, ow, p)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(b, c, oh, ow, p * p))
    idx = win.argmax(axis=-1)  # ties go to the first maximum
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(gout: np.ndarray, idx: np.ndarray,
                      x_shape: tuple[int, ...], p: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh, ow = gout.shape[2], gout.shape[3]
    gwin = np.zeros((b, c, oh, ow, p * p))
    np.put_along_axis(gwin, idx[..., None], gout[..., None], axis=-1)
    gx = np.zeros(x_shape)
    gx[:, :, :oh * p, :ow * p] = (gwin
                                  .reshape(b, c, oh, ow, p, p)
                                  .transpose(0, 1, 2, 4, 3, 5)
                                  .reshape(b, c, oh * p, ow * p))
    return gx


def _check_batch(config: ModelConfig, batch: np.ndarray) -> None:
    want = (config.in_channels, config.image_size, config.image_size)
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise RejectedInputError(
            f"batch shape {batch.shape} does not match (B, {want[0]}, {want[1]}, {want[2]})")


def _forward_cached(params: ModelParams, batch: np.ndarray,
                    config: ModelConfig) -> tuple[np.ndarray, dict]:
    _check_batch(config, batch)
    p = config.pool_size
    z1 = _conv_forward(batch, params["conv1_w"], params["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _maxpool_forward(a1, p)
    z2 = _conv_forward(p1, params["conv2_w"], params["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    p2, idx2 = _maxpool_forward(a2, p)
    flat = p2.reshape(batch.shape[0], -1)
    zf1 = flat @ params["fc1_w"] + params["fc1_b"]
    h = np.maximum(zf1, 0.0)
    logits = h @ params["fc2_w"] + params["fc2_b"]
    cache = dict(batch=batch, z1=z1, a1=a1, idx1=idx1, p1=p1,
                 z2=z2, a2=a2, idx2=idx2, p2=p2, flat=flat, zf1=zf1, h=h)
    return logits, cache


def forward(params: ModelParams, batch: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Logits of shape (B, n_classes) for a (B, C, H, W) batch in [0, 1]."""
    return _forward_cached(params, batch, config)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise RejectedInputError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -log softmax(logits)[label] over the batch."""
    labels = _check_labels(labels, logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(logits.shape[0]), labels]
    return float(np.mean(lse - picked))


def backward(params: ModelParams, batch: np.ndarray, labels: np.ndarray,
             config: ModelConfig) -> ModelParams:
    """Gradient of mean cross-entropy w.r.t. every parameter."""
    labels = _check_labels(np.asarray(labels), config.n_classes)
    logits, c = _forward_cached(params, batch, config)
    b = batch.shape[0]
    p = config.pool_size

    dlogits = softmax(logits)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b

    g_fc2_w = c["h"].T @ dlogits
    g_fc2_b = dlogits.sum(axis=0)
    dh = dlogits @ params["fc2_w"].T
    dzf1 = dh * (c["zf1"] > 0)

    g_fc1_w = c["flat"].T @ dzf1
    g_fc1_b = dzf1.sum(axis=0)
    dflat = dzf1 @ params["fc1_w"].T

    dp2 = dflat.reshape(c["p2"].shape)
    da2 = _maxpool_backward(dp2, c["idx2"], c["a2"].shape, p)
    dz2 = da2 * (c["z2"] > 0)

    g_conv2_w = _conv_grad_w(c["p1"], dz2, config.kernel_size)
    g_conv2_b = dz2.sum(axis=(0, 2, 3))
    dp1 = _conv_grad_x(dz2, params["conv2_w"])

    da1 = _maxpool_backward(dp1, c["idx1"], c["a1"].shape, p)
    dz1 = da1 * (c["z1"] > 0)
    g_conv1_w = _conv_grad_w(batch, dz1, config.kernel_size)
    g_conv1_b = dz1.sum(axis=(0, 2, 3))
    # No gradient below conv1: the input is data.

    return ModelParams({
        "conv1_w": g_conv1_w, "conv1_b": g_conv1_b,
        "conv2_w": g_conv2_w, "conv2_b": g_conv2_b,
        "fc1_w": g_fc1_w, "fc1_b": g_fc1_b,
        "fc2_w": g_fc2_w, "fc2_b": g_fc2_b,
    })


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam_state(config: ModelConfig, beta1: float = 0.9, beta2: float = 0.999,
                    epsilon: float = 1e-8) -> AdamState:
    shapes = config.param_shapes()
    return AdamState(
        first_moment={k: np.zeros(s) for k, s in shapes.items()},
        second_moment={k: np.zeros(s) for k, s in shapes.items()},
        step_count=0, beta1=beta1, beta2=beta2, epsilon=epsilon)


def _check_grads(params: ModelParams, grads: ModelParams) -> None:
    for k in PARAM_KEYS:
        if params[k].shape != grads[k].shape:
            raise RejectedInputError(
                f"gradient shape {grads[k].shape} != param shape {params[k].shape} for {k}")


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState,
              lr: float) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if lr <= 0:
        raise RejectedInputError(f"learning rate must be positive, got {lr}")
    _check_grads(params, grads)
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_m, new_v, new_p = {}, {}, {}
    for k in PARAM_KEYS:
        g = grads[k]
        m = b1 * state.first_moment[k] + (1 - b1) * g
        v = b2 * state.second_moment[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return ModelParams(new_p), AdamState(new_m, new_v, t, b1, b2, eps)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """Plain gradient descent step (the literal ClientUpdate rule)."""
    if lr <= 0:
        raise RejectedInputError(f"learning rate must be positive, got {lr}")
    _check_grads(params, grads)
    return ModelParams({k: params[k] - lr * grads[k] for k in PARAM_KEYS})


# ---------------------------------------------------------------------------
# canonical vector views


def flatten(params: ModelParams) -> np.ndarray:
    """Canonical flat vector: layers in PARAM_KEYS order, row-major within."""
    return np.concatenate([params[k].ravel() for k in PARAM_KEYS])


def unflatten(vector: np.ndarray, config: ModelConfig) -> ModelParams:
    shapes = config.param_shapes()
    total = sum(int(np.prod(s)) for s in shapes.values())
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (total,):
        raise RejectedInputError(f"expected flat vector of length {total}, got {vector.shape}")
    out, offset = {}, 0
    for k, s in shapes.items():
        n = int(np.prod(s))
        out[k] = vector[offset:offset + n].reshape(s).copy()
        offset += n
    return ModelParams(out)


def fc_slice(params: ModelParams, config: ModelConfig) -> np.ndarray:
    """The fully connected weight entries the defense inspects (no biases)."""
    return np.concatenate([params[f"{layer}_w"].ravel() for layer in config.fc_slice_layers])


def fc_slice_size(config: ModelConfig) -> int:
    shapes = config.param_shapes()
    return sum(int(np.prod(shapes[f"{layer}_w"])) for layer in config.fc_slice_layers)
