"""U-Net built on the primitives in :mod:`leishseg.tensor`.

Topology for ``depth`` pooling stages and ``base_filters`` channels at the top:

* contracting level i (0..depth-1): two 3x3 conv+ReLU with base*2**i filters,
  then 2x2 max pooling;
* bottom: two 3x3 conv+ReLU with base*2**depth filters;
* expanding level i (depth-1..0): nearest 2x upsample, 2x2 conv+ReLU down to
  base*2**i filters, concatenation [skip, up], two 3x3 conv+ReLU;
* a 1x1 head to ``num_classes`` followed by a channel softmax.

That is 2*depth + 2 + 3*depth + 1 = 5*depth + 3 conv layers (23 for depth 4).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    ParamTensor,
    ShapeError,
    adam_step,
    concat_channels,
    concat_channels_backward,
    conv2d_backward,
    conv2d_forward,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
    upsample2x_nearest,
    upsample2x_nearest_backward,
)

CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    """The activation cache was produced before the parameters last changed."""


@dataclass
class UNetConfig:
    depth: int = 2
    base_filters: int = 8
    in_channels: int = 3
    num_classes: int = 7
    seed: int = 0
    dtype: str = "float64"
    # fixed affine map applied to [0, 1] RGB before the first conv
    input_shift: float = 0.5
    input_scale: float = 4.0

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def full_size(cls, seed: int = 0) -> "UNetConfig":
        return cls(depth=4, base_filters=64, seed=seed)

    def width(self, level: int) -> int:
        return self.base_filters * 2 ** level


@dataclass
class ConvLayer:
    name: str
    kernel: ParamTensor
    bias: ParamTensor
    relu: bool = True

    @property
    def padding(self) -> str:
        return "same"

    def params(self):
        return (self.kernel, self.bias)


@dataclass
class UNetParams:
    config: UNetConfig
    layers: list[ConvLayer]
    version: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {layer.name: layer for layer in self.layers}
        expected = 5 * self.config.depth + 3
        if len(self.layers) != expected:
            raise ValueError(f"U-Net of depth {self.config.depth} needs {expected} conv layers, got {len(self.layers)}")

    def __getitem__(self, name: str) -> ConvLayer:
        return self._index[name]

    @property
    def num_conv_layers(self) -> int:
        return len(self.layers)

    def tensors(self):
        for layer in self.layers:
            yield f"{layer.name}.kernel", layer.kernel
            yield f"{layer.name}.bias", layer.bias

    def zero_grad(self) -> None:
        for _, p in self.tensors():
            p.zero_grad()

    def adam_step(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, strict=False) -> None:
        for _, p in self.tensors():
            adam_step(p, lr, beta1, beta2, eps, strict=strict)
        self.version += 1

    def num_parameters(self) -> int:
        return sum(p.value.size for _, p in self.tensors())


def layer_specs(config: UNetConfig) -> list[tuple[str, int, int, int, bool]]:
    """(name, in_channels, out_channels, kernel_size, relu) for every conv, in forward order."""
    d = config.depth
    specs = []
    c_in = config.in_channels
    for i in range(d):
        w = config.width(i)
        specs += [(f"enc{i}_a", c_in, w, 3, True), (f"enc{i}_b", w, w, 3, True)]
        c_in = w
    w = config.width(d)
    specs += [("bottom_a", c_in, w, 3, True), ("bottom_b", w, w, 3, True)]
    for i in reversed(range(d)):
        w = config.width(i)
        specs += [
            (f"up{i}", config.width(i + 1), w, 2, True),
            (f"dec{i}_a", 2 * w, w, 3, True),
            (f"dec{i}_b", w, w, 3, True),
        ]
    specs.append(("head", config.width(0), config.num_classes, 1, False))
    return specs


def build_unet(config: UNetConfig) -> UNetParams:
    """He-normal kernels and zero biases, drawn from one seeded stream."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    layers = []
    for name, cin, cout, k, act in layer_specs(config):
        std = np.sqrt(2.0 / (cin * k * k))
        kernel = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        layers.append(ConvLayer(name, ParamTensor(kernel), ParamTensor(np.zeros(cout, dtype=dtype)), relu=act))
    return UNetParams(config, layers)


def _check_input(params: UNetParams, x: np.ndarray) -> None:
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
    f = 2 ** cfg.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by 2**depth = {f}")


def _conv(layer: ConvLayer, x, cache):
    out = conv2d_forward(x, layer.kernel.value, layer.bias.value, layer.padding)
    if layer.relu:
        out = relu(out)
    if cache is not None:
        cache["acts"][layer.name] = (x, out)
    return out


def forward(params: UNetParams, x: np.ndarray, training: bool = True):
    """Run the network. Returns (probabilities N x C x H x W, cache).

    The activation cache needed by :func:`backward` is only kept when
    ``training`` is true; otherwise the second element is ``None``.
    """
    _check_input(params, x)
    cache = {"version": params.version, "acts": {}, "pool": {}} if training else None
    probs = _run(params, x, cache)
    if cache is not None:
        cache["probs"] = probs
    return probs, cache


def _run(params: UNetParams, x: np.ndarray, cache) -> np.ndarray:
    cfg = params.config
    h = (np.asarray(x, dtype=cfg.dtype) - cfg.input_shift) * cfg.input_scale
    skips = []
    for i in range(cfg.depth):
        h = _conv(params[f"enc{i}_a"], h, cache)
        h = _conv(params[f"enc{i}_b"], h, cache)
        skips.append(h)
        h, idx = maxpool2x2(h)
        if cache is not None:
            cache["pool"][i] = (idx, skips[-1].shape)
    h = _conv(params["bottom_a"], h, cache)
    h = _conv(params["bottom_b"], h, cache)
    for i in reversed(range(cfg.depth)):
        h = _conv(params[f"up{i}"], upsample2x_nearest(h), cache)
        h = concat_channels(skips[i], h)
        h = _conv(params[f"dec{i}_a"], h, cache)
        h = _conv(params[f"dec{i}_b"], h, cache)
    return softmax_channels(_conv(params["head"], h, cache))


def _conv_back(layer: ConvLayer, g, cache):
    x, out = cache["acts"][layer.name]
    if layer.relu:
        g = relu_backward(g, out)
    gx, gk, gb = conv2d_backward(g, x, layer.kernel.value, layer.padding)
    layer.kernel.grad[...] = gk
    layer.bias.grad[...] = gb
    return gx


def backward(params: UNetParams, cache: dict, grad_probs: np.ndarray) -> None:
    """Write d(loss)/d(param) into every layer's ``grad`` buffer (overwriting)."""
    if cache is None:
        raise ValueError("backward needs the cache from forward(..., training=True)")
    if cache["version"] != params.version:
        raise StaleCacheError("parameters changed since this cache was produced")
    cfg = params.config
    probs = cache["probs"]
    if grad_probs.shape != probs.shape:
        raise ShapeError(f"grad shape {grad_probs.shape} != output shape {probs.shape}")

    g = softmax_channels_backward(grad_probs, probs)
    g = _conv_back(params["head"], g, cache)
    skip_grads = {}
    for i in range(cfg.depth):
        g = _conv_back(params[f"dec{i}_b"], g, cache)
        g = _conv_back(params[f"dec{i}_a"], g, cache)
        g_skip, g = concat_channels_backward(g, cfg.width(i))
        skip_grads[i] = g_skip
        g = _conv_back(params[f"up{i}"], g, cache)
        g = upsample2x_nearest_backward(g)
    g = _conv_back(params["bottom_b"], g, cache)
    g = _conv_back(params["bottom_a"], g, cache)
    for i in reversed(range(cfg.depth)):
        idx, shape = cache["pool"][i]
        g = maxpool2x2_backward(g, idx, shape) + skip_grads[i]
        g = _conv_back(params[f"enc{i}_b"], g, cache)
        g = _conv_back(params[f"enc{i}_a"], g, cache)


def predict_proba(params: UNetParams, image: np.ndarray) -> np.ndarray:
    """Probabilities for an N x 3 x H x W batch or a single 3 x H x W image."""
    x = image[None] if image.ndim == 3 else image
    _check_input(params, x)
    probs = _run(params, x, None)
    return probs[0] if image.ndim == 3 else probs


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the channel axis (axis -3); ties go to the lowest index."""
    return np.argmax(probs, axis=-3).astype(np.uint8)


def predict_labelmap(params: UNetParams, image: np.ndarray) -> np.ndarray:
    """H x W label map for a 3 x H x W or 1 x 3 x H x W image."""
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ShapeError("predict_labelmap takes a single image")
        image = image[0]
    return argmax_labels(predict_proba(params, image))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, params: UNetParams, meta: dict | None = None) -> None:
    """Write config header, parameter arrays and Adam state to a ``.npz`` file."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "version": params.version,
        "meta": meta or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for name, p in params.tensors():
        arrays[f"{name}/value"] = p.value
        arrays[f"{name}/m"] = p.m
        arrays[f"{name}/v"] = p.v
        arrays[f"{name}/step"] = np.array(p.step_count, dtype=np.int64)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[UNetParams, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')!r}")
        params = build_unet(UNetConfig(**header["config"]))
        for name, p in params.tensors():
            p.value[...] = data[f"{name}/value"]
            p.m[...] = data[f"{name}/m"]
            p.v[...] = data[f"{name}/v"]
            p.step_count = int(data[f"{name}/step"])
    params.version = header["version"]
    return params, header["meta"]
