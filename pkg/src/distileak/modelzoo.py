"""Registry of the four desk-scale architectures, with layer taps.

The registry is closed-world: exactly four ids, in a fixed order, because
the architecture-inference label space is built on their indices. Models
carry their weights as one flat vector; ``flatten``/``unflatten`` round-trip
exactly.

Checkpoint file layout (little endian): arch index u8, activation u8,
H u16, W u16, Cin u16, C u16, m u64, seed u64, then m float64 weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tape import Value, as_value, conv2d, matmul, relu, reshape, tanh, transpose

ARCHITECTURES = ("mlp_s", "mlp_d", "cnn_s", "cnn_d")
ACTIVATIONS = ("relu", "tanh")

_CKPT_HEADER = struct.Struct("<BBHHHHQQ")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv"
    fan_in: int
    fan_out: int
    kernel: int = 0


@dataclass(frozen=True)
class ModelSpec:
    arch_id: str
    layers: tuple
    input_dims: tuple  # (H, W, Cin)
    classes: int
    activation: str = "relu"

    @property
    def param_count(self) -> int:
        total = 0
        for layer in self.layers:
            if layer.kind == "dense":
                total += layer.fan_in * layer.fan_out + layer.fan_out
            else:
                total += layer.fan_out * layer.fan_in * layer.kernel ** 2 + layer.fan_out
        return total


@dataclass
class ModelState:
    spec: ModelSpec
    weights: np.ndarray  # flat, length spec.param_count
    seed: int


@dataclass
class LayerTapOutput:
    """Per-layer outputs plus the final logits (the last entry repeats them)."""

    entries: list
    logits: np.ndarray


def make_spec(arch_id: str, input_dims, classes: int, activation: str = "relu") -> ModelSpec:
    h, w, cin = input_dims
    m = h * w * cin
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if arch_id == "mlp_s":
        layers = (LayerSpec("dense", m, 64), LayerSpec("dense", 64, classes))
    elif arch_id == "mlp_d":
        layers = (
            LayerSpec("dense", m, 128),
            LayerSpec("dense", 128, 64),
            LayerSpec("dense", 64, classes),
        )
    elif arch_id == "cnn_s":
        layers = (LayerSpec("conv", cin, 8, 3), LayerSpec("dense", 8 * h * w, classes))
    elif arch_id == "cnn_d":
        layers = (
            LayerSpec("conv", cin, 8, 3),
            LayerSpec("conv", 8, 16, 3),
            LayerSpec("dense", 16 * h * w, classes),
        )
    else:
        raise ValueError(f"unknown architecture {arch_id!r}")
    return ModelSpec(arch_id, layers, tuple(input_dims), classes, activation)


def _param_shapes(spec: ModelSpec) -> list:
    shapes = []
    for layer in spec.layers:
        if layer.kind == "dense":
            shapes.append((layer.fan_in, layer.fan_out))
        else:
            shapes.append((layer.fan_out, layer.fan_in, layer.kernel, layer.kernel))
        shapes.append((layer.fan_out,))
    return shapes


def init_params(spec: ModelSpec, seed: int) -> list:
    """He-uniform weights, zero biases, from one seeded stream."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.layers:
        if layer.kind == "dense":
            fan_in = layer.fan_in
            shape = (layer.fan_in, layer.fan_out)
        else:
            fan_in = layer.fan_in * layer.kernel ** 2
            shape = (layer.fan_out, layer.fan_in, layer.kernel, layer.kernel)
        limit = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=shape))
        params.append(np.zeros(layer.fan_out))
    return params


def flatten(params) -> np.ndarray:
    return np.concatenate([np.asarray(p.data if isinstance(p, Value) else p).reshape(-1) for p in params])


def unflatten(spec: ModelSpec, flat: np.ndarray) -> list:
    if flat.size != spec.param_count:
        raise ValueError(f"flat vector length {flat.size} != parameter count {spec.param_count}")
    params = []
    offset = 0
    for shape in _param_shapes(spec):
        n = int(np.prod(shape))
        params.append(flat[offset : offset + n].reshape(shape).copy())
        offset += n
    return params


def build(arch_id: str, input_dims, classes: int, seed: int, activation: str = "relu") -> ModelState:
    spec = make_spec(arch_id, input_dims, classes, activation)
    return ModelState(spec, flatten(init_params(spec, seed)), seed)


def params_of(state: ModelState) -> list:
    return unflatten(state.spec, state.weights)


def as_values(params) -> list:
    return [p if isinstance(p, Value) else Value(p) for p in params]


def _activate(spec: ModelSpec, x: Value) -> Value:
    return tanh(x) if spec.activation == "tanh" else relu(x)


def forward(spec: ModelSpec, params, x, taps: list | None = None) -> Value:
    """Logits for a flat (N, M) batch; optionally collects per-layer outputs."""
    params = as_values(params)
    x = as_value(x)
    if x.data.ndim != 2 or x.shape[1] != int(np.prod(spec.input_dims)):
        raise ValueError(f"input shape {x.shape} does not match dims {spec.input_dims}")
    n = x.shape[0]
    h, w, cin = spec.input_dims
    out = x
    spatial = any(layer.kind == "conv" for layer in spec.layers)
    if spatial:
        out = transpose(reshape(out, (n, h, w, cin)), (0, 3, 1, 2))
    for idx, layer in enumerate(spec.layers):
        wgt, bias = params[2 * idx], params[2 * idx + 1]
        last = idx == len(spec.layers) - 1
        if layer.kind == "conv":
            out = conv2d(out, wgt, bias, pad=layer.kernel // 2)
        else:
            if out.data.ndim != 2:
                out = reshape(out, (n, -1))
            out = matmul(out, wgt) + bias
        if not last:
            out = _activate(spec, out)
        if taps is not None:
            taps.append(out)
    return out


def forward_with_taps(state: ModelState, x) -> LayerTapOutput:
    """All per-layer outputs plus logits; logits match a tap-free pass exactly."""
    taps: list = []
    logits = forward(state.spec, params_of(state), x, taps=taps)
    entries = [t.data for t in taps] + [logits.data]
    return LayerTapOutput(entries=entries, logits=logits.data)


def state_forward(state: ModelState, x) -> np.ndarray:
    return forward(state.spec, params_of(state), x).data


def penultimate_features(state: ModelState, x) -> np.ndarray:
    """Output of the layer feeding the classifier, flattened per sample."""
    taps = forward_with_taps(state, x)
    feats = taps.entries[len(state.spec.layers) - 2]
    return feats.reshape(feats.shape[0], -1)


def save_checkpoint(state: ModelState, path) -> None:
    spec = state.spec
    h, w, cin = spec.input_dims
    header = _CKPT_HEADER.pack(
        ARCHITECTURES.index(spec.arch_id),
        ACTIVATIONS.index(spec.activation),
        h,
        w,
        cin,
        spec.classes,
        spec.param_count,
        state.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(state.weights.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        arch_idx, act_idx, h, w, cin, classes, m, seed = _CKPT_HEADER.unpack(
            fh.read(_CKPT_HEADER.size)
        )
        spec = make_spec(ARCHITECTURES[arch_idx], (h, w, cin), classes, ACTIVATIONS[act_idx])
        if m != spec.param_count:
            raise ValueError(f"checkpoint parameter count {m} != spec {spec.param_count}")
        weights = np.frombuffer(fh.read(m * 8), dtype="<f8").astype(np.float64)
    return ModelState(spec, weights, seed)
