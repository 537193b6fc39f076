"""The downscale-then-superresolve network: config, parameter graph,
forward/backward, and the .bpp checkpoint container.

Graph (x3 output scale, fixed): a downscaling head halves the spatial dims
(strided 3x3 conv, or space-to-depth / Haar DWT followed by a 1x1 conv),
a trunk of residual blocks runs at half resolution with a constant channel
width, and a tail conv expands to 3 * 6^2 channels consumed by a x6
depth-to-space. Activation follows every conv except the last conv of each
residual block (which is added to the block input pre-activation, with one
activation after the add) and the tail.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .errors import ConfigError, FormatError, ShapeError

DS_KINDS = ("strided_conv", "space_to_depth", "haar_dwt")
ACT_KINDS = ("relu", "leaky_relu")

_MAGIC = b"BPP1"
_VERSION = 1


@dataclass
class ModelConfig:
    ch: int = 32
    m: int = 2
    R: int = 1
    ds_kind: str = "strided_conv"
    act: str = "leaky_relu"
    bias: bool = True
    lrelu_slope: float = 0.1
    net_scale: int = 3
    down_factor: int = 2

    @property
    def up_factor(self) -> int:
        return self.net_scale * self.down_factor

    def validate(self) -> "ModelConfig":
        if self.ch < 1 or self.m < 1 or self.R < 1:
            raise ConfigError(f"ch, m, R must all be >= 1, got {self.ch}, {self.m}, {self.R}")
        if self.ds_kind not in DS_KINDS:
            raise ConfigError(f"ds_kind must be one of {DS_KINDS}, got {self.ds_kind!r}")
        if self.act not in ACT_KINDS:
            raise ConfigError(f"act must be one of {ACT_KINDS}, got {self.act!r}")
        if self.net_scale != 3 or self.down_factor != 2:
            raise ConfigError("net_scale=3 and down_factor=2 are fixed")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


def layer_inventory(config: ModelConfig) -> dict[str, tuple]:
    """Layer name -> (Cout, Cin, k, stride, padding) for a config.

    Order is graph order: head, block convs, tail. This is the canonical
    inventory checkpoints are validated against.
    """
    inv: dict[str, tuple] = {}
    if config.ds_kind == "strided_conv":
        inv["ds"] = (config.ch, 3, 3, 2, 1)
    else:
        # S2D(2) / Haar both expand 3 channels to 12 at half resolution
        inv["ds"] = (config.ch, 12, 1, 1, 0)
    for r in range(config.R):
        for i in range(config.m):
            inv[f"block{r}.conv{i}"] = (config.ch, config.ch, 3, 1, 1)
    inv["tail"] = (3 * config.up_factor**2, config.ch, 3, 1, 1)
    return inv


class Model:
    """An instantiated parameter graph. Immutable during forward; training
    and pruning mutate/replace layers under exclusive access."""

    def __init__(self, config: ModelConfig, layers: dict[str, T.ConvParams]):
        self.config = config
        self.layers = layers

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "Model":
        """Kaiming-uniform (fan-in) initialization, deterministic per seed."""
        config.validate()
        rng = np.random.default_rng(seed)
        if config.act == "leaky_relu":
            gain = float(np.sqrt(2.0 / (1.0 + config.lrelu_slope**2)))
        else:
            gain = float(np.sqrt(2.0))
        layers: dict[str, T.ConvParams] = {}
        for name, (cout, cin, k, stride, pad) in layer_inventory(config).items():
            fan_in = cin * k * k
            bound = gain * np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
            b = np.zeros(cout, dtype=np.float32) if config.bias else None
            layers[name] = T.ConvParams(w, b, stride, pad)
        return cls(config, layers)

    def copy(self) -> "Model":
        return Model(
            dataclasses.replace(self.config),
            {name: p.copy() for name, p in self.layers.items()},
        )

    def num_params(self) -> int:
        total = 0
        for p in self.layers.values():
            total += p.weight.size
            if p.bias is not None:
                total += p.bias.size
        return total

    # -- forward / backward ------------------------------------------------

    def _act(self, x):
        return T.activation(x, self.config.act, self.config.lrelu_slope)

    def _act_grad(self, x):
        return T.activation_grad(x, self.config.act, self.config.lrelu_slope)

    def forward(self, x: np.ndarray, train_mode: bool = False):
        """Run the network on (N, 3, H, W) input in [0, 1]; H, W must be even.

        Returns the (N, 3, 3H, 3W) output, clamped to [0, 1] in eval mode.
        With train_mode=True, returns (output, cache) where the cache feeds
        `backward`.
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 2 != 0 or x.shape[3] % 2 != 0:
            raise ShapeError(f"input spatial dims {x.shape[2:]} must be even")
        cfg = self.config
        cache: dict = {}

        if cfg.ds_kind == "space_to_depth":
            head_in = T.space_to_depth(x, 2)
        elif cfg.ds_kind == "haar_dwt":
            head_in = T.haar_dwt_down(x)
        else:
            head_in = x
        head_z = T.conv2d_forward(head_in, self.layers["ds"])
        h = self._act(head_z)
        if train_mode:
            cache["head_in"] = head_in
            cache["head_z"] = head_z

        for r in range(cfg.R):
            block_in = h
            t = block_in
            for i in range(cfg.m - 1):
                conv_in = t
                z = T.conv2d_forward(conv_in, self.layers[f"block{r}.conv{i}"])
                t = self._act(z)
                if train_mode:
                    cache[f"b{r}c{i}_in"] = conv_in
                    cache[f"b{r}c{i}_z"] = z
            last = cfg.m - 1
            z = T.conv2d_forward(t, self.layers[f"block{r}.conv{last}"])
            s = block_in + z
            h = self._act(s)
            if train_mode:
                cache[f"b{r}c{last}_in"] = t
                cache[f"b{r}_sum"] = s

        tail_z = T.conv2d_forward(h, self.layers["tail"])
        y = T.depth_to_space(tail_z, cfg.up_factor)
        if train_mode:
            cache["tail_in"] = h
            return y, cache
        return np.clip(y, 0.0, 1.0)

    def backward(self, cache: dict, grad_y: np.ndarray) -> dict[str, tuple]:
        """Parameter gradients for a forward pass cached in train mode.

        Returns layer name -> (grad_weight, grad_bias-or-None).
        """
        cfg = self.config
        grads: dict[str, tuple] = {}

        d_tail_z = T.space_to_depth(grad_y, cfg.up_factor)
        d_h, gw, gb = T.conv2d_backward(cache["tail_in"], self.layers["tail"], d_tail_z)
        grads["tail"] = (gw, gb)

        for r in reversed(range(cfg.R)):
            d_sum = d_h * self._act_grad(cache[f"b{r}_sum"])
            last = cfg.m - 1
            d_t, gw, gb = T.conv2d_backward(
                cache[f"b{r}c{last}_in"], self.layers[f"block{r}.conv{last}"], d_sum
            )
            grads[f"block{r}.conv{last}"] = (gw, gb)
            for i in reversed(range(cfg.m - 1)):
                d_z = d_t * self._act_grad(cache[f"b{r}c{i}_z"])
                d_t, gw, gb = T.conv2d_backward(
                    cache[f"b{r}c{i}_in"], self.layers[f"block{r}.conv{i}"], d_z
                )
                grads[f"block{r}.conv{i}"] = (gw, gb)
            d_h = d_t + d_sum  # conv path plus the residual skip

        d_head_z = d_h * self._act_grad(cache["head_z"])
        _, gw, gb = T.conv2d_backward(cache["head_in"], self.layers["ds"], d_head_z)
        grads["ds"] = (gw, gb)
        return grads

    # -- checkpointing -----------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self.layers.items():
            out[f"{name}.weight"] = p.weight
            if p.bias is not None:
                out[f"{name}.bias"] = p.bias
        return out

    def to_checkpoint(self, meta: dict | None = None) -> "Checkpoint":
        ckpt = Checkpoint(self.config, self.tensors(), dict(meta or {}))
        ckpt.validate()
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "Model":
        ckpt.validate()
        inv = layer_inventory(ckpt.config)
        layers: dict[str, T.ConvParams] = {}
        for name, (cout, cin, k, stride, pad) in inv.items():
            w = ckpt.tensors[f"{name}.weight"].copy()
            b = ckpt.tensors[f"{name}.bias"].copy() if ckpt.config.bias else None
            layers[name] = T.ConvParams(w, b, stride, pad)
        return cls(dataclasses.replace(ckpt.config), layers)


@dataclass
class Checkpoint:
    """Serialized model: config + named tensors + free-form JSON meta."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def validate(self) -> "Checkpoint":
        inv = layer_inventory(self.config)
        expected: dict[str, tuple] = {}
        for name, (cout, cin, k, _, _) in inv.items():
            expected[f"{name}.weight"] = (cout, cin, k, k)
            if self.config.bias:
                expected[f"{name}.bias"] = (cout,)
        if set(self.tensors) != set(expected):
            raise ConfigError(
                "tensor names do not match the config-derived inventory: "
                f"extra={sorted(set(self.tensors) - set(expected))}, "
                f"missing={sorted(set(expected) - set(self.tensors))}"
            )
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigError(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, "
                    f"inventory expects {shape}"
                )
        return self


_DTYPE_CODES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the .bpp container.

    Layout: magic "BPP1" | version u32 LE | header length u64 LE | UTF-8
    JSON header | raw little-endian tensor payloads in directory order.
    Directory offsets are relative to the start of the payload section.
    """
    entries = []
    payloads = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        dt = np.dtype(arr.dtype)
        if dt not in _DTYPE_CODES:
            raise ConfigError(f"unsupported tensor dtype {dt} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(dt.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": _DTYPE_CODES[dt],
                "dims": list(arr.shape),
                "offset": offset,
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    """Read a .bpp container; raises FormatError with the offending byte offset."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FormatError("bad magic, not a .bpp checkpoint", offset=0)
    if len(data) < 8:
        raise FormatError("truncated version field", offset=len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if len(data) < 16:
        raise FormatError("truncated header length field", offset=len(data))
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + hlen:
        raise FormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unparseable header: {e}", offset=16) from e

    try:
        config = ModelConfig.from_dict(header["config"])
        meta = header["meta"]
        directory = header["tensors"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"header missing field: {e}", offset=16) from e

    base = 16 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in directory:
        dt = _CODE_DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise FormatError(f"unknown dtype code {entry.get('dtype')!r}", offset=16)
        dims = tuple(int(d) for d in entry["dims"])
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        start = base + int(entry["offset"])
        end = start + nbytes
        if end > len(data):
            raise FormatError(
                f"truncated payload for tensor {entry['name']!r}", offset=len(data)
            )
        arr = np.frombuffer(data, dtype=dt.newbyteorder("<"), count=int(np.prod(dims, dtype=np.int64)), offset=start)
        tensors[entry["name"]] = arr.astype(dt).reshape(dims)
    return Checkpoint(config, tensors, meta)


@dataclass
class PartialLoadReport:
    copied: list[str]
    initialized: list[str]
    dropped: list[str]


def load_partial(ckpt: Checkpoint, new_config: ModelConfig, seed: int = 0):
    """Build a model for new_config, copying every checkpoint tensor whose
    name and shape match; everything else keeps its fresh initialization.

    Mismatches are reported, never raised. Returns (model, report).
    """
    model = Model.build(new_config, seed)
    own = model.tensors()
    copied, initialized = [], []
    for name in own:
        src = ckpt.tensors.get(name)
        if src is not None and src.shape == own[name].shape:
            layer, kind = name.rsplit(".", 1)
            if kind == "weight":
                model.layers[layer].weight = src.astype(np.float32).copy()
            else:
                model.layers[layer].bias = src.astype(np.float32).copy()
            copied.append(name)
        else:
            initialized.append(name)
    dropped = [n for n in ckpt.tensors if n not in copied]
    return model, PartialLoadReport(copied, initialized, dropped)
