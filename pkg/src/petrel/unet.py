"""Valid-convolution U-Net with fixed bilinear upsampling."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from petrel import autodiff as ad

ModelParams = "OrderedDict[str, np.ndarray]"


class InfeasibleConfig(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 5
    depth: int = 4
    base_channels: int = 64
    input_size: int = 572

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def output_size(self) -> int:
        return shape_trace(self)[-1][1]

    @property
    def margin(self) -> int:
        """Pixels lost on each side between input and output."""
        return (self.input_size - self.output_size) // 2

    @property
    def alignment(self) -> int:
        """Translation step under which the network is shift-equivariant."""
        return 2 ** self.depth

    @property
    def edge_trim(self) -> int:
        """Output border rows whose values depend on where the tile edge falls.

        Bilinear upsampling clamps at feature-map borders; each expanding
        level doubles the affected border and adds one clamped row.
        """
        return 2 ** self.depth - 1

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**{k: int(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def shape_trace(config: UNetConfig) -> list[tuple[str, int, int]]:
    """Stage-by-stage (name, spatial size, channels) through the network."""
    if config.depth < 0 or config.base_channels < 1 or config.in_channels < 1:
        raise InfeasibleConfig(f"invalid config {config}")
    size = config.input_size
    trace = [("input", size, config.in_channels)]

    def conv(name: str, channels: int) -> None:
        nonlocal size
        size -= 2
        if size < 1:
            raise InfeasibleConfig(f"{name}: spatial size fell to {size} ({config})")
        trace.append((name, size, channels))

    skip_sizes = []
    for level in range(config.depth):
        ch = config.channels(level)
        conv(f"down{level}.conv1", ch)
        conv(f"down{level}.conv2", ch)
        if size % 2 or size < 4:
            raise InfeasibleConfig(f"down{level}: size {size} cannot be pooled ({config})")
        skip_sizes.append(size)
        size //= 2
        trace.append((f"down{level}.pool", size, ch))

    conv("bottom.conv1", config.channels(config.depth))
    conv("bottom.conv2", config.channels(config.depth))

    for level in reversed(range(config.depth)):
        size *= 2
        trace.append((f"up{level}.upsample", size, config.channels(level + 1)))
        if size > skip_sizes[level]:
            raise InfeasibleConfig(f"up{level}: upsampled {size} exceeds skip {skip_sizes[level]}")
        trace.append((f"up{level}.concat", size, config.channels(level) + config.channels(level + 1)))
        conv(f"up{level}.conv1", config.channels(level))
        conv(f"up{level}.conv2", config.channels(level))

    trace.append(("final", size, 1))
    return trace


def _layer_shapes(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, out_ch, in_ch, kernel) for every conv layer, in forward order."""
    layers = []
    in_ch = config.in_channels
    for level in range(config.depth):
        ch = config.channels(level)
        layers += [(f"down{level}.conv1", ch, in_ch, 3), (f"down{level}.conv2", ch, ch, 3)]
        in_ch = ch
    ch = config.channels(config.depth)
    layers += [("bottom.conv1", ch, in_ch, 3), ("bottom.conv2", ch, ch, 3)]
    for level in reversed(range(config.depth)):
        ch = config.channels(level)
        cat = ch + config.channels(level + 1)
        layers += [(f"up{level}.conv1", ch, cat, 3), (f"up{level}.conv2", ch, ch, 3)]
    layers.append(("final", 1, config.base_channels, 1))
    return layers


def init_params(config: UNetConfig, seed: int) -> "OrderedDict[str, np.ndarray]":
    """He-normal weights, zero biases. Stored as float32."""
    shape_trace(config)
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, out_ch, in_ch, k in _layer_shapes(config):
        std = np.sqrt(2.0 / (in_ch * k * k))
        params[f"{name}.weight"] = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(out_ch, dtype=np.float32)
    return params


def check_params(params, config: UNetConfig) -> None:
    expected = {}
    for name, out_ch, in_ch, k in _layer_shapes(config):
        expected[f"{name}.weight"] = (out_ch, in_ch, k, k)
        expected[f"{name}.bias"] = (out_ch,)
    if list(params) != list(expected):
        raise CheckpointError("parameter names do not match the configured architecture")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {shape}")


def as_tensors(params, requires_grad: bool = False) -> "OrderedDict[str, ad.Tensor]":
    return OrderedDict((k, ad.Tensor(v, requires_grad=requires_grad)) for k, v in params.items())


def forward_tensors(tensors, x: ad.Tensor, config: UNetConfig) -> ad.Tensor:
    """Run the network on Tensor inputs; returns sigmoid probabilities."""

    def conv(name, t):
        return ad.relu(ad.conv2d_valid(t, tensors[f"{name}.weight"], tensors[f"{name}.bias"]))

    skips = []
    h = x
    for level in range(config.depth):
        h = conv(f"down{level}.conv2", conv(f"down{level}.conv1", h))
        skips.append(h)
        h = ad.maxpool2(h)
    h = conv("bottom.conv2", conv("bottom.conv1", h))
    for level in reversed(range(config.depth)):
        h = ad.crop_concat(skips[level], ad.upsample_bilinear2(h))
        h = conv(f"up{level}.conv2", conv(f"up{level}.conv1", h))
    logits = ad.conv1x1(h, tensors["final.weight"], tensors["final.bias"])
    return ad.sigmoid(logits)


def forward(params, image, config: UNetConfig) -> np.ndarray:
    """Probability map (1, out, out) for one image, or (N, 1, out, out) for a batch."""
    image = np.asarray(image)
    if image.ndim not in (3, 4):
        raise ValueError(f"expected (C,S,S) or (N,C,S,S) input, got {image.shape}")
    c, s1, s2 = image.shape[-3:]
    if c != config.in_channels or s1 != config.input_size or s2 != config.input_size:
        raise ValueError(
            f"input {image.shape} does not match config "
            f"({config.in_channels}, {config.input_size}, {config.input_size})"
        )
    return forward_tensors(as_tensors(params), ad.Tensor(image), config).data


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params, config: UNetConfig, path) -> None:
    """Write ``{path}`` (JSON manifest) and ``{path}.bin`` (f32le payload)."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "petrel-checkpoint",
        "version": 1,
        "dtype": "f32le",
        "config": config.to_dict(),
        "payload": path.name + ".bin",
        "params": entries,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_name(path.name + ".bin").write_bytes(b"".join(blobs))


def load_checkpoint(path, config: UNetConfig | None = None):
    """Return (params, config). Raises CheckpointError on mismatch or corruption."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        stored = UNetConfig.from_dict(manifest["config"])
        payload = (path.parent / manifest["payload"]).read_bytes()
        entries = manifest["params"]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if config is not None and stored != config:
        raise CheckpointError(f"checkpoint config {stored} != requested {config}")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in entries:
        end = e["offset"] + 4 * e["count"]
        if end > len(payload):
            raise CheckpointError(f"payload truncated at {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").astype(np.float32)
        params[e["name"]] = arr.reshape(e["shape"])
    if sum(4 * e["count"] for e in entries) != len(payload):
        raise CheckpointError("payload length does not match manifest")
    check_params(params, stored)
    return params, stored
