"""MiniNet with an optional saliency branch, its initialisation protocols
and the checkpoint format.

MiniNet is a desk-scale AlexNet analogue: five convolutions and three
fully connected layers, max pools after conv1, conv2 and conv5. The
saliency branch mirrors the spatial plan of the RGB branch up to the fusion
level so that its one-channel sigmoid output lines up with the RGB features
it modulates.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import layers as L
from .tensor import Node, constant, leaf

VARIANTS = ("baseline_rgb", "early_fusion", "delayed_fusion")
POOL_POSITIONS = ("before_fusion", "after_fusion")
INIT_MODES = ("none", "scratch", "pretrained")

# name, out channels, kernel, stride, padding
RGB_CONVS = (
    ("conv1", 16, 5, 2, 0),
    ("conv2", 32, 3, 1, 1),
    ("conv3", 48, 3, 1, 1),
    ("conv4", 48, 3, 1, 1),
    ("conv5", 32, 3, 1, 1),
)
POOL_AFTER = (1, 2, 5)
FC_SIZES = (256, 128)
HEAD = "fc8"
SALIENCY_HIDDEN = 8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "delayed_fusion"
    fusion_level: int = 2
    saliency_depth: int = 2
    saliency_width: float = 1.0
    skip: bool = True
    pool_position: str | None = None
    num_classes: int = 20
    height: int = 64
    width: int = 64
    init: str = "none"
    freeze_saliency: bool = False

    @property
    def uses_saliency(self) -> bool:
        return self.variant != "baseline_rgb"

    @property
    def pool(self) -> str | None:
        """Effective pool position; postponed pooling is the default."""
        if self.variant != "delayed_fusion":
            return None
        return self.pool_position or "after_fusion"

    @property
    def saliency_hidden(self) -> int:
        return max(1, int(round(SALIENCY_HIDDEN * self.saliency_width)))

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 1 <= self.fusion_level <= 5:
            raise ConfigError(f"fusion_level must be in 1..5, got {self.fusion_level}")
        if self.saliency_depth not in (2, 3):
            raise ConfigError(f"saliency_depth must be 2 or 3, got {self.saliency_depth}")
        if self.saliency_width not in (1.0, 0.75, 0.5):
            raise ConfigError(f"saliency_width must be 1.0, 0.75 or 0.5, got {self.saliency_width}")
        if self.pool_position is not None:
            if self.pool_position not in POOL_POSITIONS:
                raise ConfigError(f"unknown pool_position {self.pool_position!r}")
            if self.variant != "delayed_fusion":
                raise ConfigError(f"pool_position is meaningless for variant {self.variant}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"unknown init mode {self.init!r}; expected one of {INIT_MODES}")
        if self.init == "pretrained" and not self.uses_saliency:
            raise ConfigError("init=pretrained needs a saliency branch; use init=scratch for baseline_rgb")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if min(self.height, self.width) < 5:
            raise ConfigError("input must be at least 5x5 for conv1")

    def digest(self) -> bytes:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    provenance: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()}, dict(self.provenance))

    def count(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))


class ForwardResult(NamedTuple):
    logits: Node
    features: Node | None      # RGB features entering the modulation (or the same point for baselines)
    modulation: Node | None    # saliency-branch output
    params: dict[str, Node]
    feature_stride: int


# -- architecture plan -----------------------------------------------------

def _pool_window(h: int, w: int) -> int:
    return min(2, h, w)


def rgb_shapes(config: NetworkConfig) -> list[tuple[int, int]]:
    """Spatial size after each conv (before its pool)."""
    h, w = config.height, config.width
    sizes = []
    for i, (_, _, k, s, p) in enumerate(RGB_CONVS, start=1):
        h, w = L.conv_output_size(h, k, s, p), L.conv_output_size(w, k, s, p)
        if h < 1 or w < 1:
            raise ConfigError(f"input {config.height}x{config.width} too small for conv{i}")
        sizes.append((h, w))
        if i in POOL_AFTER:
            win = _pool_window(h, w)
            h, w = (h - win) // win + 1, (w - win) // win + 1
    return sizes


def _flat_features(config: NetworkConfig) -> int:
    h, w = rgb_shapes(config)[-1]
    win = _pool_window(h, w)
    h, w = (h - win) // win + 1, (w - win) // win + 1
    return RGB_CONVS[-1][1] * h * w


def saliency_pools(config: NetworkConfig) -> int:
    """Number of RGB max pools that precede the modulated feature map."""
    n = sum(1 for lvl in POOL_AFTER if lvl < config.fusion_level)
    if config.fusion_level in POOL_AFTER and config.pool == "before_fusion":
        n += 1
    return n


def saliency_layers(config: NetworkConfig) -> list[tuple[str, int, int, int, int, int]]:
    """(name, in, out, kernel, stride, pad) for each saliency-branch conv."""
    hid = config.saliency_hidden
    _, _, k1, s1, p1 = RGB_CONVS[0]
    out = [("sal1", 1, hid, k1, s1, p1)]
    for i in range(2, config.saliency_depth):
        out.append((f"sal{i}", hid, hid, 3, 1, 1))
    out.append((f"sal{config.saliency_depth}", hid, 1, 3, 1, 1))
    return out


def param_shapes(config: NetworkConfig) -> dict[str, tuple[tuple[int, ...], int, int]]:
    """name -> (shape, fan_in, fan_out) for every weight and bias."""
    shapes = {}
    in_ch = 4 if config.variant == "early_fusion" else 3
    for name, out_ch, k, _, _ in RGB_CONVS:
        shapes[f"{name}.w"] = ((out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k)
        shapes[f"{name}.b"] = ((out_ch,), in_ch * k * k, out_ch * k * k)
        in_ch = out_ch
    dims = [_flat_features(config), *FC_SIZES, config.num_classes]
    for i, name in enumerate(("fc6", "fc7", HEAD)):
        shapes[f"{name}.w"] = ((dims[i + 1], dims[i]), dims[i], dims[i + 1])
        shapes[f"{name}.b"] = ((dims[i + 1],), dims[i], dims[i + 1])
    if config.variant == "delayed_fusion":
        for name, ci, co, k, _, _ in saliency_layers(config):
            shapes[f"{name}.w"] = ((co, ci, k, k), ci * k * k, co * k * k)
            shapes[f"{name}.b"] = ((co,), ci * k * k, co * k * k)
    return shapes


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-parameter streams keep RGB weights independent of the saliency branch
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_param(name: str, shape, fan_in: int, fan_out: int, seed: int) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    bound = xavier_bound(fan_in, fan_out)
    return _param_rng(seed, name).uniform(-bound, bound, size=shape)


def build(config: NetworkConfig, seed: int) -> ModelState:
    """Xavier-uniform weights, zero biases, deterministic in ``seed``."""
    config.validate()
    rgb_shapes(config)
    params, prov = {}, {}
    for name, (shape, fi, fo) in param_shapes(config).items():
        params[name] = init_param(name, shape, fi, fo, seed)
        prov[name] = f"xavier:{seed}"
    return ModelState(params, prov)


def block_of(name: str) -> str:
    return name.split(".")[0]


def is_saliency_param(name: str) -> bool:
    return name.startswith("sal")


def rgb_branch_params(config: NetworkConfig) -> list[str]:
    """Parameters of the RGB convolutions up to and including the fusion level."""
    return [f"conv{i}.{p}" for i in range(1, config.fusion_level + 1) for p in ("w", "b")]


SILENT_BIAS = -1e4


def silence_saliency(state: ModelState, config: NetworkConfig) -> ModelState:
    """Copy of ``state`` whose saliency branch outputs exactly 0.

    The last branch conv gets zero weights and a bias deep in the sigmoid's
    underflow range, so the modulation factor is exactly 1 (with skip) and
    the branch receives exactly zero gradient.
    """
    if config.variant != "delayed_fusion":
        raise ConfigError("only delayed_fusion has a saliency branch to silence")
    out = state.copy()
    last = saliency_layers(config)[-1][0]
    out.params[f"{last}.w"] = np.zeros_like(out.params[f"{last}.w"])
    out.params[f"{last}.b"] = np.full_like(out.params[f"{last}.b"], SILENT_BIAS)
    return out


# -- forward ---------------------------------------------------------------

def _as_nodes(state: ModelState, trainable) -> dict[str, Node]:
    nodes = {}
    for name, value in state.params.items():
        if trainable is None or name in trainable:
            nodes[name] = leaf(value, name)
        else:
            nodes[name] = constant(value, name)
    return nodes


def _pool(x: Node) -> Node:
    h, w = x.shape[2:]
    return L.maxpool2d(x, _pool_window(h, w))


def saliency_branch(p: dict[str, Node], config: NetworkConfig, sal: Node) -> Node:
    x = sal
    specs = saliency_layers(config)
    for i, (name, _, _, _, stride, pad) in enumerate(specs):
        x = L.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride, pad)
        if i == len(specs) - 1:
            return L.sigmoid(x)
        x = L.relu(x)
        if i == 0:
            for _ in range(saliency_pools(config)):
                x = _pool(x)
    raise AssertionError("unreachable")


def forward(state: ModelState, config: NetworkConfig, images, saliency=None,
            record_fusion_input: bool = False, trainable=None) -> ForwardResult:
    """Run the network on ``images`` [N,3,H,W] (saliency [N,1,H,W] or [N,H,W]).

    ``trainable`` restricts which parameters become differentiable leaves
    (``None`` means all of them).
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (3, config.height, config.width):
        raise ConfigError(f"images of shape {list(images.shape)} do not match config {config.height}x{config.width}")
    if config.uses_saliency:
        if saliency is None:
            raise ConfigError(f"variant {config.variant} requires a saliency map")
        saliency = np.asarray(saliency)
        if saliency.ndim == 2:
            saliency = saliency[None, None]
        elif saliency.ndim == 3:
            saliency = saliency[:, None]
        if saliency.shape != (images.shape[0], 1, config.height, config.width):
            raise ConfigError(f"saliency of shape {list(saliency.shape)} does not match the images")

    p = _as_nodes(state, trainable)
    x: Node = constant(images)
    sal = constant(saliency) if config.uses_saliency else None
    if config.variant == "early_fusion":
        x = L.concat_channels(x, sal)

    features = modulation = None
    stride = 1
    fusion = config.fusion_level
    for level, (name, _, _, s, pad) in enumerate(RGB_CONVS, start=1):
        x = L.relu(L.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], s, pad))
        stride *= s
        pooled_here = level in POOL_AFTER
        if level == fusion and config.variant == "delayed_fusion":
            if pooled_here and config.pool == "before_fusion":
                stride *= _pool_window(*x.shape[2:])
                x = _pool(x)
                pooled_here = False
            features = x
            feature_stride = stride
            modulation = saliency_branch(p, config, sal)
            if modulation.shape[2:] != x.shape[2:]:
                raise AssertionError(f"fusion mismatch {modulation.shape} vs {x.shape}")
            if __debug__ and record_fusion_input:
                m = modulation.value
                assert 0.0 <= m.min() and m.max() <= 1.0, "modulation left [0,1]"
            x = L.modulate(x, modulation, config.skip)
        elif level == fusion:
            features = x
            feature_stride = stride
        if pooled_here:
            stride *= _pool_window(*x.shape[2:])
            x = _pool(x)

    x = L.flatten(x)
    x = L.relu(L.fully_connected(x, p["fc6.w"], p["fc6.b"]))
    x = L.relu(L.fully_connected(x, p["fc7.w"], p["fc7.b"]))
    logits = L.fully_connected(x, p[f"{HEAD}.w"], p[f"{HEAD}.b"])
    return ForwardResult(
        logits,
        features if record_fusion_input else None,
        modulation,
        p,
        feature_stride,
    )


# -- initialisation protocols ------------------------------------------------

def transfer(source: ModelState, config: NetworkConfig, seed: int, skip_saliency: bool = False) -> ModelState:
    """Fresh model for ``config`` that copies every compatible parameter from
    ``source`` except the classification head.

    Saliency-branch weights are kept from ``source`` unless ``skip_saliency``.
    Early fusion keeps the RGB slices of conv1 and a fresh saliency slice.
    """
    state = build(config, seed)
    for name, value in source.params.items():
        if block_of(name) == HEAD or name not in state.params:
            continue
        if skip_saliency and is_saliency_param(name):
            continue
        target = state.params[name]
        origin = source.provenance.get(name, "source")
        if target.shape == value.shape:
            state.params[name] = value.copy()
            state.provenance[name] = origin
        elif name == "conv1.w" and target.shape[1] == 4 and value.shape[1] == 3:
            target[:, :3] = value
            state.provenance[name] = f"{origin}+xavier-slice:{seed}"
        else:
            raise ConfigError(f"cannot transfer {name}: {value.shape} -> {target.shape}")
    return state


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: ModelState, config: NetworkConfig) -> None:
    """Flat binary container: magic, version, config digest, tensor count,
    then per tensor (sorted by name) name, shape and float64 LE values."""
    names = sorted(state.params)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), config.digest(),
              struct.pack("<I", len(names))]
    for name in names:
        value = np.ascontiguousarray(state.params[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, config: NetworkConfig | None = None) -> ModelState:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[8:40]
    if config is not None and digest != config.digest():
        raise ConfigError(f"{path}: checkpoint was written for a different config")
    (count,) = struct.unpack_from("<I", buf, 40)
    off = 44
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + n].decode()
        off += 4 + n
        (rank,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return ModelState(params, {k: f"checkpoint:{path}" for k in params})
