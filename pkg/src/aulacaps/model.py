"""Dual-stream capsule network: spatial stream, spatio-temporal stream, AU capsules, decoder.

Default configuration follows the published layer inventory at 96x96 input:

* spatial:  conv7x7(128) -> res(128) -> pool -> res(64) -> pool -> caps conv 5x5/2 (64)
  giving 12x12x64 = 576 capsules of 16 dims
* temporal: conv5^3(128) -> block(128) -> pool -> block(64) -> pool -> caps conv (1,5,5)/(1,2,2) (96)
  giving 1x12x12x96 = 864 capsules
* 1440 capsules routed to 12 AU capsules, decoder from a 3x3 seed up to 96x96
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import capsules as caps
from .autodiff import Tensor
from .layers import BatchNorm, Conv, ConvBlock3d, ConvBNAct, ConvTranspose2d, Linear, Module, ResidualBlock2d, maxpool


class ConfigError(ValueError):
    """Configuration cannot reproduce a consistent capsule/shape budget."""


@dataclass
class ModelConfig:
    input_size: int = 96
    window_N: int = 2
    channels: int = 1
    capsule_dim: int = 16
    au_count: int = 12
    routing_iterations: int = 3
    stem2d_filters: int = 128
    stem2d_kernel: int = 7
    res_filters: tuple[int, int] = (128, 64)
    res_kernel: int = 3
    caps2d_filters: int = 64
    stem3d_filters: int = 128
    stem3d_kernel: int = 5
    block3d_filters: tuple[int, int] = (128, 64)
    block3d_kernel: int = 5
    caps3d_filters: int = 96
    caps_kernel: int = 5
    decoder_seed_channels: int = 512
    decoder_filters: tuple[int, ...] = (128, 64, 32, 16)
    decoder_kernel: int = 5

    @property
    def window_length(self) -> int:
        return 2 * self.window_N + 1

    @property
    def caps_grid(self) -> int:
        return self.input_size // 8

    @property
    def temporal_extent(self) -> int:
        return (self.window_length // 2) // 2

    @property
    def spatial_capsules(self) -> int:
        return self.caps_grid**2 * self.caps2d_filters // self.capsule_dim

    @property
    def temporal_capsules(self) -> int:
        return self.temporal_extent * self.caps_grid**2 * self.caps3d_filters // self.capsule_dim

    @property
    def total_capsules(self) -> int:
        return self.spatial_capsules + self.temporal_capsules

    @property
    def decoder_seed_size(self) -> int:
        return self.input_size >> (len(self.decoder_filters) + 1)

    def validate(self) -> None:
        if self.window_length < 4:
            raise ConfigError("window must hold at least 5 frames so two temporal poolings leave >= 1")
        if self.input_size % 8:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 8")
        up = 2 ** (len(self.decoder_filters) + 1)
        if self.input_size % up:
            raise ConfigError(f"input_size {self.input_size} must be divisible by {up} for the decoder")
        for name in ("caps2d_filters", "caps3d_filters"):
            if getattr(self, name) % self.capsule_dim:
                raise ConfigError(f"{name} must be a multiple of capsule_dim")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def full_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def desk_config(**overrides) -> ModelConfig:
    """Same topology at 32x32 with narrow layers, sized for single-core CPU training."""
    base = ModelConfig(
        input_size=32,
        stem2d_filters=16,
        res_filters=(16, 16),
        caps2d_filters=64,
        stem3d_filters=16,
        block3d_filters=(16, 16),
        block3d_kernel=3,
        caps3d_filters=96,
        decoder_seed_channels=16,
        decoder_filters=(16, 8, 8, 4),
    )
    return dataclasses.replace(base, **overrides)


PRESETS = {"full": full_config, "desk": desk_config}


# --- streams ---------------------------------------------------------------

# He init feeding the squash saturates every primary capsule near length 1
CAPS_CONV_GAIN = 0.2


class SpatialStream(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        k = cfg.stem2d_kernel
        self.stem = ConvBNAct(cfg.channels, cfg.stem2d_filters, (k, k), rng)
        self.res1 = ResidualBlock2d(cfg.stem2d_filters, cfg.res_filters[0], rng, cfg.res_kernel)
        self.res2 = ResidualBlock2d(cfg.res_filters[0], cfg.res_filters[1], rng, cfg.res_kernel)
        ck = cfg.caps_kernel
        self.caps_conv = Conv(
            cfg.res_filters[1], cfg.caps2d_filters, (ck, ck), rng, stride=2, padding=ck // 2, gain=CAPS_CONV_GAIN
        )
        self.capsule_dim = cfg.capsule_dim

    def features(self, foi):
        x = self.res1(self.stem(foi))
        x = maxpool(x, 2)
        x = maxpool(self.res2(x), 2)
        return self.caps_conv(x)

    def forward(self, foi):
        return caps.primary_capsules(self.features(foi), self.capsule_dim)


class TemporalStream(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        k = cfg.stem3d_kernel
        self.stem = ConvBNAct(cfg.channels, cfg.stem3d_filters, (k, k, k), rng)
        self.block1 = ConvBlock3d(cfg.stem3d_filters, cfg.block3d_filters[0], rng, cfg.block3d_kernel)
        self.block2 = ConvBlock3d(cfg.block3d_filters[0], cfg.block3d_filters[1], rng, cfg.block3d_kernel)
        ck = cfg.caps_kernel
        self.caps_conv = Conv(
            cfg.block3d_filters[1], cfg.caps3d_filters, (1, ck, ck), rng,
            stride=(1, 2, 2), padding=(0, ck // 2, ck // 2), gain=CAPS_CONV_GAIN,
        )
        self.capsule_dim = cfg.capsule_dim

    def features(self, window):
        x = maxpool(self.block1(self.stem(window)), 2)
        x = maxpool(self.block2(x), 2)
        return self.caps_conv(x)

    def forward(self, window):
        return caps.primary_capsules(self.features(window), self.capsule_dim)


class Decoder(Module):
    """Dense projection to a seed map, four ReLU transposed convs, one tanh transposed conv."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.seed = cfg.decoder_seed_size
        self.seed_channels = cfg.decoder_seed_channels
        self.project = Linear(cfg.au_count * cfg.capsule_dim, self.seed**2 * self.seed_channels, rng)
        widths = (cfg.decoder_seed_channels,) + tuple(cfg.decoder_filters)
        self.ups = [ConvTranspose2d(a, b, cfg.decoder_kernel, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.out = ConvTranspose2d(widths[-1], cfg.channels, cfg.decoder_kernel, rng)

    def forward(self, masked):
        masked = ad.as_tensor(masked)
        if masked.ndim == 1:
            masked = ad.reshape(masked, (1, masked.shape[0]))
        h = ad.relu(self.project(masked))
        h = ad.reshape(h, (masked.shape[0], self.seed_channels, self.seed, self.seed))
        for up in self.ups:
            h = ad.relu(up(h))
        return ad.tanh(self.out(h))


class ForwardResult(NamedTuple):
    au_probs: Tensor
    reconstruction: Tensor
    routing: caps.RoutingState
    au_capsules: Tensor


class AULACaps(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.config = cfg
        self.spatial = SpatialStream(cfg, rng)
        self.temporal = TemporalStream(cfg, rng)
        self.votes = caps.VoteTransform(cfg.total_capsules, cfg.au_count, cfg.capsule_dim, cfg.capsule_dim, rng)
        self.decoder = Decoder(cfg, rng)
        self.trained_steps = 0

    def named_parameters(self, prefix: str = ""):
        yield from self.spatial.named_parameters(prefix + "spatial.")
        yield from self.temporal.named_parameters(prefix + "temporal.")
        yield prefix + "votes.W", self.votes.W
        yield from self.decoder.named_parameters(prefix + "decoder.")

    def param_count(self, include_decoder: bool = True) -> int:
        n = sum(p.size for name, p in self.named_parameters() if include_decoder or not name.startswith("decoder."))
        return int(n)

    def primary(self, window) -> Tensor:
        """Concatenated primary capsules (spatial first) for a channel-first window batch."""
        x = to_channel_first(window, self.config)
        foi = x[:, :, self.config.window_N]
        return caps.concat_capsules(self.spatial(foi), self.temporal(x))

    def forward(self, window, training: bool = False, label_for_decoder=None) -> ForwardResult:
        return forward(self, window, training, label_for_decoder)


def to_channel_first(window, cfg: ModelConfig) -> Tensor:
    """(B, T, H, W[, C]) or unbatched (T, H, W[, C]) frames -> (B, C, T, H, W)."""
    w = ad.as_tensor(window)
    shape = w.shape
    if w.ndim == 3 or (w.ndim == 4 and shape[1] == cfg.input_size and shape[0] == cfg.window_length):
        w = ad.reshape(w, (1,) + shape)
    if w.ndim == 4:
        w = ad.reshape(w, w.shape + (1,))
    if w.ndim != 5:
        raise ValueError(f"window must be (B, T, H, W[, C]), got {shape}")
    b, t, h, wd, c = w.shape
    if t != cfg.window_length:
        raise ValueError(f"window length {t} != {cfg.window_length}")
    if (h, wd) != (cfg.input_size, cfg.input_size):
        raise ValueError(f"frame size {(h, wd)} != {(cfg.input_size, cfg.input_size)}")
    if c != cfg.channels:
        raise ValueError(f"frame channels {c} != {cfg.channels}")
    return ad.transpose(w, (0, 4, 1, 2, 3))


def build(config: ModelConfig | None = None, seed: int = 0) -> AULACaps:
    """Deterministically initialise all weights from ``seed``."""
    config = config or ModelConfig()
    config.validate()
    return AULACaps(config, np.random.default_rng(seed))


def forward(model: AULACaps, window, training: bool = False, label_for_decoder=None) -> ForwardResult:
    """AU probabilities, reconstruction of the frame of interest, routing state.

    The decoder sees AU capsules masked by ``label_for_decoder`` when given,
    otherwise by predictions thresholded at 0.5.
    """
    model.train(training)
    cfg = model.config
    u = model.primary(window)
    v, state = caps.route(u, model.votes, cfg.routing_iterations)
    probs = caps.capsule_lengths(v)
    if label_for_decoder is None:
        mask = (probs.data >= 0.5).astype(probs.dtype)
    else:
        mask = np.asarray(label_for_decoder, dtype=probs.dtype).reshape(probs.shape)
    recon = model.decoder(caps.mask_by_label(v, mask))
    return ForwardResult(probs, recon, state, v)


def decode(masked, model_or_decoder) -> Tensor:
    dec = model_or_decoder.decoder if isinstance(model_or_decoder, AULACaps) else model_or_decoder
    return dec(masked)


# --- ablation heads ----------------------------------------------------------


class UntrainedModelError(RuntimeError):
    pass


class StreamHead(Module):
    """Fresh AU capsule layer on top of one frozen stream's primary capsules."""

    def __init__(self, model: AULACaps, stream: str, seed: int = 0):
        super().__init__()
        if stream not in ("2d", "3d"):
            raise ValueError(f"stream must be '2d' or '3d', got {stream!r}")
        if model.trained_steps <= 0:
            raise UntrainedModelError("ablation heads need a trained model")
        cfg = model.config
        self.model = model
        self.stream = stream
        self.in_count = cfg.spatial_capsules if stream == "2d" else cfg.temporal_capsules
        rng = np.random.default_rng(seed)
        self.votes = caps.VoteTransform(self.in_count, cfg.au_count, cfg.capsule_dim, cfg.capsule_dim, rng)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "votes.W", self.votes.W

    def frozen_capsules(self, window) -> Tensor:
        """Primary capsules of the frozen stream (eval mode, no tape)."""
        cfg = self.model.config
        self.model.eval()
        with ad.no_grad():
            x = to_channel_first(window, cfg)
            if self.stream == "2d":
                u = self.model.spatial(x[:, :, cfg.window_N])
            else:
                u = self.model.temporal(x)
        return Tensor(u.data)

    def route_probs(self, u) -> Tensor:
        v, _ = caps.route(u, self.votes, self.model.config.routing_iterations)
        return caps.capsule_lengths(v)

    def forward(self, window) -> Tensor:
        return self.route_probs(self.frozen_capsules(window))


def stream_head_for_ablation(model: AULACaps, stream: str, seed: int = 0) -> StreamHead:
    return StreamHead(model, stream.lower(), seed)


# --- checkpoints -------------------------------------------------------------


_STATEFUL = ("spatial", "temporal", "decoder")


def _buffer_owners(model: AULACaps) -> dict:
    owners = {}
    for key in _STATEFUL:
        owners.update(getattr(model, key).buffer_owners(key + "."))
    return owners


def _state_entries(model: AULACaps):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, (owner, attr) in _buffer_owners(model).items():
        yield name, getattr(owner, attr)


def save_checkpoint(model: AULACaps, directory, meta: dict | None = None) -> Path:
    """Write ``model.json`` (manifest) and ``model.bin`` (little-endian float32 blob)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in _state_entries(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "aulacaps-checkpoint/1",
        "config": model.config.to_dict(),
        "trained_steps": model.trained_steps,
        "meta": meta or {},
        "entries": entries,
        "blob": "model.bin",
        "blob_bytes": offset,
    }
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / "model.bin").write_bytes(b"".join(chunks))
    return directory


def load_checkpoint(directory) -> AULACaps:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    blob = (directory / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"{directory / manifest['blob']}: expected {manifest['blob_bytes']} bytes, got {len(blob)}")
    model = build(ModelConfig.from_dict(manifest["config"]), seed=0)
    model.trained_steps = manifest.get("trained_steps", 0)
    params = dict(model.named_parameters())
    buffers = _buffer_owners(model)
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
        if e["name"] in params:
            if params[e["name"]].shape != arr.shape:
                raise ValueError(f"checkpoint entry {e['name']} has shape {arr.shape}, model expects {params[e['name']].shape}")
            params[e["name"]].data = arr
        elif e["name"] in buffers:
            owner, attr = buffers[e["name"]]
            setattr(owner, attr, arr)
        else:
            raise ValueError(f"unknown checkpoint entry {e['name']}")
    model.checkpoint_meta = manifest.get("meta", {})
    return model


def copy_state(model: AULACaps) -> dict[str, np.ndarray]:
    """Snapshot of parameters and buffers (for best-epoch restore)."""
    return {name: arr.copy() for name, arr in _state_entries(model)}


def restore_state(model: AULACaps, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    owners = _buffer_owners(model)
    for name, arr in state.items():
        if name in params:
            params[name].data = arr.copy()
        else:
            owner, attr = owners[name]
            setattr(owner, attr, arr.copy())
