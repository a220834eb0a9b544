"""Masked edge prediction network.

Three parts share one parameter registry:

* ``image_encoder``  residual conv pyramid over the RGB image,
* ``edge_encoder``   residual conv pyramid over image + tri-state edge map,
  with the mask ratio injected into every residual block,
* ``decoder``        mirrored upsampling path fusing both pyramids, also
  ratio-conditioned, ending in a single-channel logit map.

All spatial work is done on batches ``[N, C, H, W]``; the single-image
helpers :func:`predict` and :func:`predict_guided` wrap the batched path.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor

BACKGROUND = 0
EDGE = 1
MASKED = -1


class TriStateEdgeMap:
    """Per-pixel state in {background, edge, masked}."""

    __slots__ = ("states",)

    def __init__(self, states):
        states = np.asarray(states, dtype=np.int8)
        if states.ndim != 2:
            raise ValueError(f"tri-state map must be 2-D, got shape {states.shape}")
        if not np.isin(states, (BACKGROUND, EDGE, MASKED)).all():
            raise ValueError("tri-state map holds values outside {0, 1, MASKED}")
        self.states = states

    @classmethod
    def all_masked(cls, height: int, width: int) -> "TriStateEdgeMap":
        return cls(np.full((height, width), MASKED, dtype=np.int8))

    @classmethod
    def from_edges(cls, edges, mask) -> "TriStateEdgeMap":
        """Binary ``edges`` with ``mask`` (bool) pixels replaced by MASKED."""
        states = (np.asarray(edges) > 0).astype(np.int8)
        states[np.asarray(mask, dtype=bool)] = MASKED
        return cls(states)

    @property
    def shape(self) -> tuple[int, int]:
        return self.states.shape

    @property
    def masked(self) -> np.ndarray:
        return self.states == MASKED

    def masked_count(self) -> int:
        return int(np.count_nonzero(self.states == MASKED))

    def masked_fraction(self) -> float:
        return self.masked_count() / self.states.size

    def copy(self) -> "TriStateEdgeMap":
        return TriStateEdgeMap(self.states.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, TriStateEdgeMap) and np.array_equal(self.states, other.states)

    def __repr__(self) -> str:
        return f"TriStateEdgeMap(shape={self.shape}, masked_fraction={self.masked_fraction():.3f})"


def encode_tristate(e_r: TriStateEdgeMap, dtype=None) -> np.ndarray:
    """Two channels: edge value (0 where masked) and mask indicator."""
    states = e_r.states
    out = np.empty((2,) + states.shape, dtype=dtype or ad.default_dtype())
    out[0] = states == EDGE
    out[1] = states == MASKED
    return out


def decode_tristate(channels: np.ndarray) -> TriStateEdgeMap:
    channels = np.asarray(channels)
    states = (channels[0] > 0.5).astype(np.int8)
    states[channels[1] > 0.5] = MASKED
    return TriStateEdgeMap(states)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv:
    """Convolution with an optional low-rank adapter on a 1x1 side path."""

    def __init__(self, params, name, cin, cout, kernel=3, stride=1, rng=None, zero_init=False):
        self.name, self.cin, self.cout = name, cin, cout
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2
        dtype = ad.default_dtype()
        if zero_init:
            w = np.zeros((cout, cin, kernel, kernel), dtype=dtype)
        else:
            std = np.sqrt(2.0 / (cin * kernel * kernel))
            w = (rng.standard_normal((cout, cin, kernel, kernel)) * std).astype(dtype)
        self.weight = _register(params, f"{name}.weight", w)
        self.bias = _register(params, f"{name}.bias", np.zeros(cout, dtype=dtype))
        self.lora_a: Tensor | None = None
        self.lora_b: Tensor | None = None
        self.lora_scale = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.lora_a is not None:
            rank = self.lora_a.shape[0]
            a = ad.reshape(self.lora_a, (rank, self.cin, 1, 1))
            b = ad.reshape(self.lora_b, (self.cout, rank, 1, 1))
            side = ad.conv2d(ad.conv2d(x, a, stride=self.stride), b)
            y = ad.add(y, ad.scale(side, self.lora_scale))
        return y


class GroupNorm:
    def __init__(self, params, name, channels, groups):
        dtype = ad.default_dtype()
        self.groups = groups
        self.gamma = _register(params, f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = _register(params, f"{name}.beta", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.gamma, self.beta)


class RatioLinear:
    """Maps the sinusoidal mask-ratio embedding to a per-channel offset."""

    def __init__(self, params, name, pe_dim, channels, rng):
        dtype = ad.default_dtype()
        w = (rng.standard_normal((pe_dim, channels)) * (1.0 / np.sqrt(pe_dim))).astype(dtype)
        self.weight = _register(params, f"{name}.weight", w)
        self.bias = _register(params, f"{name}.bias", np.zeros(channels, dtype=dtype))

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, pe: Tensor) -> Tensor:
        return ad.linear(pe, self.weight, self.bias)


def inject_ratio(f: Tensor, r, block_linear: RatioLinear, pe_dim: int | None = None) -> Tensor:
    """Add ``Linear(PE(r))`` to every spatial position of ``f``.

    ``f`` is ``[C, h, w]`` with a scalar ``r`` or ``[N, C, h, w]`` with one
    ratio per sample.  ``r`` may also be a precomputed embedding tensor.
    """
    batched = f.data.ndim == 4
    c = f.shape[1] if batched else f.shape[0]
    if block_linear.out_features != c:
        raise ValueError(f"ratio linear outputs {block_linear.out_features} channels, features have {c}")
    if isinstance(r, Tensor):
        pe = r
    else:
        pe = Tensor(ad.sinusoidal_embed(np.atleast_1d(r), pe_dim or block_linear.weight.shape[0]))
    offset = block_linear(pe)
    if batched:
        return ad.add(f, ad.reshape(offset, (offset.shape[0], c, 1, 1)))
    return ad.add(f, ad.reshape(offset, (c, 1, 1)))


class ResBlock:
    """Two GroupNorm -> SiLU -> 3x3 conv sub-blocks around an identity skip."""

    def __init__(self, params, name, channels, groups, rng, pe_dim=None):
        self.norm1 = GroupNorm(params, f"{name}.norm1", channels, groups)
        self.conv1 = Conv(params, f"{name}.conv1", channels, channels, rng=rng)
        self.norm2 = GroupNorm(params, f"{name}.norm2", channels, groups)
        self.conv2 = Conv(params, f"{name}.conv2", channels, channels, rng=rng)
        self.ratio = RatioLinear(params, f"{name}.ratio", pe_dim, channels, rng) if pe_dim else None

    def convs(self) -> list[Conv]:
        return [self.conv1, self.conv2]

    def __call__(self, x: Tensor, pe: Tensor | None = None) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        if self.ratio is not None:
            h = inject_ratio(h, pe, self.ratio)
        h = self.conv2(ad.silu(self.norm2(h)))
        return ad.add(x, h)


class Encoder:
    """Stem conv, then one residual block per level; levels after the first halve resolution."""

    def __init__(self, params, name, in_channels, channels, groups, rng, pe_dim=None):
        self.stem = Conv(params, f"{name}.stem", in_channels, channels[0], rng=rng)
        self.downs: list[Conv | None] = []
        self.blocks: list[ResBlock] = []
        for level, c in enumerate(channels):
            if level == 0:
                self.downs.append(None)
            else:
                self.downs.append(Conv(params, f"{name}.level{level}.down", channels[level - 1], c, stride=2, rng=rng))
            self.blocks.append(ResBlock(params, f"{name}.level{level}.res", c, groups, rng, pe_dim))

    def feature_convs(self) -> list[Conv]:
        convs = [d for d in self.downs if d is not None]
        for b in self.blocks:
            convs.extend(b.convs())
        return convs

    def __call__(self, x: Tensor, pe: Tensor | None = None) -> list[Tensor]:
        h = self.stem(x)
        feats = []
        for down, block in zip(self.downs, self.blocks):
            if down is not None:
                h = down(h)
            h = block(h, pe)
            feats.append(h)
        return feats


class Decoder:
    """Mirror of the encoders: fuse both pyramids from coarse to fine."""

    def __init__(self, params, name, channels, groups, rng, pe_dim):
        n = len(channels)
        self.ups: dict[int, Conv] = {}
        self.merges: dict[int, Conv] = {}
        self.blocks: dict[int, ResBlock] = {}
        for level in reversed(range(n)):
            c = channels[level]
            fused = 2 * c
            if level < n - 1:
                self.ups[level] = Conv(params, f"{name}.level{level}.up", channels[level + 1], c, rng=rng)
                fused = 3 * c
            self.merges[level] = Conv(params, f"{name}.level{level}.merge", fused, c, kernel=1, rng=rng)
            self.blocks[level] = ResBlock(params, f"{name}.level{level}.res", c, groups, rng, pe_dim)
        self.head_norm = GroupNorm(params, f"{name}.head.norm", channels[0], groups)
        self.head = Conv(params, f"{name}.head.conv", channels[0], 1, zero_init=True, rng=rng)
        self.levels = n

    def feature_convs(self) -> list[Conv]:
        convs = []
        for level in reversed(range(self.levels)):
            if level in self.ups:
                convs.append(self.ups[level])
            convs.append(self.merges[level])
            convs.extend(self.blocks[level].convs())
        return convs

    def __call__(self, image_feats: list[Tensor], edge_feats: list[Tensor], pe: Tensor) -> Tensor:
        h = None
        for level in reversed(range(self.levels)):
            parts = [image_feats[level], edge_feats[level]]
            if h is not None:
                parts.insert(0, self.ups[level](ad.upsample_nearest(h, 2)))
            h = self.merges[level](ad.concat(parts, axis=1))
            h = self.blocks[level](h, pe)
        return self.head(ad.silu(self.head_norm(h)))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (32, 64, 128, 192)
    groups: int = 8
    pe_dim: int = 32
    image_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels:
            raise ValueError("channel plan must be non-empty")
        if any(c % self.groups for c in self.channels):
            raise ValueError(f"every channel count must be divisible by groups={self.groups}")
        if self.pe_dim % 2:
            raise ValueError("pe_dim must be even")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)


class MEMONetwork:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.image_encoder = Encoder(self.params, "image_encoder", cfg.image_channels, cfg.channels, cfg.groups, rng)
        self.edge_encoder = Encoder(
            self.params, "edge_encoder", cfg.image_channels + 2, cfg.channels, cfg.groups, rng, pe_dim=cfg.pe_dim
        )
        self.decoder = Decoder(self.params, "decoder", cfg.channels, cfg.groups, rng, pe_dim=cfg.pe_dim)
        self.lora: dict | None = None  # adapter settings once adapters are attached

    @property
    def stride(self) -> int:
        return self.config.stride

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def trainable(self) -> OrderedDict[str, Tensor]:
        return OrderedDict((k, p) for k, p in self.params.items() if p.requires_grad)

    def check_size(self, height: int, width: int) -> None:
        m = self.stride
        if height % m or width % m or height < m or width < m:
            raise ValueError(f"image size {height}x{width} must be a positive multiple of {m}")

    def lora_targets(self, part: str) -> list[Conv]:
        if part == "edge_encoder":
            return self.edge_encoder.feature_convs()
        if part == "decoder":
            return self.decoder.feature_convs()
        raise ValueError(f"unknown LoRA target {part!r}; expected 'edge_encoder' or 'decoder'")

    # -- batched forward ----------------------------------------------------

    def embed_ratio(self, r) -> Tensor:
        return Tensor(ad.sinusoidal_embed(np.atleast_1d(np.asarray(r, dtype=np.float64)), self.config.pe_dim))

    def encode_image(self, images) -> list[Tensor]:
        images = _as_batch(images)
        return self.image_encoder(images)

    def decode_logits(self, image_feats: list[Tensor], images, tri: np.ndarray, r) -> Tensor:
        """Logits ``[N, 1, H, W]`` from cached image features and tri-state channels ``[N, 2, H, W]``."""
        images = _as_batch(images)
        pe = self.embed_ratio(r)
        edge_in = ad.concat([images, Tensor(tri)], axis=1)
        edge_feats = self.edge_encoder(edge_in, pe)
        return self.decoder(image_feats, edge_feats, pe)

    def logits(self, images, tri: np.ndarray, r) -> Tensor:
        images = _as_batch(images)
        n, _, h, w = images.shape
        self.check_size(h, w)
        if tri.shape != (n, 2, h, w):
            raise ValueError(f"tri-state channels have shape {tri.shape}, expected {(n, 2, h, w)}")
        return self.decode_logits(self.encode_image(images), images, tri, r)


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images if images.data.ndim == 4 else ad.reshape(images, (1,) + images.shape)
    arr = np.asarray(images, dtype=ad.default_dtype())
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def _register(params, name: str, value: np.ndarray) -> Tensor:
    if name in params:
        raise ValueError(f"duplicate parameter name {name}")
    t = Tensor(value, requires_grad=True, name=name, dtype=value.dtype)
    params[name] = t
    return t


# ---------------------------------------------------------------------------
# single-image entry points
# ---------------------------------------------------------------------------


def _check_inputs(net: MEMONetwork, image, e_r: TriStateEdgeMap, r: float) -> np.ndarray:
    image = np.asarray(image, dtype=ad.default_dtype())
    if image.ndim != 3:
        raise ValueError(f"image must be [C, H, W], got shape {image.shape}")
    if image.shape[1:] != e_r.shape:
        raise ValueError(f"image size {image.shape[1:]} differs from edge map size {e_r.shape}")
    if not (0.0 < r <= 1.0):
        raise ValueError(f"mask ratio must lie in (0, 1], got {r}")
    net.check_size(*e_r.shape)
    return image


def predict_logits(net: MEMONetwork, image, e_r: TriStateEdgeMap, r: float) -> np.ndarray:
    image = _check_inputs(net, image, e_r, r)
    tri = encode_tristate(e_r)[None]
    return net.logits(image, tri, [r]).data[0, 0]


def predict(net: MEMONetwork, image, e_r: TriStateEdgeMap, r: float) -> np.ndarray:
    """Edge probability map ``sigmoid(D(F_I(I), F_E(I, E_r, r), r))`` at input resolution."""
    return _sigmoid(predict_logits(net, image, e_r, r))


def guided_logits(cond: np.ndarray, uncond: np.ndarray, s: float) -> np.ndarray:
    """Extrapolate from unconditioned towards image-conditioned logits by factor ``s``."""
    if not s > 0:
        raise ValueError(f"granularity scale must be positive, got {s}")
    if s == 1.0:
        return cond
    return s * cond + (1.0 - s) * uncond


def predict_guided(net: MEMONetwork, image, e_r: TriStateEdgeMap, r: float, s: float) -> np.ndarray:
    """Granularity-controlled prediction; the unconditioned branch sees an all-zero image."""
    if not s > 0:
        raise ValueError(f"granularity scale must be positive, got {s}")
    image = _check_inputs(net, image, e_r, r)
    tri = encode_tristate(e_r)[None]
    cond = net.logits(image, tri, [r]).data[0, 0]
    if s == 1.0:
        return _sigmoid(cond)
    uncond = net.logits(np.zeros_like(image), tri, [r]).data[0, 0]
    return _sigmoid(guided_logits(cond, uncond, s))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)
