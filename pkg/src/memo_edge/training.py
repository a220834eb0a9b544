"""Masked edge training, condition dropout and low-rank adapter fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .model import Conv, MEMONetwork, TriStateEdgeMap, encode_tristate
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

LOSS_NORMALIZATIONS = ("ratio", "masked_mean")
RATIO_DISTRIBUTIONS = ("uniform",)
LORA_PARTS = ("edge_encoder", "decoder")


@dataclass
class TrainingConfig:
    batch_size: int = 16
    learning_rate: float = 5e-5
    epochs: int = 1
    max_steps: int | None = None
    time_budget: float | None = None  # seconds of wall clock, checked between steps
    mask_ratio_distribution: str = "uniform"
    condition_drop_prob: float = 0.10
    loss_normalization: str = "ratio"
    weight_decay: float = 0.01
    augment: bool = True
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.condition_drop_prob < 1.0):
            raise ValueError(f"condition_drop_prob must lie in [0, 1), got {self.condition_drop_prob}")
        if self.loss_normalization not in LOSS_NORMALIZATIONS:
            raise ValueError(f"loss_normalization must be one of {LOSS_NORMALIZATIONS}")
        if self.mask_ratio_distribution not in RATIO_DISTRIBUTIONS:
            raise ValueError(f"mask_ratio_distribution must be one of {RATIO_DISTRIBUTIONS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


# ---------------------------------------------------------------------------
# masking and loss
# ---------------------------------------------------------------------------


def sample_ratio(rng: np.random.Generator, size=None):
    """Mask ratio uniform on (0, 1]."""
    return 1.0 - rng.random(size)


def bernoulli_mask(edges, r: float, rng: np.random.Generator) -> TriStateEdgeMap:
    """Mask each pixel independently with probability ``r``; ``r = 1`` masks everything."""
    if not (0.0 < r <= 1.0):
        raise ValueError(f"mask ratio must lie in (0, 1], got {r}")
    edges = np.asarray(edges)
    if r == 1.0:
        mask = np.ones(edges.shape, dtype=bool)
    else:
        mask = rng.random(edges.shape) < r
    return TriStateEdgeMap.from_edges(edges, mask)


def _loss_weights(masked: np.ndarray, r, normalization: str) -> np.ndarray:
    """Per-pixel weights ``[N, H, W]`` for a batch of masks."""
    n, h, w = masked.shape
    r = np.asarray(r, dtype=np.float64).reshape(n, 1, 1)
    if normalization == "ratio":
        return masked / (r * h * w)
    counts = masked.reshape(n, -1).sum(axis=1).reshape(n, 1, 1)
    return masked / np.maximum(counts, 1)


def masked_bce_loss(logits, edges, e_r: TriStateEdgeMap, r: float, normalization: str = "ratio") -> Tensor:
    """BCE summed over masked pixels, normalized by ``r * H * W`` (or by the masked count)."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    edges = np.asarray(edges)
    if logits.shape != edges.shape or edges.shape != e_r.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, edges {edges.shape}, mask {e_r.shape}")
    if normalization not in LOSS_NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {LOSS_NORMALIZATIONS}")
    weights = _loss_weights(e_r.masked[None], [r], normalization)[0]
    return ad.bce_with_logits(logits, edges > 0, weights)


def batch_loss(logits: Tensor, edges: np.ndarray, masked: np.ndarray, r, normalization: str = "ratio") -> Tensor:
    """Mean over the batch of the per-sample masked loss; ``logits`` is ``[N, 1, H, W]``."""
    n = masked.shape[0]
    weights = _loss_weights(masked, r, normalization) / n
    return ad.bce_with_logits(logits, (edges > 0)[:, None], weights[:, None])


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def augment_pair(image: np.ndarray, edges: np.ndarray, rng: np.random.Generator):
    """Random flips and 90-degree rotation, applied identically to image [C,H,W] and edges [H,W]."""
    k = int(rng.integers(4)) if image.shape[1] == image.shape[2] else 0
    flip_v, flip_h = rng.random(2) < 0.5
    if flip_v:
        image, edges = image[:, ::-1], edges[::-1]
    if flip_h:
        image, edges = image[:, :, ::-1], edges[:, ::-1]
    if k:
        image, edges = np.rot90(image, k, axes=(1, 2)), np.rot90(edges, k)
    return np.ascontiguousarray(image), np.ascontiguousarray(edges)


def train_step(net: MEMONetwork, images, edges, cfg: TrainingConfig, state: AdamWState, rng: np.random.Generator) -> float:
    """One AdamW step on a batch; returns the batch loss before the update."""
    images = np.asarray(images, dtype=ad.default_dtype())
    edges = np.asarray(edges) > 0
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("need a non-empty batch of images [N, C, H, W]")
    n = images.shape[0]
    if edges.shape != (n,) + images.shape[2:]:
        raise ValueError(f"edges have shape {edges.shape}, expected {(n,) + images.shape[2:]}")

    r = sample_ratio(rng, n)
    maps = [bernoulli_mask(edges[i], r[i], rng) for i in range(n)]
    masked = np.stack([m.masked for m in maps])
    tri = np.stack([encode_tristate(m) for m in maps])
    drop = rng.random(n) < cfg.condition_drop_prob
    if drop.any():
        # the dropped image is zero for both encoders
        images = images.copy()
        images[drop] = 0.0

    with GradTape() as tape:
        logits = net.logits(images, tri, r)
        loss = batch_loss(logits, edges, masked, r, cfg.loss_normalization)
    value = float(loss.item())
    if not np.isfinite(value):
        per = [
            float(batch_loss(Tensor(logits.data[i : i + 1]), edges[i : i + 1], masked[i : i + 1], r[i : i + 1]).item())
            for i in range(n)
        ]
        bad = next((i for i, v in enumerate(per) if not np.isfinite(v)), 0)
        raise FloatingPointError(f"non-finite loss {value} at batch sample {bad} (mask ratio {r[bad]:.6f})")
    grads = tape.backward(loss, net.trainable())
    state.lr = cfg.learning_rate
    state.weight_decay = cfg.weight_decay
    adamw_step(net.params, grads, state)
    return value


def train(
    net: MEMONetwork,
    images: Sequence[np.ndarray],
    edges: Sequence[np.ndarray],
    cfg: TrainingConfig,
    state: AdamWState | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[list[float], AdamWState]:
    """Epoch loop over an in-memory dataset; stops early at ``max_steps`` or ``time_budget``."""
    if len(images) != len(edges):
        raise ValueError(f"{len(images)} images but {len(edges)} edge maps")
    if len(images) == 0:
        raise ValueError("empty training set")
    state = state or AdamWState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        for lo in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return history, state
            if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
                log.info("time budget reached after %d steps", step)
                return history, state
            idx = order[lo : lo + cfg.batch_size]
            pairs = [(np.asarray(images[i]), np.asarray(edges[i])) for i in idx]
            if cfg.augment:
                pairs = [augment_pair(im, e, rng) for im, e in pairs]
            batch_i = np.stack([p[0] for p in pairs])
            batch_e = np.stack([p[1] for p in pairs])
            loss = train_step(net, batch_i, batch_e, cfg, state, rng)
            history.append(loss)
            step += 1
            if callback is not None:
                callback(step, loss)
            if cfg.log_every and step % cfg.log_every == 0:
                recent = np.mean(history[-cfg.log_every :])
                log.info("epoch %d step %d loss %.4f (%.0fs)", epoch, step, recent, time.perf_counter() - start)
    return history, state


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Adapter pair on one convolution: ``A`` is rank x in, ``B`` is out x rank."""

    layer: str
    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def parameter_count(self) -> int:
        return self.a.data.size + self.b.data.size


def lora_inject(
    net: MEMONetwork,
    rank: int,
    alpha: float | None = None,
    targets: Sequence[str] = LORA_PARTS,
    seed: int = 0,
) -> list[LoraAdapter]:
    """Freeze ``net`` and attach zero-initialized adapters to every feature conv of ``targets``.

    ``alpha`` defaults to ``rank`` (unit scaling).  The network output is
    unchanged until the adapters are trained.
    """
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    alpha = float(rank if alpha is None else alpha)
    convs: list[Conv] = []
    for part in targets:
        convs.extend(net.lora_targets(part))
    for conv in convs:
        if conv.lora_a is not None:
            raise ValueError(f"{conv.name} already carries an adapter")
        if rank > min(conv.cin, conv.cout):
            raise ValueError(f"rank {rank} exceeds min(in, out) = {min(conv.cin, conv.cout)} for {conv.name}")
    for p in net.params.values():
        p.requires_grad = False
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    adapters = []
    for conv in convs:
        a = (rng.standard_normal((rank, conv.cin)) / np.sqrt(conv.cin)).astype(dtype)
        conv.lora_a = _add_param(net, f"{conv.name}.lora_a", a)
        conv.lora_b = _add_param(net, f"{conv.name}.lora_b", np.zeros((conv.cout, rank), dtype=dtype))
        conv.lora_scale = alpha / rank
        adapters.append(LoraAdapter(conv.name, conv.lora_a, conv.lora_b, rank, alpha))
    net.lora = {"rank": rank, "alpha": alpha, "targets": tuple(targets), "seed": seed}
    return adapters


def _add_param(net: MEMONetwork, name: str, value: np.ndarray) -> Tensor:
    if name in net.params:
        raise ValueError(f"duplicate parameter name {name}")
    t = Tensor(value, requires_grad=True, name=name, dtype=value.dtype)
    net.params[name] = t
    return t


def lora_parameter_count(net: MEMONetwork, rank: int, targets: Sequence[str] = LORA_PARTS) -> int:
    """Closed-form adapter size: sum of ``rank * (in + out)`` over the wrapped convs."""
    return sum(rank * (c.cin + c.cout) for part in targets for c in net.lora_targets(part))
