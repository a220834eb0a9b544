"""Confidence-ordered iterative unmasking.

Inference starts from a fully masked edge map.  Each step predicts every
pixel, then finalizes a subset of the still-masked ones (binarized at 0.5);
the rest stay masked and are predicted again with the extra context.  After
``steps - 1`` such iterations one more prediction finalizes everything left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import expit

from . import autodiff as ad
from .model import BACKGROUND, EDGE, MEMONetwork, TriStateEdgeMap, encode_tristate, guided_logits

STRATEGIES = ("locmax", "random", "topk")
THRESHOLD = 0.5


@dataclass
class InferenceConfig:
    """``steps=None`` runs until every pixel is finalized naturally (no flush)."""

    steps: int | None = 10
    strategy: str = "locmax"
    scale: float = 1.0
    fraction: float | None = None  # per-step share of H*W for random/topk; default 1/steps
    threshold: float = THRESHOLD
    seed: int = 0

    def __post_init__(self):
        self.strategy = self.strategy.lower()
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.steps is not None and self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.scale > 0:
            raise ValueError(f"granularity scale must be positive, got {self.scale}")
        if self.fraction is not None and not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.strategy != "locmax" and self.steps is None and self.fraction is None:
            raise ValueError(f"{self.strategy} needs either a step count or an explicit fraction")

    @property
    def step_fraction(self) -> float:
        if self.fraction is not None:
            return self.fraction
        return 1.0 / self.steps


@dataclass
class InferenceTrace:
    masked_counts: list[int] = field(default_factory=list)
    finalize_step: np.ndarray | None = None  # step index per pixel (0-based)
    probabilities: np.ndarray | None = None  # probability each pixel was finalized with
    forward_passes: int = 0  # network evaluations, counting the unconditioned branch
    flushed: bool = False

    def to_tsv(self) -> str:
        lines = ["step\tmasked"]
        lines += [f"{i}\t{n}" for i, n in enumerate(self.masked_counts)]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# selection rules
# ---------------------------------------------------------------------------


def confidence(p: np.ndarray, e_r: TriStateEdgeMap) -> np.ndarray:
    """``max(p, 1 - p)`` on masked pixels, zero on finalized ones."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != e_r.shape:
        raise ValueError(f"probability map {p.shape} does not match edge map {e_r.shape}")
    return np.where(e_r.masked, np.maximum(p, 1.0 - p), 0.0)


def locmax_select(c: np.ndarray, e_r: TriStateEdgeMap) -> np.ndarray:
    """Masked pixels whose confidence is >= every value in their clipped 3x3 window."""
    masked = e_r.masked
    if not masked.any():
        raise ValueError("no masked pixels to select from")
    # -inf padding clips the window at the border
    peak = ndimage.maximum_filter(c, size=3, mode="constant", cval=-np.inf)
    return masked & (c >= peak)


def topk_select(c: np.ndarray, e_r: TriStateEdgeMap, count: int) -> np.ndarray:
    """The ``count`` most confident masked pixels; ties go to the earlier pixel in row-major order."""
    masked = e_r.masked.ravel()
    idx = np.flatnonzero(masked)
    if idx.size == 0:
        raise ValueError("no masked pixels to select from")
    order = np.argsort(-c.ravel()[idx], kind="stable")
    sel = np.zeros(masked.size, dtype=bool)
    sel[idx[order[: min(count, idx.size)]]] = True
    return sel.reshape(c.shape)


def random_select(e_r: TriStateEdgeMap, count: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.flatnonzero(e_r.masked.ravel())
    if idx.size == 0:
        raise ValueError("no masked pixels to select from")
    sel = np.zeros(e_r.masked.size, dtype=bool)
    sel[rng.choice(idx, size=min(count, idx.size), replace=False)] = True
    return sel.reshape(e_r.shape)


def step_count(cfg: InferenceConfig, height: int, width: int) -> int:
    return max(1, math.ceil(cfg.step_fraction * height * width - 1e-9))


def select(c: np.ndarray, e_r: TriStateEdgeMap, cfg: InferenceConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.strategy == "locmax":
        return locmax_select(c, e_r)
    count = step_count(cfg, *e_r.shape)
    if cfg.strategy == "topk":
        return topk_select(c, e_r, count)
    return random_select(e_r, count, rng)


def finalize(e_r: TriStateEdgeMap, selected: np.ndarray, p: np.ndarray, threshold: float = THRESHOLD) -> TriStateEdgeMap:
    """Commit ``selected`` masked pixels to edge/background; finalized pixels are never touched."""
    sel = selected & e_r.masked
    states = e_r.states.copy()
    states[sel] = np.where(p[sel] >= threshold, EDGE, BACKGROUND)
    return TriStateEdgeMap(states)


# ---------------------------------------------------------------------------
# prediction with cached image features
# ---------------------------------------------------------------------------


class GuidedPredictor:
    """Evaluates the guided probability map for one image, reusing the image-encoder features."""

    def __init__(self, net: MEMONetwork, image, scale: float = 1.0):
        if not scale > 0:
            raise ValueError(f"granularity scale must be positive, got {scale}")
        image = np.asarray(image, dtype=ad.default_dtype())
        if image.ndim != 3:
            raise ValueError(f"image must be [C, H, W], got shape {image.shape}")
        net.check_size(*image.shape[1:])
        self.net, self.scale = net, scale
        self.guided = scale != 1.0
        batch = np.stack([image, np.zeros_like(image)]) if self.guided else image[None]
        self.images = batch
        self.features = net.encode_image(batch)
        self.passes = 0

    def __call__(self, e_r: TriStateEdgeMap, r: float) -> np.ndarray:
        n = self.images.shape[0]
        tri = np.repeat(encode_tristate(e_r)[None], n, axis=0)
        z = self.net.decode_logits(self.features, self.images, tri, [r] * n).data[:, 0]
        self.passes += n
        z = z.astype(np.float64)
        return expit(guided_logits(z[0], z[1], self.scale) if self.guided else z[0])


def unmask_step(net, image, e_r: TriStateEdgeMap, cfg: InferenceConfig, rng=None, predictor=None):
    """One prediction + finalization; returns the new map and the probabilities used."""
    if e_r.masked_count() == 0:
        raise ValueError("edge map is already complete; nothing to unmask")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    predictor = predictor or GuidedPredictor(net, image, cfg.scale)
    p = predictor(e_r, e_r.masked_fraction())
    chosen = select(confidence(p, e_r), e_r, cfg, rng)
    return finalize(e_r, chosen, p, cfg.threshold), p


def run_inference(net: MEMONetwork, image, cfg: InferenceConfig | None = None):
    """Iterative unmasking from an all-masked map.

    Returns ``(edges, trace)`` where ``edges`` is a boolean map and
    ``trace.probabilities`` holds the probability each pixel was finalized
    with, which is what threshold-sweeping evaluation consumes.
    """
    cfg = cfg or InferenceConfig()
    image = np.asarray(image, dtype=ad.default_dtype())
    h, w = image.shape[1:]
    rng = np.random.default_rng(cfg.seed)
    predictor = GuidedPredictor(net, image, cfg.scale)
    e_r = TriStateEdgeMap.all_masked(h, w)
    trace = InferenceTrace(masked_counts=[h * w])
    when = np.full((h, w), -1, dtype=np.int64)
    prob = np.zeros((h, w), dtype=np.float64)
    step = 0
    while e_r.masked_count():
        before = e_r.masked
        if cfg.steps is not None and step == cfg.steps - 1:
            p = predictor(e_r, e_r.masked_fraction())
            e_r = finalize(e_r, before, p, cfg.threshold)
            trace.flushed = True
        else:
            e_r, p = unmask_step(net, image, e_r, cfg, rng, predictor)
        done = before & ~e_r.masked
        when[done] = step
        prob[done] = p[done]
        trace.masked_counts.append(e_r.masked_count())
        step += 1
    trace.finalize_step = when
    trace.probabilities = prob
    trace.forward_passes = predictor.passes
    return e_r.states == EDGE, trace


def predict_map(net: MEMONetwork, image, cfg: InferenceConfig | None = None) -> np.ndarray:
    """Probability-at-finalization map from :func:`run_inference`."""
    return run_inference(net, image, cfg)[1].probabilities
