"""Procedural scenes with exact instance masks and one-pixel contour edge maps.

Scenes are flat-coloured convex shapes over a smooth background.  Each
visible shape region is an instance mask; its contour is the mask minus its
erosion, and the edge map of a scene is the union of those contours.  Blur
and noise touch only the image, so the edge maps stay exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .netpbm import read_netpbm, write_pgm, write_ppm

SHAPE_FAMILIES = ("ellipse", "polygon", "rectangle")

# full 3x3 element: any pixel touching the outside, even diagonally, is contour
CONTOUR_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    shape_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    min_radius: float = 4.0
    max_radius: float = 16.0
    min_area: int = 12
    min_gap: int | None = 2
    margin: int = 1
    background_gradient: bool = True
    noise_sigma: float = 0.02
    blur_sigma: float = 0.5
    min_color_distance: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if len(self.shape_weights) != len(SHAPE_FAMILIES) or sum(self.shape_weights) <= 0:
            raise ValueError("shape_weights needs one non-negative weight per family")
        if self.min_radius <= 0 or self.max_radius < self.min_radius:
            raise ValueError("need 0 < min_radius <= max_radius")


@dataclass
class InstanceMask:
    mask: np.ndarray
    z: int
    color: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy.astype(np.float64), xx.astype(np.float64)


def rasterize_ellipse(h, w, cy, cx, ry, rx, angle) -> np.ndarray:
    yy, xx = _grid(h, w)
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def rasterize_polygon(h, w, vertices) -> np.ndarray:
    """Fill a convex polygon given counter- or clockwise (y, x) vertices."""
    yy, xx = _grid(h, w)
    v = np.asarray(vertices, dtype=np.float64)
    inside_pos = np.ones((h, w), dtype=bool)
    inside_neg = np.ones((h, w), dtype=bool)
    for (y0, x0), (y1, x1) in zip(v, np.roll(v, -1, axis=0)):
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def rasterize_rectangle(h, w, y0, x0, y1, x1) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    out[max(int(y0), 0) : max(int(y1), 0), max(int(x0), 0) : max(int(x1), 0)] = True
    return out


def _random_shape(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    weights = np.asarray(cfg.shape_weights, dtype=np.float64)
    family = SHAPE_FAMILIES[rng.choice(len(SHAPE_FAMILIES), p=weights / weights.sum())]
    ry, rx = rng.uniform(cfg.min_radius, cfg.max_radius, size=2)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if family == "ellipse":
        return rasterize_ellipse(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
    if family == "polygon":
        # vertices on an ellipse are always in convex position
        k = rng.integers(3, 8)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        rot = rng.uniform(0, np.pi)
        c, s = np.cos(rot), np.sin(rot)
        px, py = rx * np.cos(angles), ry * np.sin(angles)
        verts = np.stack([cy + px * s + py * c, cx + px * c - py * s], axis=1)
        return rasterize_polygon(h, w, verts)
    return rasterize_rectangle(h, w, cy - ry, cx - rx, cy + ry, cx + rx)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def compose_instances(shapes: list[np.ndarray]) -> list[InstanceMask]:
    """Resolve z-order (later shapes on top) into disjoint visible masks.

    Shapes left with no visible pixel are dropped; ``z`` keeps the original
    stacking index.
    """
    covered = np.zeros_like(shapes[0], dtype=bool) if shapes else None
    out = []
    for z in reversed(range(len(shapes))):
        visible = shapes[z] & ~covered
        covered |= shapes[z]
        if visible.any():
            out.append(InstanceMask(visible, z))
    out.reverse()
    return out


def _far_from(color, others, dist) -> bool:
    return all(np.linalg.norm(color - o) >= dist for o in others)


def _segment_distance(p, a, b) -> float:
    ab = b - a
    t = 0.0 if not ab.any() else float(np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1))
    return float(np.linalg.norm(p - (a + t * ab)))


def _pick_color(rng, bg0, bg1, used, min_dist) -> np.ndarray:
    best, best_score = None, -1.0
    for _ in range(64):
        c = rng.uniform(0, 1, size=3)
        score = min([_segment_distance(c, bg0, bg1)] + [np.linalg.norm(c - u) for u in used])
        if score >= min_dist:
            return c
        if score > best_score:
            best, best_score = c, score
    return best


def _background(cfg: SceneConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    bg0 = rng.uniform(0, 1, size=3)
    if not cfg.background_gradient:
        return np.broadcast_to(bg0[:, None, None], (3, h, w)).copy(), bg0, bg0
    bg1 = np.clip(bg0 + rng.uniform(-0.25, 0.25, size=3), 0, 1)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = _grid(h, w)
    t = xx * np.cos(theta) + yy * np.sin(theta)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = bg0[:, None, None] + (bg1 - bg0)[:, None, None] * t[None]
    return img, bg0, bg1


def _place_shapes(cfg: SceneConfig, rng) -> list[np.ndarray]:
    h, w, m = cfg.height, cfg.width, cfg.margin
    frame = np.zeros((h, w), dtype=bool)
    if m > 0:
        frame[:m, :] = frame[-m:, :] = frame[:, :m] = frame[:, -m:] = True
    target = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes: list[np.ndarray] = []
    blocked = np.zeros((h, w), dtype=bool)
    attempts = 0
    while len(shapes) < target and attempts < 200 * target:
        attempts += 1
        s = _random_shape(cfg, rng)
        if s.sum() < cfg.min_area or (s & frame).any() or has_thick_contour(s):
            continue
        if cfg.min_gap is not None:
            grown = ndimage.binary_dilation(s, iterations=cfg.min_gap) if cfg.min_gap > 0 else s
            if (grown & blocked).any():
                continue
            blocked |= s
        shapes.append(s)
    return shapes


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[InstanceMask]]:
    """Render one scene; returns an image ``[3, H, W]`` in [0, 1] and its instance masks."""
    img, bg0, bg1 = _background(cfg, rng)
    shapes = _place_shapes(cfg, rng)
    if not shapes:
        raise RuntimeError("could not place any shape; loosen SceneConfig constraints")
    instances = compose_instances(shapes)
    used = []
    for inst in instances:
        inst.color = _pick_color(rng, bg0, bg1, used, cfg.min_color_distance)
        used.append(inst.color)
        img[:, inst.mask] = inst.color[:, None]
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, cfg.blur_sigma, cfg.blur_sigma), mode="nearest")
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0, 1), instances


def mask_to_contour(mask) -> np.ndarray:
    """Mask pixels that disappear under one erosion; off-image counts as background."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=CONTOUR_STRUCTURE, border_value=0)
    return mask & ~eroded


def has_thick_contour(mask) -> bool:
    """True when the contour of ``mask`` contains a solid 2x2 block (parts thinner than 3 px)."""
    e = mask_to_contour(mask)
    return bool((e[:-1, :-1] & e[1:, :-1] & e[:-1, 1:] & e[1:, 1:]).any())


def aggregate_edges(contours) -> np.ndarray:
    contours = [np.asarray(c, dtype=bool) for c in contours]
    if not contours:
        raise ValueError("need at least one contour map")
    shape = contours[0].shape
    if any(c.shape != shape for c in contours):
        raise ValueError("contour maps differ in shape")
    return np.logical_or.reduce(contours)


def scene_edges(instances: list[InstanceMask]) -> np.ndarray:
    return aggregate_edges([mask_to_contour(i.mask) for i in instances])


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    index: int
    seed: int
    image_path: str
    edge_path: str


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def generate_sample(cfg: SceneConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(image ``[3, H, W]`` float in [0, 1], edges bool ``[H, W]``) for one per-sample seed."""
    img, instances = generate_scene(cfg, np.random.default_rng(seed))
    return img, scene_edges(instances)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [0, 1] -> [H, W, 3] uint8."""
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.index}\t{e.seed}\t{e.image_path}\t{e.edge_path}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(int(parts[0]), int(parts[1]), parts[2], parts[3]))
    return entries


def _write_sample(out_dir: Path, cfg: SceneConfig, index: int) -> ManifestEntry:
    seed = sample_seed(cfg.seed, index)
    img, edges = generate_sample(cfg, seed)
    image_rel = f"images/{index:06d}.ppm"
    edge_rel = f"edges/{index:06d}.pgm"
    write_ppm(out_dir / image_rel, quantize_image(img))
    write_pgm(out_dir / edge_rel, edges.astype(np.uint8) * 255)
    return ManifestEntry(index, seed, image_rel, edge_rel)


def build_dataset(n: int, cfg: SceneConfig, out_dir, jobs: int = 1) -> list[ManifestEntry]:
    """Write ``n`` image/edge pairs plus ``manifest.txt`` under ``out_dir``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    out_dir = Path(out_dir)
    for sub in ("images", "edges"):
        path = out_dir / sub
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {path}: {exc}") from exc
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_write_sample, [out_dir] * n, [cfg] * n, range(n)))
    else:
        entries = [_write_sample(out_dir, cfg, i) for i in range(n)]
    write_manifest(out_dir / "manifest.txt", entries)
    return entries


def load_pair(root, entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    img = read_netpbm(root / entry.image_path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    edges = read_netpbm(root / entry.edge_path)
    if edges.ndim == 3:
        edges = edges.mean(axis=2)
    return img.transpose(2, 0, 1).astype(np.float32) / 255.0, edges >= 128


def load_dataset(root) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Read every pair listed in ``root/manifest.txt``; soft edge maps are binarised at 0.5."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {os.fspath(root)}")
    images, edges = [], []
    for entry in read_manifest(manifest):
        img, e = load_pair(root, entry)
        images.append(img)
        edges.append(e)
    return images, edges
