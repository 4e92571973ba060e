"""Procedural soiling scenes, YUV420 planar codec and on-disk datasets.

Soiled regions are laid out on the tile grid first and then given organic
edges by displacing the lookup coordinates with a smooth noise field of at
most ``JITTER`` pixels.  Since ``JITTER`` is well under half a tile, every
tile keeps a clear majority of its planned class while the region outlines
stay irregular at pixel level.
"""

import enum
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DivisibilityError, ShapeError

TILE = 64
JITTER = 12
CAMERAS = ("FV", "RV", "MVL", "MVR")
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.6, 0.2, 0.2)
MANIFEST_NAME = "manifest.json"


class SoilClass(enum.IntEnum):
    CLEAN = 0
    OPAQUE = 1
    TRANSPARENT = 2


# larger wins a tie in label_tiles
_TIE_PRIORITY = np.array([0, 2, 1])

_OPAQUE_PALETTE = np.array([[58, 44, 30], [132, 100, 46], [42, 40, 38], [92, 72, 50], [110, 84, 40]], float)


# -- YUV420 ---------------------------------------------------------------------


@dataclass(frozen=True)
class Yuv420Frame:
    width: int
    height: int
    y: np.ndarray  # (H, W) uint8
    u: np.ndarray  # (H/2, W/2) uint8
    v: np.ndarray

    def __post_init__(self):
        if self.width % 2 or self.height % 2:
            raise ShapeError(f"YUV420 needs even dimensions, got {self.width}x{self.height}", dim="width")
        if self.y.shape != (self.height, self.width):
            raise ShapeError(f"y plane {self.y.shape} != {(self.height, self.width)}", dim="y")
        half = (self.height // 2, self.width // 2)
        if self.u.shape != half or self.v.shape != half:
            raise ShapeError(f"chroma planes {self.u.shape}, {self.v.shape} != {half}", dim="uv")

    def to_bytes(self):
        return self.y.tobytes() + self.u.tobytes() + self.v.tobytes()

    @classmethod
    def from_bytes(cls, data, width, height):
        n, m = width * height, (width // 2) * (height // 2)
        if len(data) != n + 2 * m:
            raise ShapeError(f"expected {n + 2 * m} bytes for {width}x{height} YUV420, got {len(data)}", dim="bytes")
        buf = np.frombuffer(data, np.uint8)
        return cls(
            width, height,
            buf[:n].reshape(height, width).copy(),
            buf[n : n + m].reshape(height // 2, width // 2).copy(),
            buf[n + m :].reshape(height // 2, width // 2).copy(),
        )


def _round_u8(x):
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def rgb_to_yuv420(rgb):
    """Full-range BT.601, chroma averaged over 2x2 blocks."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"rgb image must be (H, W, 3), got {rgb.shape}", dim="channels")
    h, w = rgb.shape[:2]
    if h % 2 or w % 2:
        raise ShapeError(f"YUV420 needs even dimensions, got {w}x{h}", dim="width" if w % 2 else "height")
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    v = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    box = lambda p: p.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return Yuv420Frame(w, h, _round_u8(y), _round_u8(box(u)), _round_u8(box(v)))


def yuv420_to_rgb(frame):
    y = frame.y.astype(np.float64)
    u = np.repeat(np.repeat(frame.u.astype(np.float64) - 128.0, 2, 0), 2, 1)
    v = np.repeat(np.repeat(frame.v.astype(np.float64) - 128.0, 2, 0), 2, 1)
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    return _round_u8(np.stack([r, g, b], axis=-1))


# -- tile labels --------------------------------------------------------------


@dataclass(frozen=True)
class TileLabelGrid:
    labels: np.ndarray  # (rows, cols) of SoilClass codes

    @property
    def rows(self):
        return self.labels.shape[0]

    @property
    def cols(self):
        return self.labels.shape[1]

    def to_text(self):
        return "".join(" ".join(str(int(v)) for v in row) + "\n" for row in self.labels)

    @classmethod
    def from_text(cls, text):
        rows = [[int(t) for t in line.split()] for line in text.splitlines() if line.strip()]
        labels = np.array(rows, dtype=np.uint8)
        if labels.ndim != 2 or labels.size == 0 or labels.max() > 2:
            raise ValueError("label grid must be a non-empty rectangle of codes 0..2")
        return cls(labels)


def tile_counts(mask, tile=TILE):
    """(rows, cols, 3) pixel count per class in every tile."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % tile or w % tile:
        raise DivisibilityError(f"mask {w}x{h} not divisible by tile {tile}")
    rows, cols = h // tile, w // tile
    t = mask.reshape(rows, tile, cols, tile).transpose(0, 2, 1, 3).reshape(rows, cols, -1)
    return np.stack([(t == c).sum(axis=-1) for c in SoilClass], axis=-1)


def label_tiles(mask, tile=TILE):
    """Pixel-majority class per tile; ties go Opaque > Transparent > Clean."""
    counts = tile_counts(mask, tile)
    score = counts.astype(np.int64) * 4 + _TIE_PRIORITY
    return TileLabelGrid(score.argmax(axis=-1).astype(np.uint8))


# -- scenes -------------------------------------------------------------------


def _smooth_noise(rng, h, w, cell, amplitude):
    """Band-limited noise in [-amplitude, amplitude] with features about ``cell`` px wide."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    fine = ndimage.zoom(coarse, (h / (gh - 1), w / (gw - 1)), order=3, mode="nearest", grid_mode=False)
    fine = fine[:h, :w]
    return amplitude * np.clip(fine, -1.0, 1.0)


def _base_scene(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c0, c1 = rng.uniform(30, 225, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx / w + np.sin(theta) * yy / h + 1) / 2
    img = c0 + (c1 - c0) * t[..., None]
    img += 20 * np.sin(2 * np.pi * (xx / w * rng.uniform(0.5, 2) + rng.uniform()))[..., None]
    for _ in range(rng.integers(6, 15)):
        color = rng.uniform(0, 255, size=3)
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if kind == 0:
            hh, ww = rng.uniform(8, h / 3), rng.uniform(8, w / 3)
            sel = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        elif kind == 1:
            rad = rng.uniform(6, min(h, w) / 4)
            sel = (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
        else:
            a = rng.uniform(0, np.pi)
            sel = np.abs((yy - cy) * np.cos(a) - (xx - cx) * np.sin(a)) < rng.uniform(1.5, 5)
        img[sel] = color
    # fine texture so blur is visible at the pixel level
    img += rng.normal(0, 14, size=(h, w, 1)) + rng.normal(0, 4, size=(h, w, 3))
    return np.clip(img, 0, 255)


def _coarse_layout(rng, rows, cols):
    """Tile-resolution class plan: a few elliptical patches of soiling."""
    plan = np.zeros((rows, cols), np.uint8)
    ty, tx = np.mgrid[0:rows, 0:cols] + 0.5
    while not plan.any():
        for _ in range(rng.integers(1, 4)):
            cls = SoilClass.OPAQUE if rng.random() < 0.5 else SoilClass.TRANSPARENT
            cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
            ry, rx = rng.uniform(0.7, max(1.0, rows * 0.7)), rng.uniform(0.7, max(1.0, cols * 0.6))
            plan[((ty - cy) / ry) ** 2 + ((tx - cx) / rx) ** 2 < 1.0] = cls
    return plan


def _jittered_mask(rng, plan, h, w):
    dy = _smooth_noise(rng, h, w, 24, JITTER)
    dx = _smooth_noise(rng, h, w, 24, JITTER)
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.clip(np.floor((yy + dy) / TILE).astype(int), 0, plan.shape[0] - 1)
    c = np.clip(np.floor((xx + dx) / TILE).astype(int), 0, plan.shape[1] - 1)
    return plan[r, c]


def _apply_soiling(rng, base, mask):
    img = base.copy()
    h, w = mask.shape
    opaque = mask == SoilClass.OPAQUE
    if opaque.any():
        color = _OPAQUE_PALETTE[rng.integers(len(_OPAQUE_PALETTE))] * rng.uniform(0.8, 1.15)
        shade = _smooth_noise(rng, h, w, 32, 10)[..., None]
        blob = color + shade + rng.normal(0, 2.0, size=(h, w, 1))
        img[opaque] = np.clip(blob, 0, 255)[opaque]
    clear = mask == SoilClass.TRANSPARENT
    if clear.any():
        sigma = rng.uniform(3.0, 5.0)
        blur = ndimage.gaussian_filter(base, sigma=(sigma, sigma, 0))
        gray = blur.mean(axis=-1, keepdims=True)
        haze = 0.35 * blur + 0.65 * gray + rng.uniform(10, 40)
        alpha = rng.uniform(0.8, 0.95)
        mixed = alpha * haze + (1 - alpha) * base
        img[clear] = np.clip(mixed, 0, 255)[clear]
    return img


def generate_scene(seed, width, height, overlay_prob=1.0, full_cover=None):
    """RGB uint8 image (H, W, 3) and per-pixel class mask (H, W).

    ``overlay_prob`` is the chance the scene receives any soiling;
    ``full_cover`` (a :class:`SoilClass`) soils the entire frame with one class.
    """
    if width % TILE or height % TILE or width < TILE or height < TILE:
        raise DivisibilityError(f"scene {width}x{height} must be a positive multiple of {TILE}")
    rng = np.random.default_rng(seed)
    base = _base_scene(rng, height, width)
    if full_cover is not None:
        mask = np.full((height, width), int(full_cover), np.uint8)
    elif rng.random() < overlay_prob:
        plan = _coarse_layout(rng, height // TILE, width // TILE)
        mask = _jittered_mask(rng, plan, height, width).astype(np.uint8)
    else:
        mask = np.zeros((height, width), np.uint8)
    img = _apply_soiling(rng, base, mask)
    return _round_u8(img), mask


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    counts: dict = field(default_factory=lambda: {c: 25 for c in CAMERAS})
    clean_bias: float = 0.486
    seed: int = 42
    width: int = 320
    height: int = 192
    ratios: tuple = SPLIT_RATIOS

    def __post_init__(self):
        if set(self.counts) - set(CAMERAS):
            raise ValueError(f"unknown camera tags {sorted(set(self.counts) - set(CAMERAS))}")
        if any(n < 0 for n in self.counts.values()) or self.total < 1:
            raise ValueError("sample counts must be >= 0 with at least one sample")
        if not 0.0 <= self.clean_bias <= 1.0:
            raise ValueError(f"clean_bias must be in [0, 1], got {self.clean_bias}")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValueError(f"split ratios must be three non-negative fractions summing to 1, got {self.ratios}")

    @property
    def total(self):
        return sum(self.counts.values())

    @classmethod
    def even(cls, samples, **kw):
        """Spread ``samples`` over the four cameras, remainder to the first ones."""
        q, r = divmod(samples, len(CAMERAS))
        return cls(counts={c: q + (i < r) for i, c in enumerate(CAMERAS)}, **kw)


def split_sizes(n, ratios=SPLIT_RATIOS):
    train = round(n * ratios[0])
    val = min(n - train, round(n * ratios[1]))
    return train, val, n - train - val


@dataclass(frozen=True)
class Sample:
    id: str
    frame: str
    label: str
    split: str
    camera: str
    all_clean: bool


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    width: int
    height: int
    clean_bias: float
    samples: tuple
    tallies: dict

    def to_json(self):
        d = asdict(self)
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["samples"] = tuple(Sample(**s) for s in d["samples"])
        return cls(**d)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {name!r}")
        return [s for s in self.samples if s.split == name]


def sample_seed(seed, index):
    """Per-sample seed material, independent of generation order."""
    return [int(seed), int(index)]


def clean_sample_count(n, clean_bias):
    """Number of all-clean samples among ``n`` for a clean-bias fraction."""
    return round(clean_bias * n)


def _tally(entries):
    counts = {c.name.lower(): 0 for c in SoilClass}
    for grid in entries:
        for c in SoilClass:
            counts[c.name.lower()] += int((grid.labels == c).sum())
    return counts


def build_dataset(config, root):
    """Generate, split and write a dataset; returns its manifest."""
    n = config.total
    n_clean = clean_sample_count(n, config.clean_bias)
    order = np.random.default_rng(config.seed)
    clean_ids = set(order.permutation(n)[:n_clean].tolist())
    perm = order.permutation(n)
    sizes = split_sizes(n, config.ratios)
    split_of = np.empty(n, dtype=object)
    split_of[perm[: sizes[0]]] = "train"
    split_of[perm[sizes[0] : sizes[0] + sizes[1]]] = "val"
    split_of[perm[sizes[0] + sizes[1] :]] = "test"
    cameras = [c for c in CAMERAS for _ in range(config.counts.get(c, 0))]

    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    samples, grids = [], []
    for i in range(n):
        sid = f"{i:06d}"
        rgb, mask = generate_scene(
            sample_seed(config.seed, i), config.width, config.height,
            overlay_prob=0.0 if i in clean_ids else 1.0,
        )
        grid = label_tiles(mask)
        frame_rel, label_rel = f"frames/{sid}.yuv", f"labels/{sid}.txt"
        with open(os.path.join(root, frame_rel), "wb") as f:
            f.write(rgb_to_yuv420(rgb).to_bytes())
        with open(os.path.join(root, label_rel), "w", encoding="ascii", newline="\n") as f:
            f.write(grid.to_text())
        samples.append(Sample(sid, frame_rel, label_rel, split_of[i], cameras[i], i in clean_ids))
        grids.append(grid)

    tallies = {
        "per_camera": {c: _tally([g for s, g in zip(samples, grids) if s.camera == c]) for c in CAMERAS},
        "per_split": {sp: _tally([g for s, g in zip(samples, grids) if s.split == sp]) for sp in SPLITS},
        "samples_per_split": {sp: sum(s.split == sp for s in samples) for sp in SPLITS},
        "all_clean_samples": len(clean_ids),
        "total": _tally(grids),
    }
    manifest = DatasetManifest(config.seed, config.width, config.height, config.clean_bias, tuple(samples), tallies)
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as f:
        f.write(manifest.to_json())
    return manifest


def load_manifest(root):
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as f:
        return DatasetManifest.from_json(f.read())


def load_frame(root, manifest, sample):
    with open(os.path.join(root, sample.frame), "rb") as f:
        return Yuv420Frame.from_bytes(f.read(), manifest.width, manifest.height)


def load_labels(root, sample):
    with open(os.path.join(root, sample.label), encoding="ascii") as f:
        return TileLabelGrid.from_text(f.read())


def load_split(root, split, manifest=None):
    """Stack a split as uint8 arrays: y (N,1,H,W), uv (N,2,H/2,W/2), labels (N,R,C)."""
    manifest = manifest or load_manifest(root)
    entries = manifest.split(split)
    ys, uvs, labels = [], [], []
    for s in entries:
        fr = load_frame(root, manifest, s)
        ys.append(fr.y[None])
        uvs.append(np.stack([fr.u, fr.v]))
        labels.append(load_labels(root, s).labels)
    if not entries:
        h, w = manifest.height, manifest.width
        return (np.zeros((0, 1, h, w), np.uint8), np.zeros((0, 2, h // 2, w // 2), np.uint8),
                np.zeros((0, h // TILE, w // TILE), np.uint8), entries)
    return np.stack(ys), np.stack(uvs), np.stack(labels), entries
