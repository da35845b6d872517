"""Procedural EL-like cell images with crack, finger-interruption and black-core defects.

Images are bright multicrystalline-looking backgrounds with dark vertical
busbars, faint horizontal fingers and dark dislocation clouds (never
annotated).  Defects are binary masks darkened into the background; each
annotation is the tight pixel-edge bounding box of its mask.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio
from .boxes import CLASSES
from .voc import Annotation, VOCRecord, emit_voc

SPLITS = {"train": 1, "test": 2}


class GenerationError(ValueError):
    pass


@dataclass
class DefectSpec:
    cls: str
    geometry: dict


@dataclass
class SceneSpec:
    size: int = 128
    seed: int = 0
    grain_cells: int = 40
    grain_contrast: float = 0.06
    noise: float = 0.02
    busbars: int = 4
    busbar_width: int = 3
    dislocation_density: float = 1.0
    defects: list[DefectSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SampleRecord:
    image: np.ndarray  # uint8 H x W
    annotations: list[Annotation]
    masks: list[np.ndarray]
    metadata: dict


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    return xx + 0.5, yy + 0.5


def _segments_mask(size: int, segments, thickness: float) -> np.ndarray:
    px, py = _grid(size)
    mask = np.zeros((size, size), dtype=bool)
    r = thickness / 2
    for (x0, y0), (x1, y1) in segments:
        dx, dy = x1 - x0, y1 - y0
        denom = dx * dx + dy * dy
        if denom == 0:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0, 1)
        dist2 = (px - (x0 + t * dx)) ** 2 + (py - (y0 + t * dy)) ** 2
        mask |= dist2 <= r * r
    return mask


def _crack_segments(g: dict):
    if g["kind"] == "line":
        pts = g["points"]
        return list(zip(pts[:-1], pts[1:]))
    cx, cy = g["center"]
    return [((cx, cy), (cx + length * math.cos(a), cy + length * math.sin(a))) for a, length in g["arms"]]


def _defect_extent(d: DefectSpec) -> tuple[float, float, float, float]:
    g = d.geometry
    if d.cls == "crack":
        pts = np.array([p for seg in _crack_segments(g) for p in seg], dtype=float)
        r = g["thickness"] / 2
        return pts[:, 0].min() - r, pts[:, 1].min() - r, pts[:, 0].max() + r, pts[:, 1].max() + r
    if d.cls == "finger_interruption":
        return g["x"], g["y"], g["x"] + g["w"], g["y"] + g["h"]
    if d.cls == "black_core":
        cx, cy = g["center"]
        r = max(g["radii"])
        return cx - r, cy - r, cx + r, cy + r
    raise GenerationError(f"unknown defect class {d.cls!r}")


def render_mask(d: DefectSpec, size: int) -> np.ndarray:
    x0, y0, x1, y1 = _defect_extent(d)
    if x0 < 0 or y0 < 0 or x1 > size or y1 > size:
        raise GenerationError(f"{d.cls} extent ({x0:.1f}, {y0:.1f}, {x1:.1f}, {y1:.1f}) leaves the {size}px image")
    g = d.geometry
    if d.cls == "crack":
        mask = _segments_mask(size, _crack_segments(g), g["thickness"])
    elif d.cls == "finger_interruption":
        px, py = _grid(size)
        mask = (px > g["x"]) & (px < g["x"] + g["w"]) & (py > g["y"]) & (py < g["y"] + g["h"])
    else:
        px, py = _grid(size)
        cx, cy = g["center"]
        radii = np.asarray(g["radii"], dtype=float)
        ang = np.mod(np.arctan2(py - cy, px - cx), 2 * np.pi)
        pos = ang / (2 * np.pi) * len(radii)
        i0 = np.floor(pos).astype(int) % len(radii)
        frac = pos - np.floor(pos)
        rad = radii[i0] * (1 - frac) + radii[(i0 + 1) % len(radii)] * frac
        mask = np.hypot(px - cx, py - cy) <= rad
    if not mask.any():
        raise GenerationError(f"{d.cls} renders no pixels")
    return mask


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


# ---------------------------------------------------------------------------
# background
# ---------------------------------------------------------------------------


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    px, py = _grid(n)
    seeds = rng.uniform(0, n, size=(spec.grain_cells, 2))
    levels = rng.normal(0, spec.grain_contrast, size=spec.grain_cells)
    d2 = (px[None] - seeds[:, 0, None, None]) ** 2 + (py[None] - seeds[:, 1, None, None]) ** 2
    img = 0.72 + levels[d2.argmin(axis=0)]
    img = ndimage.gaussian_filter(img, 1.0)
    img += rng.normal(0, spec.noise, size=(n, n))
    # faint horizontal fingers
    img[::6, :] *= 0.95
    # dislocation clouds
    for _ in range(rng.poisson(spec.dislocation_density * 2)):
        field_ = ndimage.gaussian_filter(rng.normal(size=(n, n)), rng.uniform(2, 5))
        cx, cy = rng.uniform(0, n, size=2)
        rad = rng.uniform(8, 30)
        fall = np.exp(-((px - cx) ** 2 + (py - cy) ** 2) / (2 * rad * rad))
        cloud = np.clip(field_ / (field_.std() + 1e-12), 0, None) * fall
        img *= 1 - rng.uniform(0.15, 0.35) * np.clip(cloud, 0, 1)
    # busbars
    if spec.busbars:
        gap = n / spec.busbars
        for b in range(spec.busbars):
            x = int(round(gap * (b + 0.5) - spec.busbar_width / 2))
            img[:, x : x + spec.busbar_width] *= 0.45
    return img


def generate(spec: SceneSpec) -> SampleRecord:
    """Render a scene; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    img = _background(spec, rng)
    annotations, masks = [], []
    for d in spec.defects:
        if d.cls not in CLASSES:
            raise GenerationError(f"unknown defect class {d.cls!r}")
        mask = render_mask(d, spec.size)
        depth = float(d.geometry.get("depth", 0.6))
        img = np.where(mask, img * (1 - depth), img)
        annotations.append(Annotation(d.cls, *tight_box(mask)))
        masks.append(mask)
    pixels = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    meta = {"seed": spec.seed, "spec_hash": spec.digest(), "size": spec.size}
    return SampleRecord(pixels, annotations, masks, meta)


# ---------------------------------------------------------------------------
# random scenes
# ---------------------------------------------------------------------------


def _random_crack(rng: np.random.Generator, n: int) -> dict:
    thickness = float(rng.uniform(1.6, 2.6))
    depth = float(rng.uniform(0.45, 0.7))
    scale = float(np.exp(rng.uniform(np.log(8), np.log(40))))
    if rng.random() < 0.5:
        k = int(rng.integers(3, 7))
        base = rng.uniform(0, 2 * np.pi)
        arms = [[float(base + 2 * np.pi * i / k + rng.uniform(-0.4, 0.4)), float(scale * rng.uniform(0.5, 1.0))]
                for i in range(k)]
        m = scale + thickness
        center = [float(rng.uniform(m, n - m)), float(rng.uniform(m, n - m))]
        return {"kind": "star", "center": center, "arms": arms, "thickness": thickness, "depth": depth}
    segs = int(rng.integers(2, 5))
    length = 2 * scale
    heading = rng.uniform(0, 2 * np.pi)
    pts = [np.zeros(2)]
    for _ in range(segs):
        heading += rng.uniform(-0.6, 0.6)
        step = length / segs
        pts.append(pts[-1] + step * np.array([math.cos(heading), math.sin(heading)]))
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    m = thickness
    if np.any(hi - lo > n - 2 * m - 1):
        pts = (pts - lo) * ((n - 2 * m - 1) / max(hi - lo)) + lo
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    off = np.array([rng.uniform(m - lo[0], n - m - hi[0]), rng.uniform(m - lo[1], n - m - hi[1])])
    pts = pts + off
    return {"kind": "line", "points": pts.tolist(), "thickness": thickness, "depth": depth}


def _random_finger(rng: np.random.Generator, n: int) -> dict:
    w = float(rng.uniform(4, 9))
    h = float(rng.uniform(14, 40))
    return {"x": float(rng.uniform(1, n - w - 1)), "y": float(rng.uniform(1, n - h - 1)), "w": w, "h": h,
            "depth": float(rng.uniform(0.4, 0.6))}


def _random_black_core(rng: np.random.Generator, n: int) -> dict:
    r = float(rng.uniform(10, 28))
    k = 16
    radii = r * np.exp(ndimage.gaussian_filter1d(rng.normal(0, 0.25, size=k), 1.0, mode="wrap"))
    radii = np.clip(radii, 0.6 * r, 1.3 * r)
    m = float(radii.max()) + 1
    return {"center": [float(rng.uniform(m, n - m)), float(rng.uniform(m, n - m))],
            "radii": radii.tolist(), "depth": float(rng.uniform(0.6, 0.8))}


_SAMPLERS = {"crack": _random_crack, "finger_interruption": _random_finger, "black_core": _random_black_core}


def random_scene(seed: int, size: int = 128, defect_free_prob: float = 0.15, max_defects: int = 3,
                 classes: list[str] | None = None) -> SceneSpec:
    """Sample a scene: 0 defects with ``defect_free_prob``, else 1..max_defects
    defects of uniformly drawn classes whose boxes do not touch (2 px margin)."""
    rng = np.random.default_rng(seed)
    spec = SceneSpec(size=size, seed=int(rng.integers(2**31)), dislocation_density=float(rng.uniform(0.3, 1.5)))
    if classes is None:
        count = 0 if rng.random() < defect_free_prob else int(rng.integers(1, max_defects + 1))
        classes = [CLASSES[int(rng.integers(len(CLASSES)))] for _ in range(count)]
    boxes: list[tuple[float, float, float, float]] = []
    for cls in classes:
        for _ in range(50):
            d = DefectSpec(cls, _SAMPLERS[cls](rng, size))
            x0, y0, x1, y1 = _defect_extent(d)
            if all(x0 > b[2] + 2 or x1 < b[0] - 2 or y0 > b[3] + 2 or y1 < b[1] - 2 for b in boxes):
                boxes.append((x0, y0, x1, y1))
                spec.defects.append(d)
                break
    return spec


def sample_seed(master: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([master, SPLITS[split], index])
    return int(ss.generate_state(1)[0])


def emit_dataset(n: int, split: str, out_dir: str | Path, seed: int = 0, size: int = 128) -> Path:
    """Write ``n`` PGM/XML pairs plus ``manifest.csv``; returns the manifest path."""
    if n <= 0:
        raise ValueError("n must be positive")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        spec = random_scene(sample_seed(seed, split, i), size)
        rec = generate(spec)
        stem = f"{split}_{i:05d}"
        imageio.write_pgm(out / f"{stem}.pgm", rec.image)
        voc = VOCRecord(f"{stem}.pgm", size, size, 1, rec.annotations)
        (out / f"{stem}.xml").write_text(emit_voc(voc))
        counts = {c: sum(a.name == c for a in rec.annotations) for c in CLASSES}
        rows.append({"image": f"{stem}.pgm", "annotation": f"{stem}.xml",
                     "classes": ";".join(sorted({a.name for a in rec.annotations})),
                     **{f"n_{c}": counts[c] for c in CLASSES}, "spec_hash": rec.metadata["spec_hash"]})
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
