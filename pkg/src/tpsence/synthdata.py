"""Procedural clear/rainy street scenes with exact segmentation maps.

Scenes are sky over road with rectangular vehicles and round lights; rain is a
composition of global darkening, road reflections, alpha-blended streaks and a
mist blur.  Everything is a pure function of the seeds.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .semantic import SegMap, load_segmap, save_segmap

SKY, ROAD, VEHICLE, LIGHT = 0, 1, 2, 3
NUM_CLASSES = 4
SPLITS = ("trainA", "testA", "trainB", "testB")
IMAGE_EXTS = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "vehicle" (rectangle) or "light" (circle)
    x: int  # left (vehicle) or centre (light)
    y: int  # top (vehicle) or centre (light)
    w: int  # width (vehicle) or radius (light)
    h: int  # height (vehicle); unused for lights
    color: tuple[float, float, float]

    @property
    def class_id(self) -> int:
        return VEHICLE if self.kind == "vehicle" else LIGHT


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 64
    horizon: float = 0.45
    objects: tuple[SceneObject, ...] = ()
    sky_color: tuple[float, float, float] = (0.55, 0.7, 0.9)
    road_color: tuple[float, float, float] = (0.4, 0.4, 0.42)

    def __post_init__(self):
        if not 0.0 < self.horizon < 1.0:
            raise ValueError("horizon fraction must be in (0, 1)")
        for ob in self.objects:
            if ob.kind == "vehicle":
                inside = 0 <= ob.x and 0 <= ob.y and ob.x + ob.w <= self.size and ob.y + ob.h <= self.size
            elif ob.kind == "light":
                inside = ob.w <= ob.x < self.size - ob.w and ob.w <= ob.y < self.size - ob.w
            else:
                raise ValueError(f"unknown object kind {ob.kind!r}")
            if not inside:
                raise ValueError(f"object {ob} leaves the {self.size}px canvas")

    @property
    def horizon_row(self) -> int:
        return int(round(self.horizon * self.size))


@dataclass(frozen=True)
class WeatherParams:
    streaks: int = 0
    angle_range: tuple[float, float] = (-15.0, -5.0)  # degrees from vertical
    streak_opacity: float = 0.0
    darkening: float = 0.0  # fraction of brightness removed
    reflection: float = 0.0
    mist_radius: float = 0.0

    def __post_init__(self):
        for name in ("streak_opacity", "darkening", "reflection"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.streaks < 0 or self.mist_radius < 0:
            raise ValueError("streak count and mist radius must be non-negative")
        if self.angle_range[0] > self.angle_range[1]:
            raise ValueError("angle_range must be (low, high)")


def random_scene(seed: int, size: int = 64) -> SceneSpec:
    rng = np.random.default_rng(seed)
    horizon = float(rng.uniform(0.35, 0.6))
    hrow = int(round(horizon * size))
    objects = []
    for _ in range(int(rng.integers(1, 5))):
        w = int(rng.integers(size // 8, size // 3))
        h = int(rng.integers(size // 10, size // 5))
        x = int(rng.integers(0, size - w))
        y = int(np.clip(hrow - h // 2 + rng.integers(0, size // 4), 0, size - h))
        color = tuple(float(c) for c in rng.uniform(0.1, 0.95, 3))
        objects.append(SceneObject("vehicle", x, y, w, h, color))
    for _ in range(int(rng.integers(0, 4))):
        r = int(rng.integers(1, 4))
        x = int(rng.integers(r, size - r))
        y = int(rng.integers(r, max(r + 1, hrow - r)))
        objects.append(SceneObject("light", x, y, r, 0, (1.0, 0.9, float(rng.uniform(0.3, 0.7)))))
    sky = tuple(float(c) for c in rng.uniform([0.45, 0.6, 0.75], [0.65, 0.8, 0.95]))
    road = tuple(float(c) for c in np.full(3, rng.uniform(0.3, 0.5)) + [0.0, 0.0, 0.02])
    return SceneSpec(seed, size, horizon, tuple(objects), sky, road)


def random_weather(seed: int) -> WeatherParams:
    rng = np.random.default_rng(seed)
    return WeatherParams(
        streaks=int(rng.integers(30, 70)),
        angle_range=(-20.0, -5.0),
        streak_opacity=float(rng.uniform(0.25, 0.5)),
        darkening=float(rng.uniform(0.3, 0.45)),
        reflection=float(rng.uniform(0.2, 0.4)),
        mist_radius=float(rng.uniform(0.5, 1.0)),
    )


def _object_mask(ob: SceneObject, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if ob.kind == "vehicle":
        return (xx >= ob.x) & (xx < ob.x + ob.w) & (yy >= ob.y) & (yy < ob.y + ob.h)
    return (xx - ob.x) ** 2 + (yy - ob.y) ** 2 <= ob.w ** 2


def gen_scene(spec: SceneSpec) -> tuple[np.ndarray, SegMap]:
    """Render an H×W×3 float image in [0,1] and its segmap; later objects paint over earlier ones."""
    size = spec.size
    img = np.empty((size, size, 3))
    seg = np.empty((size, size), dtype=np.uint8)
    hrow = spec.horizon_row
    img[:hrow] = spec.sky_color
    seg[:hrow] = SKY
    img[hrow:] = spec.road_color
    seg[hrow:] = ROAD
    for ob in spec.objects:
        mask = _object_mask(ob, size)
        img[mask] = ob.color
        seg[mask] = ob.class_id
    return img, SegMap(seg, NUM_CLASSES)


def _horizon_of(segmap: SegMap) -> int:
    # first row where road appears; reflections mirror about it
    rows = np.nonzero((segmap.classes == ROAD).any(axis=1))[0]
    return int(rows[0]) if rows.size else segmap.height


def apply_rain(image: np.ndarray, segmap: SegMap, wp: WeatherParams, seed: int) -> np.ndarray:
    """Darken, reflect onto road pixels, composite streaks, blur; the segmap is unchanged."""
    out = image * (1.0 - wp.darkening) if wp.darkening else image.copy()
    if wp.reflection:
        h = _horizon_of(segmap)
        road = segmap.classes == ROAD
        src = out.copy()
        for r in range(h, out.shape[0]):
            m = 2 * h - r - 1
            if m < 0:
                break
            row_mask = road[r]
            out[r, row_mask] = (1.0 - wp.reflection) * src[r, row_mask] + wp.reflection * src[m, row_mask]
    if wp.streaks and wp.streak_opacity:
        rng = np.random.default_rng(seed)
        hgt, wid = out.shape[:2]
        layer = Image.new("L", (wid, hgt), 0)
        draw = ImageDraw.Draw(layer)
        for _ in range(wp.streaks):
            x0, y0 = rng.uniform(0, wid), rng.uniform(-hgt * 0.2, hgt)
            length = rng.uniform(hgt * 0.08, hgt * 0.25)
            ang = np.deg2rad(rng.uniform(*wp.angle_range))
            x1, y1 = x0 + length * np.sin(ang), y0 + length * np.cos(ang)
            draw.line([(x0, y0), (x1, y1)], fill=255, width=1)
        alpha = np.asarray(layer, dtype=np.float64)[..., None] / 255.0 * wp.streak_opacity
        out = (1.0 - alpha) * out + alpha * 0.9
    if wp.mist_radius:
        out = gaussian_filter(out, sigma=(wp.mist_radius, wp.mist_radius, 0), mode="nearest")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- files


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    """Write an H×W×3 float image in [0,1] as 8-bit PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


@dataclass
class DatasetManifest:
    root: Path
    entries: dict[str, list[tuple[Path, Path | None]]] = field(default_factory=dict)

    def split(self, name: str) -> list[tuple[Path, Path | None]]:
        return self.entries.get(name, [])

    def validate(self) -> None:
        seen: dict[Path, str] = {}
        for split, items in self.entries.items():
            for img, seg in items:
                for p in (img, seg):
                    if p is not None and not p.exists():
                        raise DatasetError(f"manifest path missing: {p}")
                if img in seen:
                    raise DatasetError(f"{img} appears in both {seen[img]} and {split}")
                seen[img] = split

    def write(self, path) -> Path:
        path = Path(path)
        lines = []
        for split in sorted(self.entries, key=lambda s: (SPLITS.index(s) if s in SPLITS else 99, s)):
            for img, seg in self.entries[split]:
                rel_seg = "" if seg is None else seg.relative_to(self.root).as_posix()
                lines.append(f"{split}\t{img.relative_to(self.root).as_posix()}\t{rel_seg}")
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        root = path.parent
        entries: dict[str, list[tuple[Path, Path | None]]] = {}
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{n}: expected 3 tab-separated fields")
            split, img, seg = parts
            entries.setdefault(split, []).append((root / img, root / seg if seg else None))
        manifest = cls(root, entries)
        manifest.validate()
        return manifest


def _item_seed(seed: int, split: str, index: int, role: str) -> int:
    digest = hashlib.sha256(f"{seed}:{split}:{index}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def build_dataset(counts: dict[str, int] | tuple[int, int, int, int], root, seed: int = 0,
                  size: int = 64) -> DatasetManifest:
    """Render trainA/testA (clear) and trainB/testB (rainy, different scenes) under ``root``.

    ``counts`` is a mapping split -> count or a (trainA, testA, trainB, testB) tuple.
    """
    if not isinstance(counts, dict):
        counts = dict(zip(SPLITS, counts))
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset root {root}: {exc}") from exc
    entries: dict[str, list[tuple[Path, Path | None]]] = {}
    used: dict[int, str] = {}
    for split in SPLITS:
        items = []
        rainy = split.endswith("B")
        for i in range(int(counts.get(split, 0))):
            scene_seed = _item_seed(seed, split, i, "scene")
            if scene_seed in used:
                raise DatasetError(f"scene seed collision between {used[scene_seed]} and {split}")
            used[scene_seed] = split
            img, seg = gen_scene(random_scene(scene_seed, size))
            if rainy:
                img = apply_rain(img, seg, random_weather(_item_seed(seed, split, i, "weather")),
                                 _item_seed(seed, split, i, "streaks"))
            img_path = root / split / f"{i:05d}.png"
            seg_path = root / f"{split}_seg" / f"{i:05d}.png"
            save_image(img, img_path)
            save_segmap(seg, seg_path)
            items.append((img_path, seg_path))
        entries[split] = items
    manifest = DatasetManifest(root, entries)
    manifest.write(root / "manifest.tsv")
    manifest.validate()
    return manifest


@dataclass
class DomainItem:
    name: str
    image: np.ndarray  # H×W×3 in [0,1]
    segmap: SegMap | None


def load_image_folder(path, expect_segmaps: bool = False, segmap_dir=None,
                      num_classes: int = NUM_CLASSES) -> list[DomainItem]:
    """Load every image in ``path`` in lexicographic order.

    Segmaps are looked up by filename in ``segmap_dir`` (default ``<path>_seg``);
    a missing segmap is an error only when ``expect_segmaps`` is set.
    """
    path = Path(path)
    seg_root = Path(segmap_dir) if segmap_dir is not None else path.with_name(path.name + "_seg")
    items = []
    for f in sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTS):
        img = load_image(f)
        seg_path = seg_root / (f.stem + ".png")
        seg = None
        if seg_path.exists():
            seg = load_segmap(seg_path, num_classes)
        elif expect_segmaps:
            raise DatasetError(f"missing segmap for {f} (looked for {seg_path})")
        if seg is not None and (seg.height, seg.width) != img.shape[:2]:
            raise DatasetError(
                f"{f}: image {img.shape[0]}×{img.shape[1]} vs segmap {seg.height}×{seg.width}")
        items.append(DomainItem(f.name, img, seg))
    return items


def load_split(manifest: DatasetManifest, split: str, expect_segmaps: bool = False,
               num_classes: int = NUM_CLASSES) -> list[DomainItem]:
    items = []
    for img_path, seg_path in manifest.split(split):
        img = load_image(img_path)
        seg = load_segmap(seg_path, num_classes) if seg_path is not None else None
        if seg is None and expect_segmaps:
            raise DatasetError(f"missing segmap for {img_path}")
        if seg is not None and (seg.height, seg.width) != img.shape[:2]:
            raise DatasetError(f"{img_path}: image and segmap sizes differ")
        items.append(DomainItem(img_path.name, img, seg))
    return items
