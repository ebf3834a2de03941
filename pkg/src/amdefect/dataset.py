"""Tiles, label sets, manifests, PNG I/O, splitting, noise and the surrogate corpus."""

from __future__ import annotations

import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

LABEL_SETS: dict[str, tuple[str, ...]] = {
    "jbk75": ("no-defect", "short-feed", "had-defect", "short-feed+had-defect"),
    "hr1": ("no-defect", "seeded_1", "seeded_2", "seeded_3"),
    "combined": ("no-defect", "had-defect", "short-feed+had-defect", "short-feed",
                 "seeded_1", "seeded_2", "seeded_3"),
}

SPLITS = ("train", "test")


class ImageIOError(OSError):
    pass


def label_names(label_set: str) -> tuple[str, ...]:
    try:
        return LABEL_SETS[label_set]
    except KeyError:
        raise ValueError(f"unknown label set {label_set!r}; known: {sorted(LABEL_SETS)}") from None


def label_index(label_set: str, name: str) -> int:
    names = label_names(label_set)
    if name not in names:
        raise ValueError(f"class {name!r} is not in label set {label_set!r}")
    return names.index(name)


@dataclass
class ImageTile:
    pixels: np.ndarray
    source_id: str = ""
    label: str = "no-defect"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"tile pixels must be H x W x C with H, W > 0, got {px.shape}")
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


# PNG I/O

def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid that PNG storage imposes."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def save_png(img: ImageTile | np.ndarray, path: str | Path) -> None:
    px = img.pixels if isinstance(img, ImageTile) else np.asarray(img)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    data = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def decode_png_bytes(payload: bytes, name: str = "<bytes>") -> np.ndarray:
    import io

    try:
        with Image.open(io.BytesIO(payload)) as im:
            if im.format != "PNG":
                raise ValueError(f"not a PNG (format {im.format})")
            im.load()
            return _to_rgb_array(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"{name}: cannot decode PNG ({exc})") from exc


def _to_rgb_array(im: Image.Image) -> np.ndarray:
    if im.mode in ("L", "I;16", "I", "1", "P", "LA"):
        im = im.convert("L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
        return np.repeat(arr[:, :, None], 3, axis=2)
    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def load_png(path: str | Path, label: str = "no-defect") -> ImageTile:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = _to_rgb_array(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot read PNG ({exc})") from exc
    return ImageTile(arr, source_id=path.stem, label=label)


# tiling

def tile_layer(layer: np.ndarray, boxes: Iterable[Sequence[int]], label: str = "no-defect",
               source_id: str = "layer") -> list[ImageTile]:
    """Crop ``(x, y, w, h)`` boxes out of a layer image, in the given order."""
    layer = np.asarray(layer, dtype=np.float32)
    if layer.ndim == 2:
        layer = layer[:, :, None]
    H, W = layer.shape[:2]
    tiles = []
    for k, box in enumerate(boxes):
        x, y, w, h = (int(v) for v in box)
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > W or y + h > H:
            raise ValueError(f"crop box {k} {(x, y, w, h)} is outside the {W}x{H} layer")
        tiles.append(ImageTile(layer[y:y + h, x:x + w].copy(), f"{source_id}_{k:04d}", label))
    return tiles


def grid_boxes(height: int, width: int, size: int = 400) -> list[tuple[int, int, int, int]]:
    return [(x, y, size, size) for y in range(0, height - size + 1, size)
            for x in range(0, width - size + 1, size)]


# manifests

@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str = "train"


@dataclass
class Manifest:
    """Ordered list of labelled tile files.

    Relative entry paths are resolved against ``root``.
    """

    entries: list[ManifestEntry]
    label_set: str
    seed: int = 0
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else Path(self.root) / p

    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def label_indices(self) -> np.ndarray:
        names = label_names(self.label_set)
        return np.array([names.index(e.label) for e in self.entries], dtype=np.int64)

    def subset(self, split: str) -> Manifest:
        return replace(self, entries=[e for e in self.entries if e.split == split])

    def with_entries(self, entries: list[ManifestEntry]) -> Manifest:
        return replace(self, entries=list(entries))

    def rel(self, path: str | Path) -> str:
        """Express ``path`` relative to this manifest's root."""
        return os.path.relpath(Path(path), Path(self.root)).replace(os.sep, "/")

    def rebased(self, new_root: str | Path) -> Manifest:
        new_root = Path(new_root)
        entries = [ManifestEntry(os.path.relpath(self.resolve(e), new_root).replace(os.sep, "/"),
                                 e.label, e.split) for e in self.entries]
        return Manifest(entries, self.label_set, self.seed, new_root)

    def validate(self) -> None:
        names = label_names(self.label_set)
        for e in self.entries:
            if e.label not in names:
                raise ValueError(f"{e.path}: class {e.label!r} not in label set {self.label_set!r}")
            if e.split not in SPLITS:
                raise ValueError(f"{e.path}: split tag {e.split!r} not in {SPLITS}")
            if not self.resolve(e).exists():
                raise FileNotFoundError(f"manifest entry does not exist: {self.resolve(e)}")

    def save(self, path: str | Path) -> None:
        """Write ``path<TAB>class<TAB>split`` lines; paths become relative to the file's directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rebased = self.rebased(path.parent.resolve()) if self.root else self
        lines = [f"# label_set\t{self.label_set}", f"# seed\t{self.seed}"]
        lines += [f"{e.path}\t{e.label}\t{e.split}" for e in rebased.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, check: bool = True) -> Manifest:
        path = Path(path)
        label_set, seed, entries = None, 0, []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split("\t")
                if len(parts) == 2 and parts[0] == "label_set":
                    label_set = parts[1]
                elif len(parts) == 2 and parts[0] == "seed":
                    seed = int(parts[1])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected path<TAB>class<TAB>split")
            entries.append(ManifestEntry(*parts))
        if label_set is None:
            raise ValueError(f"{path}: missing '# label_set' header")
        m = cls(entries, label_set, seed, path.parent.resolve())
        if check:
            m.validate()
        return m


def load_arrays(manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack every entry into an (N, H, W, 3) float32 array plus integer labels."""
    cache: dict[Path, np.ndarray] = {}
    images = []
    for e in manifest.entries:
        p = manifest.resolve(e)
        if p not in cache:
            cache[p] = load_png(p).pixels
        images.append(cache[p])
    if not images:
        return np.zeros((0, 0, 0, 3), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.stack(images).astype(np.float32), manifest.label_indices()


# splitting and statistics

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(manifest: Manifest, ratio: tuple[int, int] = (3, 1), seed: int = 0,
          stratified: bool = True) -> tuple[Manifest, Manifest]:
    """Seeded train/test split with ``round(N * train_share)`` training items."""
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    share = ratio[0] / (ratio[0] + ratio[1])
    n_test = n - _round_half_up(n * share)
    rng = np.random.default_rng(seed)
    test_idx: list[int] = []
    if stratified:
        by_class: dict[str, list[int]] = {}
        for i, e in enumerate(manifest.entries):
            by_class.setdefault(e.label, []).append(i)
        classes = list(by_class)
        exact = {c: len(by_class[c]) * (1 - share) for c in classes}
        quota = {c: int(math.floor(exact[c])) for c in classes}
        remaining = n_test - sum(quota.values())
        # largest remainder, ties broken by first appearance
        order = sorted(classes, key=lambda c: (-(exact[c] - quota[c]), classes.index(c)))
        for c in order[:max(remaining, 0)]:
            quota[c] += 1
        for c in classes:
            members = np.array(by_class[c])
            chosen = rng.permutation(len(members))[:quota[c]]
            test_idx.extend(members[chosen].tolist())
    else:
        test_idx = rng.permutation(n)[:n_test].tolist()
    test_set = set(test_idx)
    train_entries = [replace(e, split="train") for i, e in enumerate(manifest.entries) if i not in test_set]
    test_entries = [replace(e, split="test") for i, e in enumerate(manifest.entries) if i in test_set]
    meta = dict(label_set=manifest.label_set, seed=seed, root=manifest.root)
    return Manifest(train_entries, **meta), Manifest(test_entries, **meta)


@dataclass
class ClassStats:
    counts: dict[str, int]
    percents: dict[str, float]
    total: int

    def to_text(self) -> str:
        width = max([len(c) for c in self.counts] + [5])
        rows = [f"{'class':<{width}}  {'count':>7}  {'percent':>7}"]
        for c, k in self.counts.items():
            rows.append(f"{c:<{width}}  {k:>7d}  {self.percents[c]:>6.1f}%")
        rows.append(f"{'total':<{width}}  {self.total:>7d}")
        return "\n".join(rows)


def class_stats(manifest: Manifest | Sequence[str], label_set: str | None = None) -> ClassStats:
    """Per-class counts and percentages, in label-set order (unlisted classes appended)."""
    if isinstance(manifest, Manifest):
        labels = manifest.labels()
        label_set = manifest.label_set
    else:
        labels = list(manifest)
    counts = Counter(labels)
    total = sum(counts.values())
    if total == 0:
        return ClassStats({}, {}, 0)
    order = list(label_names(label_set)) if label_set else []
    order += sorted(c for c in counts if c not in order)
    ordered = {c: counts.get(c, 0) for c in order if counts.get(c, 0) or label_set}
    percents = {c: 100.0 * k / total for c, k in ordered.items()}
    return ClassStats(ordered, percents, total)


# noise

def add_noise(img: ImageTile | np.ndarray, sigma: float = 0.3,
              seed: int | np.random.Generator | None = None):
    """Additive Gaussian noise followed by clipping to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    px = img.pixels if isinstance(img, ImageTile) else np.asarray(img, dtype=np.float32)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if sigma == 0:
        noisy = px.copy()
    else:
        noisy = np.clip(px + rng.normal(0.0, sigma, size=px.shape), 0.0, 1.0).astype(np.float32)
    if isinstance(img, ImageTile):
        return ImageTile(noisy, img.source_id, img.label)
    return noisy


# surrogate corpus

@dataclass
class DefectStyle:
    """Blob/band geometry and intensity shift for one synthetic defect class."""

    kind: str                     # band | streak | blobs | band+streak
    delta: float                  # signed intensity shift (negative = darker)
    count: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (1.0, 2.0)
    spread: float = 0.25          # blob cluster spread as a fraction of the tile


DEFAULT_STYLES: dict[str, DefectStyle] = {
    "short-feed": DefectStyle("band", -0.22, radius=(2.0, 4.0)),
    "had-defect": DefectStyle("streak", 0.25, radius=(0.8, 1.2)),
    "short-feed+had-defect": DefectStyle("band+streak", -0.22, radius=(2.0, 4.0)),
    # unfused powder pockets: laser off, cold and dark
    "seeded_1": DefectStyle("blobs", -0.3, count=(3, 5), radius=(2.0, 3.5), spread=0.18),
    # lack-of-fusion pores: lowered power, small dim pores
    "seeded_2": DefectStyle("blobs", -0.2, count=(5, 8), radius=(1.0, 1.8), spread=0.3),
    # keyhole: raised power, few hot spots
    "seeded_3": DefectStyle("blobs", 0.3, count=(2, 3), radius=(1.5, 2.5), spread=0.12),
}


@dataclass
class SurrogateConfig:
    tile_size: int = 64
    label_set: str = "hr1"
    counts: dict[str, int] = field(default_factory=lambda: {"no-defect": 95, "seeded_1": 2,
                                                             "seeded_2": 2, "seeded_3": 1})
    seed: int = 0
    powder_level: float = 0.2
    part_level: float = 0.55
    texture_amp: float = 0.05
    texture_scale: float = 0.35   # smallest texture wavelength, as a fraction of the tile
    grain_amp: float = 0.004
    edge_width: float = 4.0
    part_coverage: float = 0.8    # probability that the part covers the whole tile
    contrast: float = 0.12
    tint: tuple[float, float, float] = (1.0, 0.85, 0.7)

    def __post_init__(self):
        label_names(self.label_set)
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("class counts must be >= 0")
        unknown = set(self.counts) - set(LABEL_SETS[self.label_set])
        if unknown:
            raise ValueError(f"classes {sorted(unknown)} not in label set {self.label_set!r}")
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")

    def save(self, path: str | Path) -> None:
        lines = [f"tile_size = {self.tile_size}", f"label_set = {self.label_set}", f"seed = {self.seed}"]
        for key in ("powder_level", "part_level", "texture_amp", "texture_scale", "grain_amp",
                    "edge_width", "part_coverage", "contrast"):
            lines.append(f"{key} = {getattr(self, key)}")
        lines.append("tint = " + ",".join(str(t) for t in self.tint))
        lines += [f"count.{c} = {k}" for c, k in self.counts.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, raw: dict[str, str], origin: str = "config") -> SurrogateConfig:
        kwargs: dict = {}
        counts: dict[str, int] = {}
        for k, v in raw.items():
            if k.startswith("count."):
                counts[k[len("count."):]] = int(v)
            elif k in ("tile_size", "seed"):
                kwargs[k] = int(v)
            elif k == "label_set":
                kwargs[k] = v
            elif k == "tint":
                kwargs[k] = tuple(float(t) for t in v.split(","))
            elif k in cls.__dataclass_fields__ and k != "counts":
                kwargs[k] = float(v)
            else:
                raise KeyError(f"{origin}: unknown surrogate key {k!r}")
        if counts:
            kwargs["counts"] = counts
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> SurrogateConfig:
        from .training import read_kv

        return cls.from_dict(read_kv(path), str(path))


def _smooth_texture(rng: np.random.Generator, n: int, amp: float, min_wavelength: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    tex = np.zeros((n, n))
    for _ in range(4):
        wl = rng.uniform(min_wavelength, 2.5 * min_wavelength) * n
        ang = rng.uniform(0, np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        tex += np.cos(2 * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) / wl + ph)
    return amp * tex / 2.0


def surrogate_background(cfg: SurrogateConfig, index: int) -> np.ndarray:
    """Clean (defect-free) tile for slot ``index``; a pure function of (cfg, index)."""
    rng = np.random.default_rng([cfg.seed, index, 0])
    n = cfg.tile_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    if rng.random() < cfg.part_coverage:
        part = np.ones((n, n))
    elif rng.random() < 0.5:
        # circular part whose rim crosses the tile
        cy, cx = rng.uniform(-0.2, 1.2, size=2) * n
        r = rng.uniform(0.6, 1.0) * n
        part = 1.0 / (1.0 + np.exp((np.hypot(yy - cy, xx - cx) - r) / (cfg.edge_width / 4)))
    else:
        # rectangular part edge
        if rng.random() < 0.5:
            edge = rng.uniform(0.15, 0.45) * n
            part = 1.0 / (1.0 + np.exp(-(xx - edge) / (cfg.edge_width / 4)))
        else:
            edge = rng.uniform(0.15, 0.45) * n
            part = 1.0 / (1.0 + np.exp(-(yy - edge) / (cfg.edge_width / 4)))
    level = cfg.part_level + rng.uniform(-0.05, 0.05)
    tex = _smooth_texture(rng, n, cfg.texture_amp, cfg.texture_scale)
    intensity = cfg.powder_level + part * (level - cfg.powder_level + tex)
    intensity += rng.uniform(-cfg.grain_amp, cfg.grain_amp, size=(n, n))
    rgb = intensity[:, :, None] * np.asarray(cfg.tint)[None, None, :]
    return quantize(rgb)


def _disk(mask: np.ndarray, cy: float, cx: float, r: float) -> None:
    n = mask.shape[0]
    y0, y1 = max(int(cy - r - 1), 0), min(int(cy + r + 2), n)
    x0, x1 = max(int(cx - r - 1), 0), min(int(cx + r + 2), n)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _defect_geometry(style: DefectStyle, n: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    kinds = style.kind.split("+")
    if "band" in kinds:
        width = max(2, int(round(rng.uniform(*style.radius) * n / 32)))
        start = int(rng.integers(0, n - width + 1))
        if rng.random() < 0.5:
            mask[start:start + width, :] = True
        else:
            mask[:, start:start + width] = True
    if "streak" in kinds:
        length = rng.uniform(0.3, 0.6) * n
        ang = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.25, 0.75, size=2) * n
        r = rng.uniform(*style.radius)
        for t in np.linspace(-0.5, 0.5, int(length) * 2):
            _disk(mask, cy + t * length * np.sin(ang), cx + t * length * np.cos(ang), r)
    if "blobs" in kinds:
        k = int(rng.integers(style.count[0], style.count[1] + 1))
        margin = 0.15 + style.spread / 2
        cy, cx = rng.uniform(margin, 1 - margin, size=2) * n
        for _ in range(k):
            oy, ox = rng.normal(0, style.spread * n / 2, size=2)
            r = rng.uniform(*style.radius) * n / 64
            _disk(mask, np.clip(cy + oy, 2, n - 3), np.clip(cx + ox, 2, n - 3), max(r, 0.8))
    if not mask.any():
        mask[n // 2, n // 2] = True
    return mask


def surrogate_defect(cfg: SurrogateConfig, index: int, label: str,
                     styles: dict[str, DefectStyle] | None = None):
    """Return (clean tile, defect tile, mask) for slot ``index`` of class ``label``."""
    from .synthdata import DefectMask

    styles = styles or DEFAULT_STYLES
    clean = surrogate_background(cfg, index)
    style = styles[label]
    rng = np.random.default_rng([cfg.seed, index, 1])
    geom = _defect_geometry(style, cfg.tile_size, rng)
    step = 1.0 / 255.0
    magnitude = max(abs(style.delta), cfg.contrast + 2 * step)
    sign = 1.0 if style.delta >= 0 else -1.0
    rows, cols = np.nonzero(geom)
    bg = clean[rows, cols, :]
    target = bg + sign * magnitude
    flip = (target > 1.0) | (target < 0.0)
    target = np.where(flip, bg - sign * magnitude, target)
    values = quantize(target)
    defect = clean.copy()
    defect[rows, cols, :] = values
    c = clean.shape[2]
    mask = DefectMask.from_arrays(np.repeat(rows, c), np.repeat(cols, c), np.tile(np.arange(c), len(rows)),
                                  values.reshape(-1), label, image_shape=clean.shape)
    return clean, defect, mask


def surrogate_generate(cfg: SurrogateConfig, root: str | Path,
                       styles: dict[str, DefectStyle] | None = None):
    """Write the surrogate corpus under ``root`` and return (manifest, masks).

    Layout: ``root/<class>/tile_NNNNN.png``, clean counterparts of defect tiles in
    ``root/clean/``, ground-truth masks in ``root/masks/`` and ``root/manifest.tsv``.
    ``masks`` maps each defect tile's manifest path to its DefectMask.
    """
    from .synthdata import save_mask

    total = sum(cfg.counts.values())
    if total == 0:
        raise ValueError("surrogate config has zero total tiles")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    masks = {}
    index = 0
    for label in label_names(cfg.label_set):
        for _ in range(cfg.counts.get(label, 0)):
            name = f"tile_{index:05d}"
            rel = f"{label}/{name}.png"
            if label == "no-defect":
                save_png(surrogate_background(cfg, index), root / rel)
            else:
                clean, defect, mask = surrogate_defect(cfg, index, label, styles)
                save_png(defect, root / rel)
                save_png(clean, root / "clean" / f"{name}.png")
                save_mask(mask, root / "masks" / f"{name}.mask")
                masks[rel] = mask
            entries.append(ManifestEntry(rel, label, "train"))
            index += 1
    manifest = Manifest(entries, cfg.label_set, cfg.seed, root.resolve())
    manifest.save(root / "manifest.tsv")
    cfg.save(root / "surrogate.cfg")
    return manifest, masks


def clean_counterpart(manifest: Manifest, entry: ManifestEntry) -> Path:
    """Path of the clean tile a surrogate defect tile was built from."""
    p = manifest.resolve(entry)
    return p.parent.parent / "clean" / p.name


def mask_path(manifest: Manifest, entry: ManifestEntry) -> Path:
    p = manifest.resolve(entry)
    return p.parent.parent / "masks" / (p.stem + ".mask")
