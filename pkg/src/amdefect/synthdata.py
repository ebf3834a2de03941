"""Minority-class augmentation: consistent/randomized defect transplants,
oversampling, and GAN-sampled tiles."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .dataset import ImageTile, Manifest, ManifestEntry, label_names, load_png, save_png

STRATEGIES = ("cds", "rds", "sam", "gan")


class MissingResourceError(ValueError):
    pass


@dataclass
class DefectMask:
    """Defect pixels as parallel coordinate/value arrays plus their bounding box."""

    rows: np.ndarray
    cols: np.ndarray
    channels: np.ndarray
    values: np.ndarray
    source_class: str
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)   # min_row, min_col, max_row, max_col
    image_shape: tuple[int, ...] | None = None

    @classmethod
    def from_arrays(cls, rows, cols, channels, values, source_class: str, image_shape=None) -> DefectMask:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size == 0:
            raise ValueError("no defect pixels found")
        bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        if image_shape is not None and (bbox[0] < 0 or bbox[1] < 0 or bbox[2] >= image_shape[0]
                                        or bbox[3] >= image_shape[1]):
            raise ValueError(f"mask bbox {bbox} outside image of shape {image_shape}")
        return cls(rows, cols, np.asarray(channels, dtype=np.int64),
                   np.asarray(values, dtype=np.float32), source_class, bbox,
                   tuple(image_shape) if image_shape is not None else None)

    def __len__(self) -> int:
        return int(self.rows.size)

    @property
    def pixels(self) -> list[tuple[int, int, int, float]]:
        return [(int(r), int(c), int(ch), float(v))
                for r, c, ch, v in zip(self.rows, self.cols, self.channels, self.values)]

    @property
    def height(self) -> int:
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def width(self) -> int:
        return self.bbox[3] - self.bbox[1] + 1

    def translated(self, drow: int, dcol: int) -> DefectMask:
        return DefectMask.from_arrays(self.rows + drow, self.cols + dcol, self.channels,
                                      self.values, self.source_class)


def save_mask(mask: DefectMask, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# class\t{mask.source_class}"]
    lines += [f"{r}\t{c}\t{ch}\t{v!r}" for r, c, ch, v in mask.pixels]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mask(path: str | Path) -> DefectMask:
    source_class = ""
    rows, cols, chans, vals = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if len(parts) == 2 and parts[0] == "class":
                source_class = parts[1]
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected row<TAB>col<TAB>channel<TAB>value")
        rows.append(int(parts[0]))
        cols.append(int(parts[1]))
        chans.append(int(parts[2]))
        vals.append(float(parts[3]))
    return DefectMask.from_arrays(rows, cols, chans, vals, source_class)


def median_background(img: ImageTile, size: int = 5) -> np.ndarray:
    return median_filter(img.pixels, size=(size, size, 1), mode="nearest")


def extract_mask(defect_img: ImageTile, coords=None, *, tau: float | None = None,
                 background: np.ndarray | ImageTile | None = None) -> DefectMask:
    """Pull defect pixels out of ``defect_img``.

    Either pass explicit ``coords`` as (row, col, channel) triples, or a
    threshold ``tau`` with a ``background`` reference (a paired clean tile or a
    median-filtered copy, see ``median_background``).
    """
    px = defect_img.pixels
    if coords is not None:
        coords = np.asarray(list(coords), dtype=np.int64).reshape(-1, 3)
        if coords.size == 0:
            raise ValueError("no defect pixels found")
        r, c, ch = coords[:, 0], coords[:, 1], coords[:, 2]
        return DefectMask.from_arrays(r, c, ch, px[r, c, ch], defect_img.label, px.shape)
    if tau is None or background is None:
        raise ValueError("threshold extraction needs tau and a background reference")
    bg = background.pixels if isinstance(background, ImageTile) else np.asarray(background)
    if bg.shape != px.shape:
        raise ValueError(f"background shape {bg.shape} != image shape {px.shape}")
    r, c, ch = np.nonzero(np.abs(px - bg) > tau)
    if r.size == 0:
        raise ValueError("no defect pixels found")
    return DefectMask.from_arrays(r, c, ch, px[r, c, ch], defect_img.label, px.shape)


def _paste(base: ImageTile, mask: DefectMask) -> ImageTile:
    h, w = base.pixels.shape[:2]
    r0, c0, r1, c1 = mask.bbox
    if r0 < 0 or c0 < 0 or r1 >= h or c1 >= w:
        raise ValueError(f"mask bbox {mask.bbox} outside base image {h}x{w}")
    if mask.channels.max() >= base.pixels.shape[2]:
        raise ValueError("mask channel index exceeds base image channels")
    out = base.pixels.copy()
    out[mask.rows, mask.cols, mask.channels] = mask.values
    return ImageTile(out, base.source_id, mask.source_class)


def cds(base: ImageTile, mask: DefectMask) -> ImageTile:
    """Transplant defect pixels onto ``base`` at their original coordinates."""
    return _paste(base, mask)


def rds(base: ImageTile, mask: DefectMask, seed: int | np.random.Generator | None = None) -> ImageTile:
    """Transplant defect pixels at a uniformly drawn in-bounds translation."""
    h, w = base.pixels.shape[:2]
    if mask.height > h or mask.width > w:
        raise ValueError(f"mask extent {mask.height}x{mask.width} larger than image {h}x{w}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = int(rng.integers(0, h - mask.height + 1))
    left = int(rng.integers(0, w - mask.width + 1))
    return _paste(base, mask.translated(top - mask.bbox[0], left - mask.bbox[1]))


def sam(manifest: Manifest, cls: str, target: int, seed: int = 0) -> Manifest:
    """Append seeded with-replacement duplicates of class ``cls`` until it has ``target`` entries."""
    members = [e for e in manifest.entries if e.label == cls]
    if not members:
        raise ValueError(f"class {cls!r} has no entries to oversample")
    if target < len(members):
        raise ValueError(f"target {target} below current count {len(members)} for {cls!r}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(members), size=target - len(members))
    extra = [ManifestEntry(members[i].path, cls, members[i].split) for i in picks]
    return manifest.with_entries(manifest.entries + extra)


@dataclass
class BalanceResources:
    """Inputs the synthesis strategies draw on.

    ``mask_pool`` maps class -> defect masks (cds/rds); ``clean_pool`` lists
    defect-free tile paths (cds/rds); ``generators`` maps class -> trained
    generator network (gan).
    """

    mask_pool: dict[str, list[DefectMask]] = field(default_factory=dict)
    clean_pool: list[Path] = field(default_factory=list)
    generators: dict = field(default_factory=dict)


def check_resources(strategy: str, needed: list[str], resources: BalanceResources | None) -> None:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "sam" or not needed:
        return
    if resources is None:
        raise MissingResourceError(f"strategy {strategy!r} needs resources for classes {needed}")
    for cls in needed:
        if strategy in ("cds", "rds"):
            if not resources.mask_pool.get(cls):
                raise MissingResourceError(f"no defect masks available for class {cls!r}")
            if not resources.clean_pool:
                raise MissingResourceError(f"no clean tiles available to synthesize class {cls!r}")
        elif cls not in resources.generators:
            raise MissingResourceError(f"no trained generator for class {cls!r}")


def balance(manifest: Manifest, strategy: str, targets: dict[str, int], seed: int = 0,
            resources: BalanceResources | None = None, out_root: str | Path | None = None) -> Manifest:
    """Raise every class in ``targets`` to its target count with one strategy.

    Synthesized tiles are written as PNG under ``out_root/<class>/`` and
    appended to the returned manifest with split tag ``train``.
    """
    counts = {c: 0 for c in label_names(manifest.label_set)}
    for e in manifest.entries:
        counts[e.label] = counts.get(e.label, 0) + 1
    needed = []
    for cls, tgt in targets.items():
        if cls not in counts:
            raise ValueError(f"class {cls!r} not in label set {manifest.label_set!r}")
        if tgt < counts[cls]:
            raise ValueError(f"target {tgt} below current count {counts[cls]} for {cls!r}")
        if tgt > counts[cls]:
            needed.append(cls)
    check_resources(strategy, needed, resources)
    if not needed:
        return manifest.with_entries(manifest.entries)
    if strategy == "sam":
        out = manifest
        for k, cls in enumerate(needed):
            out = sam(out, cls, targets[cls], seed=seed + k)
        return out
    if out_root is None:
        raise ValueError(f"strategy {strategy!r} writes tiles and needs out_root")
    out_root = Path(out_root)
    rng = np.random.default_rng(seed)
    entries = list(manifest.entries)
    clean_cache: dict[Path, ImageTile] = {}
    for cls in needed:
        n_new = targets[cls] - counts[cls]
        if strategy == "gan":
            from .models import gan_sample

            tiles = gan_sample(resources.generators[cls], n_new, seed=int(rng.integers(2**31)), label=cls)
        else:
            tiles = []
            pool = resources.mask_pool[cls]
            for _ in range(n_new):
                base_path = resources.clean_pool[int(rng.integers(len(resources.clean_pool)))]
                if base_path not in clean_cache:
                    clean_cache[base_path] = load_png(base_path)
                base = clean_cache[base_path]
                mask = pool[int(rng.integers(len(pool)))]
                tiles.append(cds(base, mask) if strategy == "cds" else rds(base, mask, rng))
        for k, tile in enumerate(tiles):
            path = out_root / cls / f"synthetic_{strategy}_{k:05d}.png"
            save_png(tile, path)
            entries.append(ManifestEntry(manifest.rel(path), cls, "train"))
    return manifest.with_entries(entries)
