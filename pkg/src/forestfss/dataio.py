"""Raster ingestion, tiling, label remapping, augmentation and episode sampling."""

from __future__ import annotations

import csv
import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

MIN_FG_FRACTION = 0.01
MANIFEST_HEADER = ["image_path", "mask_path", "geography", "split"]

DEEPGLOBE_LABELS = ["Urban", "Agriculture", "Rangeland", "Forest", "Water", "Barren", "Unknown"]
LANDCOVER_LABELS = ["Background", "Building", "Woodlands", "Water"]
_FOREST_NAMES = {"forest", "woodlands", "woodland"}
_WATER_NAMES = {"water"}


class DataError(Exception):
    """Raised for unreadable, inconsistent or insufficient input data."""


class Geography(str, enum.Enum):
    TRAIN = "train-domain"
    TEST = "test-domain"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledTile:
    """An RGB tile with its class mask.

    ``pixels`` is ``H x W x 3`` uint8, ``mask`` is ``H x W`` uint8 holding
    class indices. Arrays are made read-only on construction.
    """

    pixels: np.ndarray
    mask: np.ndarray
    source_id: str
    geography: Geography = Geography.TRAIN
    flipped: bool = False

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[:2] != self.mask.shape:
            raise ValueError(
                f"pixels {self.pixels.shape[:2]} and mask {self.mask.shape} differ in size"
            )
        object.__setattr__(self, "pixels", _frozen(self.pixels.astype(np.uint8, copy=False)))
        object.__setattr__(self, "mask", _frozen(self.mask.astype(np.uint8, copy=False)))
        object.__setattr__(self, "geography", Geography(self.geography))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def class_fraction(self, cls: int) -> float:
        return float(np.count_nonzero(self.mask == cls)) / self.mask.size


@dataclass(frozen=True)
class ClassMapping:
    """Total map from source label values to episode class indices.

    ``classes`` names the episode classes; index 0 is always Background.
    """

    name: str
    entries: Mapping[int, int]
    classes: Sequence[str]

    def __post_init__(self):
        if not self.classes or self.classes[0].lower() != "background":
            raise ValueError("episode class 0 must be Background")
        n = len(self.classes)
        bad = {s: c for s, c in self.entries.items() if not 0 <= c < n}
        if bad:
            raise ValueError(f"mapping {self.name!r} targets undeclared classes: {bad}")
        object.__setattr__(self, "entries", dict(self.entries))
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def way(self) -> int:
        return len(self.classes) - 1

    @classmethod
    def identity(cls, classes: Sequence[str]) -> "ClassMapping":
        return cls("identity", {i: i for i in range(len(classes))}, classes)

    def lookup_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (table, defined) arrays of length 256 for uint8 masks."""
        table = np.zeros(256, dtype=np.uint8)
        defined = np.zeros(256, dtype=bool)
        for src, dst in self.entries.items():
            table[src] = dst
            defined[src] = True
        return table, defined


def forest_mapping(source_labels: Sequence[str], way: int = 1) -> ClassMapping:
    """Merge a dataset's named labels into forest (and water) vs background.

    ``source_labels[i]`` is the name of raw mask value ``i``. Forest or
    Woodlands becomes class 1; for ``way=2`` Water becomes class 2; every
    other label, including Unknown/Background, becomes class 0.
    """
    if way not in (1, 2):
        raise ValueError(f"way must be 1 or 2, got {way}")
    classes = ["Background", "Forest"] + (["Water"] if way == 2 else [])
    entries = {}
    for value, label in enumerate(source_labels):
        key = label.lower()
        if key in _FOREST_NAMES:
            entries[value] = 1
        elif way == 2 and key in _WATER_NAMES:
            entries[value] = 2
        else:
            entries[value] = 0
    if 1 not in entries.values():
        raise ValueError(f"no forest label among {list(source_labels)}")
    return ClassMapping(f"forest-{way}way", entries, classes)


def deepglobe_mapping(way: int = 1) -> ClassMapping:
    return forest_mapping(DEEPGLOBE_LABELS, way)


def landcover_mapping(way: int = 1) -> ClassMapping:
    return forest_mapping(LANDCOVER_LABELS, way)


def remap_labels(mask: np.ndarray, mapping: ClassMapping) -> np.ndarray:
    """Substitute every source label in ``mask`` by its episode class."""
    mask = np.asarray(mask)
    if mask.dtype != np.uint8:
        if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
            raise ValueError("mask values must fit in 0..255")
        mask = mask.astype(np.uint8)
    table, defined = mapping.lookup_table()
    if not defined[mask].all():
        values, counts = np.unique(mask[~defined[mask]], return_counts=True)
        detail = ", ".join(f"label {v} ({c} px)" for v, c in zip(values, counts))
        raise DataError(f"mapping {mapping.name!r} does not cover {detail}")
    return table[mask]


def decode_color_mask(rgb: np.ndarray, color_table: Mapping[tuple[int, int, int], int]) -> np.ndarray:
    """Convert a color-coded label raster into integer source labels."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError("color mask must be HxWx3")
    packed = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    out = np.zeros(packed.shape, dtype=np.uint8)
    seen = np.zeros(packed.shape, dtype=bool)
    for (r, g, b), value in color_table.items():
        hit = packed == ((r << 16) | (g << 8) | b)
        out[hit] = value
        seen |= hit
    if not seen.all():
        colors = np.unique(packed[~seen])
        listed = ", ".join(f"({c >> 16},{(c >> 8) & 255},{c & 255})" for c in colors[:8])
        raise DataError(f"{np.count_nonzero(~seen)} pixels have colors missing from the color table: {listed}")
    return out


def read_label_table(path: str | Path) -> dict:
    """Read a label table CSV: ``value,label`` or ``r,g,b,value``.

    Returns ``{value: label}`` for gray tables and ``{(r, g, b): value}`` for
    color tables.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if fields == ["value", "label"]:
            return {int(row["value"]): row["label"] for row in reader}
        if fields == ["r", "g", "b", "value"]:
            return {(int(row["r"]), int(row["g"]), int(row["b"])): int(row["value"]) for row in reader}
    raise DataError(f"{path}: header must be 'value,label' or 'r,g,b,value', got {fields}")


def tile_image(
    image: np.ndarray,
    mask: np.ndarray,
    tile_size: int,
    source_id: str = "image",
    geography: Geography | str = Geography.TRAIN,
) -> list[LabeledTile]:
    """Cut ``image``/``mask`` into a top-left aligned grid of square tiles.

    Rows and columns that do not fill a whole tile are dropped.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    h, w = mask.shape[:2]
    if tile_size > min(h, w):
        raise ValueError(f"tile_size {tile_size} exceeds image size {h}x{w}")
    tiles = []
    for r in range(0, h - tile_size + 1, tile_size):
        for c in range(0, w - tile_size + 1, tile_size):
            tiles.append(
                LabeledTile(
                    image[r : r + tile_size, c : c + tile_size].copy(),
                    mask[r : r + tile_size, c : c + tile_size].copy(),
                    f"{source_id}@{r},{c}",
                    geography,
                )
            )
    return tiles


def augment(tile: LabeledTile, rng: np.random.Generator) -> LabeledTile:
    """Mirror image and mask about the vertical axis with probability 0.5."""
    if rng.random() < 0.5:
        return flip_tile(tile)
    return tile


def flip_tile(tile: LabeledTile) -> LabeledTile:
    return replace(tile, pixels=tile.pixels[:, ::-1], mask=tile.mask[:, ::-1], flipped=not tile.flipped)


def resize_tile(tile: LabeledTile, side: int) -> LabeledTile:
    """Resample to ``side x side``: bilinear for pixels, nearest for the mask."""
    if side <= 0:
        raise ValueError("side must be positive")
    if tile.shape == (side, side):
        return tile
    img = Image.fromarray(np.asarray(tile.pixels)).resize((side, side), Image.BILINEAR)
    msk = Image.fromarray(np.asarray(tile.mask)).resize((side, side), Image.NEAREST)
    return replace(tile, pixels=np.asarray(img), mask=np.asarray(msk))


@dataclass(frozen=True)
class Episode:
    supports: tuple[LabeledTile, ...]
    query: LabeledTile
    way: int
    shot: int
    class_list: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.supports) != self.shot:
            raise ValueError(f"expected {self.shot} supports, got {len(self.supports)}")
        if not self.class_list:
            object.__setattr__(self, "class_list", tuple(range(1, self.way + 1)))


class EpisodeSampler:
    """Draws C-way K-shot episodes from a fixed pool with a private generator.

    A tile qualifies for a class when at least ``min_fg_fraction`` of its
    pixels carry that class; only tiles qualifying for every foreground
    class of the task are eligible.
    """

    def __init__(
        self,
        pool: Sequence[LabeledTile],
        way: int,
        shot: int,
        seed: int | np.random.Generator = 0,
        min_fg_fraction: float = MIN_FG_FRACTION,
    ):
        self.pool = list(pool)
        self.way = way
        self.shot = shot
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.class_list = tuple(range(1, way + 1))
        counts = Counter()
        eligible = []
        for i, tile in enumerate(self.pool):
            ok = True
            for c in self.class_list:
                if tile.class_fraction(c) >= min_fg_fraction:
                    counts[c] += 1
                else:
                    ok = False
            if ok:
                eligible.append(i)
        self.qualifying_counts = {c: counts[c] for c in self.class_list}
        self.eligible = np.array(eligible, dtype=np.int64)
        if len(self.eligible) < shot + 1:
            raise DataError(
                f"need {shot + 1} tiles qualifying for classes {list(self.class_list)}, "
                f"found {len(self.eligible)} (per-class qualifying counts: {self.qualifying_counts})"
            )

    def sample(self, rng: np.random.Generator | None = None) -> Episode:
        """Draw K+1 distinct eligible tiles; the last one is the query."""
        picks = (rng or self.rng).choice(self.eligible, size=self.shot + 1, replace=False)
        tiles = [self.pool[i] for i in picks]
        return Episode(tuple(tiles[:-1]), tiles[-1], self.way, self.shot, self.class_list)

    def __iter__(self):
        while True:
            yield self.sample()


def sample_episode(
    pool: Sequence[LabeledTile],
    way: int,
    shot: int,
    rng: np.random.Generator,
    min_fg_fraction: float = MIN_FG_FRACTION,
) -> Episode:
    return EpisodeSampler(pool, way, shot, rng, min_fg_fraction).sample()


def qualification_counts(tiles: Iterable[LabeledTile], n_classes: int, min_fg_fraction: float = MIN_FG_FRACTION) -> dict[int, int]:
    counts = {c: 0 for c in range(n_classes)}
    for tile in tiles:
        for c in counts:
            if tile.class_fraction(c) >= min_fg_fraction:
                counts[c] += 1
    return counts


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    mask_path: str
    geography: Geography
    split: str
    image_sha256: str | None = None
    mask_sha256: str | None = None


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(path: str | Path, data_root: str | Path, check: bool = True) -> list[ManifestRow]:
    """Parse a manifest CSV; paths inside are relative to ``data_root``."""
    root = Path(data_root)
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if fields[:4] != MANIFEST_HEADER:
            raise DataError(f"{path}: header must start with {','.join(MANIFEST_HEADER)}, got {fields}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                geo = Geography(rec["geography"])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown geography {rec['geography']!r}") from None
            rows.append(
                ManifestRow(
                    rec["image_path"],
                    rec["mask_path"],
                    geo,
                    rec["split"],
                    rec.get("image_sha256") or None,
                    rec.get("mask_sha256") or None,
                )
            )
    if check:
        missing = [p for r in rows for p in (r.image_path, r.mask_path) if not (root / p).is_file()]
        if missing:
            raise DataError("missing files: " + ", ".join(missing))
        for r in rows:
            for rel, digest in ((r.image_path, r.image_sha256), (r.mask_path, r.mask_sha256)):
                if digest and file_sha256(root / rel) != digest:
                    raise DataError(f"checksum mismatch for {rel}")
    return rows


def write_manifest(path: str | Path, rows: Sequence[ManifestRow], checksums: bool = False, data_root: str | Path = ".") -> None:
    root = Path(data_root)
    header = MANIFEST_HEADER + (["image_sha256", "mask_sha256"] if checksums else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            rec = [r.image_path, r.mask_path, r.geography.value, r.split]
            if checksums:
                rec += [file_sha256(root / r.image_path), file_sha256(root / r.mask_path)]
            writer.writerow(rec)


def read_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None


def read_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit class mask; color PNGs are returned as HxWx3."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "P", "I", "I;16", "1"):
                return np.asarray(im.convert("L") if im.mode != "P" else im)
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from None


def load_tiles(
    rows: Sequence[ManifestRow],
    data_root: str | Path,
    geography: Geography | str | None = None,
    split: str | None = None,
    side: int | None = None,
) -> list[LabeledTile]:
    """Load already-tiled, already-remapped rows as LabeledTiles."""
    root = Path(data_root)
    geography = Geography(geography) if geography is not None else None
    tiles = []
    for r in rows:
        if geography is not None and r.geography is not geography:
            continue
        if split is not None and r.split != split:
            continue
        mask = read_mask(root / r.mask_path)
        if mask.ndim != 2:
            raise DataError(f"{r.mask_path}: expected a single-channel class mask")
        tile = LabeledTile(read_rgb(root / r.image_path), mask, r.image_path, r.geography)
        tiles.append(resize_tile(tile, side) if side else tile)
    return tiles
