"""Tiles, class schemes for leave-one-class-out runs, patch sampling and synthetic data."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .network import extract_patch, mirror_pad

UNKNOWN = 255
IGNORE = 254

CLASSES = ("street", "building", "grass", "tree", "car")

# ISPRS colour convention for the label PNGs
DEFAULT_PALETTE = {
    "street": (255, 255, 255),
    "building": (0, 0, 255),
    "grass": (0, 255, 255),
    "tree": (0, 255, 0),
    "car": (255, 255, 0),
}
UNKNOWN_COLOR = (255, 0, 0)
IGNORE_COLOR = (0, 0, 0)

VAIHINGEN_TEST = (11, 15, 28, 30, 34)


@dataclass
class LabeledTile:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    labels: np.ndarray  # H x W uint8 dataset class ids, IGNORE where unlabeled

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValueError(f"tile {self.id}: image must be H x W x 3 uint8")
        if self.labels.shape != self.image.shape[:2]:
            raise ValueError(
                f"tile {self.id}: labels {self.labels.shape} do not match image {self.image.shape[:2]}"
            )


@dataclass(frozen=True)
class ClassScheme:
    """Dataset classes split into known training ids and (optionally) one unknown class."""

    classes: tuple[str, ...]
    unknown: str | None = None

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes) or len(self.classes) < 2:
            raise ValueError(f"need at least 2 distinct classes, got {self.classes}")
        if len(self.classes) >= IGNORE:
            raise ValueError("too many classes for 8-bit label maps")
        if self.unknown is not None and self.unknown not in self.classes:
            raise ValueError(f"unknown class {self.unknown!r} not in {self.classes}")

    @property
    def known(self) -> tuple[str, ...]:
        return tuple(c for c in self.classes if c != self.unknown)

    @property
    def n_known(self) -> int:
        return len(self.known)

    def lut(self) -> np.ndarray:
        """256-entry table: dataset id -> training id / UNKNOWN / IGNORE."""
        table = np.full(256, IGNORE, dtype=np.uint8)
        for i, name in enumerate(self.classes):
            table[i] = UNKNOWN if name == self.unknown else self.known.index(name)
        return table

    def remap(self, labels: np.ndarray) -> np.ndarray:
        return self.lut()[labels]

    def inverse(self, train_ids: np.ndarray) -> np.ndarray:
        """Training ids back to dataset ids; UNKNOWN and IGNORE pass through."""
        table = np.arange(256, dtype=np.uint8)
        for t, name in enumerate(self.known):
            table[t] = self.classes.index(name)
        table[self.n_known : IGNORE] = IGNORE
        return table[train_ids]


def make_loco_scheme(unknown: str, classes: Sequence[str] = CLASSES) -> ClassScheme:
    """Hold ``unknown`` out; the remaining classes keep dataset order as ids 0..n-2."""
    if unknown not in classes:
        raise ValueError(f"unknown class {unknown!r} is not one of {tuple(classes)}")
    return ClassScheme(tuple(classes), unknown)


def make_closed_scheme(classes: Sequence[str] = CLASSES) -> ClassScheme:
    return ClassScheme(tuple(classes), None)


def load_palette(path: str | Path) -> dict[str, tuple[int, int, int]]:
    """Parse ``R,G,B,class_name`` lines; file order defines dataset class order."""
    palette: dict[str, tuple[int, int, int]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected R,G,B,class_name")
        rgb = tuple(int(v) for v in parts[:3])
        if not all(0 <= v <= 255 for v in rgb):
            raise ValueError(f"{path}:{lineno}: colour component out of range")
        if parts[3] in palette:
            raise ValueError(f"{path}:{lineno}: duplicate class {parts[3]!r}")
        palette[parts[3]] = rgb  # type: ignore[assignment]
    if len(palette) < 2:
        raise ValueError(f"{path}: palette needs at least two classes")
    if len(set(palette.values())) != len(palette):
        raise ValueError(f"{path}: two classes share a colour")
    return palette


def save_palette(palette: dict[str, tuple[int, int, int]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{r},{g},{b},{name}\n" for name, (r, g, b) in palette.items()))


def decode_labels(rgb: np.ndarray, palette: dict[str, tuple[int, int, int]]) -> np.ndarray:
    """Exact colour match to dataset ids; any other colour becomes IGNORE."""
    code = (rgb[..., 0].astype(np.uint32) << 16) | (rgb[..., 1].astype(np.uint32) << 8) | rgb[..., 2]
    out = np.full(code.shape, IGNORE, dtype=np.uint8)
    for i, (r, g, b) in enumerate(palette.values()):
        out[code == ((r << 16) | (g << 8) | b)] = i
    return out


def encode_labels(labels: np.ndarray, palette: dict[str, tuple[int, int, int]]) -> np.ndarray:
    table = np.zeros((256, 3), dtype=np.uint8)
    table[:] = IGNORE_COLOR
    for i, rgb in enumerate(palette.values()):
        table[i] = rgb
    table[UNKNOWN] = UNKNOWN_COLOR
    return table[labels]


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "P", "RGBA", "L"):
                raise ValueError(f"{path}: unsupported PNG mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def load_tile(
    image_path: str | Path,
    label_path: str | Path,
    palette: dict[str, tuple[int, int, int]] | None = None,
    tile_id: str | None = None,
) -> LabeledTile:
    palette = palette or DEFAULT_PALETTE
    image_path, label_path = Path(image_path), Path(label_path)
    with Image.open(image_path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{image_path}: expected an 8-bit 3-channel PNG, got mode {im.mode}")
        image = np.asarray(im, dtype=np.uint8).copy()
    labels = decode_labels(_read_rgb(label_path), palette)
    if labels.shape != image.shape[:2]:
        raise ValueError(
            f"{label_path}: label size {labels.shape[::-1]} != image size {image.shape[1::-1]}"
        )
    return LabeledTile(tile_id or image_path.parent.name, image, labels)


def save_tile(tile: LabeledTile, root: str | Path, palette: dict[str, tuple[int, int, int]]) -> Path:
    """Write ``root/tiles/<id>/image.png`` and ``labels.png``."""
    d = Path(root) / "tiles" / tile.id
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile.image, "RGB").save(d / "image.png")
    Image.fromarray(encode_labels(tile.labels, palette), "RGB").save(d / "labels.png")
    return d


def list_tiles(root: str | Path) -> list[str]:
    tiles = Path(root) / "tiles"
    if not tiles.is_dir():
        raise FileNotFoundError(f"no tiles/ directory under {root}")
    return sorted(p.name for p in tiles.iterdir() if (p / "image.png").exists())


def load_tiles(
    root: str | Path, ids: Sequence[str] | None = None, palette=None
) -> list[LabeledTile]:
    root = Path(root)
    ids = list_tiles(root) if ids is None else ids
    return [
        load_tile(root / "tiles" / i / "image.png", root / "tiles" / i / "labels.png", palette, i)
        for i in ids
    ]


def _ceil_fraction(n: int, fraction: float) -> int:
    # round first so that e.g. 10 * 0.2 does not ceil to 3
    return math.ceil(round(n * fraction, 9))


def patch_number(tile_id: str) -> int:
    m = re.search(r"(\d+)\D*$", tile_id)
    if not m:
        raise ValueError(f"cannot parse a patch number from tile id {tile_id!r}")
    return int(m.group(1))


def split_tiles(
    tile_ids: Sequence[str], test_fraction: float | None = None, seed: int = 0
) -> tuple[list[str], list[str]]:
    """Train/test split.

    Without ``test_fraction`` the Vaihingen split is used: patches 11, 15,
    28, 30 and 34 are the test set.  Otherwise ``ceil(n * test_fraction)``
    tiles are drawn at random (seeded) for testing.
    """
    ids = sorted(tile_ids)
    if test_fraction is None:
        test = [i for i in ids if patch_number(i) in VAIHINGEN_TEST]
    else:
        if not 0 < test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        k = _ceil_fraction(len(ids), test_fraction)
        rng = np.random.default_rng(seed)
        test = sorted(ids[i] for i in rng.choice(len(ids), size=k, replace=False))
    train = [i for i in ids if i not in test]
    if not train:
        raise ValueError("split leaves no training tiles")
    return train, test


def hold_out_validation(
    tile_ids: Sequence[str], fraction: float = 0.1, seed: int = 0
) -> tuple[list[str], list[str]]:
    """Move ``ceil(n * fraction)`` training tiles into a validation set."""
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    ids = sorted(tile_ids)
    k = _ceil_fraction(len(ids), fraction)
    if k >= len(ids):
        raise ValueError(f"validation fraction {fraction} leaves no training tiles out of {len(ids)}")
    rng = np.random.default_rng(seed)
    val = sorted(ids[i] for i in rng.choice(len(ids), size=k, replace=False))
    return [i for i in ids if i not in val], val


@dataclass
class PatchSample:
    pixels: np.ndarray  # 3 x 55 x 55 uint8
    label: int
    tile_id: str
    center: tuple[int, int]


def extract_training_patches(
    tiles: Sequence[LabeledTile], scheme: ClassScheme, quota: int, seed: int = 0
) -> Iterator[PatchSample]:
    """Class-balanced patches centred on known-class pixels.

    Up to ``quota`` centres are drawn per known class.  Centres labelled with
    the unknown class or IGNORE are never emitted; context pixels around a
    centre are left as they are.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    lut = scheme.lut()
    per_class: list[list[np.ndarray]] = [[] for _ in range(scheme.n_known)]
    for t, tile in enumerate(tiles):
        train_ids = lut[tile.labels].ravel()
        for c in range(scheme.n_known):
            flat = np.flatnonzero(train_ids == c)
            if flat.size:
                per_class[c].append(np.stack([np.full(flat.size, t), flat], axis=1))
    rng = np.random.default_rng(seed)
    chosen = []
    for c, name in enumerate(scheme.known):
        if not per_class[c]:
            raise ValueError(f"known class {name!r} has no labelled pixels in the training tiles")
        pool = np.concatenate(per_class[c])
        pick = pool[np.sort(rng.choice(len(pool), size=min(quota, len(pool)), replace=False))]
        chosen.append((c, pick))
    padded: dict[int, np.ndarray] = {}
    for c, pick in chosen:
        for t, flat in pick:
            tile = tiles[t]
            if t not in padded:
                padded[t] = mirror_pad(tile.image)
            r, col = divmod(int(flat), tile.labels.shape[1])
            yield PatchSample(extract_patch(padded[t], r, col).copy(), c, tile.id, (r, col))


@dataclass
class ClassTexture:
    base_color: tuple[int, int, int]
    noise: float = 12.0
    stripe_period: int = 0  # 0: flat; >0: stripes of this period
    stripe_amplitude: float = 0.0
    checker: bool = False


def default_textures(n_classes: int) -> list[ClassTexture]:
    """Colours spread evenly around a hue circle, each with its own stripe period.

    Every class then sits between two neighbours in colour space, which is
    what makes a held-out class ambiguous to a model trained on the rest.
    """
    out = []
    for k in range(n_classes):
        theta = 2 * np.pi * k / n_classes
        rgb = 128 + 70 * np.array(
            [np.cos(theta), np.cos(theta - 2 * np.pi / 3), np.cos(theta + 2 * np.pi / 3)]
        )
        out.append(
            ClassTexture(
                tuple(int(round(v)) for v in rgb), noise=10.0,
                stripe_period=4 + 2 * k, stripe_amplitude=12.0, checker=k % 2 == 1,
            )
        )
    return out


@dataclass
class SynthConfig:
    n_tiles: int = 8
    tile_size: int = 256
    n_classes: int = 5
    textures: list[ClassTexture] | None = None
    n_regions: int = 14
    min_class_share: float = 0.04
    max_class_share: float = 0.6
    class_names: tuple[str, ...] | None = None
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if self.n_regions < self.n_classes:
            raise ValueError("need at least one region per class")
        if self.textures is not None and len(self.textures) != self.n_classes:
            raise ValueError("one texture per class required")
        if not 0 <= self.min_class_share < self.max_class_share <= 1:
            raise ValueError("class share bounds must satisfy 0 <= min < max <= 1")

    @property
    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        if self.n_classes == len(CLASSES):
            return CLASSES
        return tuple(f"class{i}" for i in range(self.n_classes))


def synthetic_palette(names: Sequence[str]) -> dict[str, tuple[int, int, int]]:
    if tuple(names) == CLASSES:
        return dict(DEFAULT_PALETTE)
    reserved = {UNKNOWN_COLOR, IGNORE_COLOR}
    out = {}
    k = 0
    for name in names:
        while True:
            k += 1
            rgb = ((k * 97) % 256, (k * 57 + 40) % 256, (k * 151 + 80) % 256)
            if rgb not in reserved and rgb not in out.values():
                break
        out[name] = rgb
    return out


def _render_texture(tex: ClassTexture, shape: tuple[int, int], rng) -> np.ndarray:
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    img = np.broadcast_to(np.asarray(tex.base_color, float), (h, w, 3)).copy()
    if tex.stripe_period > 0 and tex.stripe_amplitude:
        if tex.checker:
            phase = ((rr // tex.stripe_period) + (cc // tex.stripe_period)) % 2
        else:
            phase = ((rr + cc) // tex.stripe_period) % 2
        img += (tex.stripe_amplitude * (2 * phase - 1))[..., None]
    if tex.noise:
        img += rng.normal(0.0, tex.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _region_labels(cfg: SynthConfig, rng) -> np.ndarray:
    """Voronoi partition into convex polygonal cells, every class owning at least one."""
    n = cfg.tile_size
    for _ in range(cfg.max_attempts):
        sites = rng.uniform(0, n, size=(cfg.n_regions, 2))
        owner = np.concatenate(
            [rng.permutation(cfg.n_classes), rng.integers(0, cfg.n_classes, cfg.n_regions - cfg.n_classes)]
        )
        rr, cc = np.mgrid[0:n, 0:n]
        d = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
        labels = owner[d.argmin(axis=-1)].astype(np.uint8)
        share = np.bincount(labels.ravel(), minlength=cfg.n_classes) / labels.size
        if share.min() >= cfg.min_class_share and share.max() <= cfg.max_class_share:
            return labels
    raise RuntimeError(
        f"no layout met class share bounds [{cfg.min_class_share}, {cfg.max_class_share}] "
        f"in {cfg.max_attempts} attempts"
    )


def generate_synthetic(cfg: SynthConfig) -> list[LabeledTile]:
    """Tiles of textured Voronoi regions with exact labels; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    textures = cfg.textures or default_textures(cfg.n_classes)
    tiles = []
    for t in range(cfg.n_tiles):
        labels = _region_labels(cfg, rng)
        image = np.zeros((cfg.tile_size, cfg.tile_size, 3), dtype=np.uint8)
        for k, tex in enumerate(textures):
            layer = _render_texture(tex, labels.shape, rng)
            mask = labels == k
            image[mask] = layer[mask]
        tiles.append(LabeledTile(f"synth{t:03d}", image, labels))
    return tiles


def write_dataset(
    tiles: Sequence[LabeledTile], root: str | Path, palette: dict[str, tuple[int, int, int]]
) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_palette(palette, root / "palette.txt")
    for tile in tiles:
        save_tile(tile, root, palette)
