"""Pair-annotated image datasets, PNG/CSV storage and the synthetic generator.

A dataset directory holds ``images/<id>.png``, ``train_pairs.csv``,
``test_pairs.csv`` and, for generated data, ``manifest.json`` with the
latent strength of every image.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

__all__ = [
    "DataError",
    "ParseError",
    "LoadError",
    "ValidationError",
    "ImageSample",
    "ComparisonPair",
    "PairDataset",
    "SyntheticSpec",
    "EQUALITY_DELTA",
    "KINDS",
    "render",
    "label_for",
    "generate_synthetic",
    "save_pairs",
    "read_pairs",
    "load_pairs",
    "save_dataset",
    "load_dataset",
    "read_png",
    "write_png",
    "minibatches",
]

PAIRS_HEADER = ["image_i", "image_j", "target", "attribute"]
EQUALITY_DELTA = 0.05
KINDS = ("brightness", "blob_size", "vertical_position")
_BG, _FG = 0.1, 0.9


class DataError(Exception):
    """Base class for dataset problems."""


class ParseError(DataError):
    pass


class LoadError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray  # (C, H, W), float64 in [0, 1]
    latent_strength: float | None = None


@dataclass(frozen=True)
class ComparisonPair:
    id_i: str
    id_j: str
    t: float
    attribute: str

    def key(self) -> tuple[str, str, str]:
        return self.id_i, self.id_j, self.attribute


def _check_target(t: float, where: str = "") -> float:
    if t not in (0.0, 0.5, 1.0):
        raise ValidationError(f"target {t!r} not in {{0, 0.5, 1}}{where}")
    return t


@dataclass
class PairDataset:
    samples: dict[str, ImageSample]
    train_pairs: list[ComparisonPair]
    test_pairs: list[ComparisonPair]
    attribute: str

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        shapes = {s.pixels.shape for s in self.samples.values()}
        if len(shapes) > 1:
            raise ValidationError(f"images have differing shapes: {sorted(shapes)}")
        for s in self.samples.values():
            if s.pixels.ndim != 3:
                raise ValidationError(f"image {s.id!r} must be (C,H,W), got {s.pixels.shape}")
            if s.pixels.size and (s.pixels.min() < 0.0 or s.pixels.max() > 1.0):
                raise ValidationError(f"image {s.id!r} has pixels outside [0, 1]")
        for split in (self.train_pairs, self.test_pairs):
            for p in split:
                for ref in (p.id_i, p.id_j):
                    if ref not in self.samples:
                        raise ValidationError(f"pair references missing image id {ref!r}")
                _check_target(p.t)
        overlap = {p.key() for p in self.train_pairs} & {p.key() for p in self.test_pairs}
        if overlap:
            raise ValidationError(f"train and test pairs overlap, e.g. {sorted(overlap)[0]}")

    @property
    def image_shape(self) -> tuple[int, int, int] | None:
        for s in self.samples.values():
            return tuple(s.pixels.shape)
        return None

    def stack(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.samples[i].pixels for i in ids]) if ids else np.zeros((0,))

    def ids_in(self, pairs: Iterable[ComparisonPair]) -> list[str]:
        """Sorted ids referenced by ``pairs``."""
        return sorted({i for p in pairs for i in (p.id_i, p.id_j)})

    def latent(self) -> dict[str, float]:
        return {k: s.latent_strength for k, s in self.samples.items() if s.latent_strength is not None}


# ---------------------------------------------------------------------------
# PNG / CSV


def read_png(path: Path, shape: tuple[int, int, int] | None = None, resize: bool = False) -> np.ndarray:
    """Decode to (C, H, W) float64 in [0, 1]; gray stays 1 channel, colour becomes 3."""
    try:
        with Image.open(path) as im:
            im.load()
            if shape is not None and resize and im.size != (shape[2], shape[1]):
                im = im.resize((shape[2], shape[1]), Image.NEAREST)
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise LoadError(f"cannot decode image {path}: {exc}") from exc
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    arr = np.clip(arr, 0.0, 1.0)
    if shape is not None and arr.shape != tuple(shape):
        raise ValidationError(f"image {path} has shape {arr.shape}, expected {tuple(shape)} "
                              "(set resize to rescale)")
    return np.ascontiguousarray(arr)


def write_png(path: Path, pixels: np.ndarray) -> None:
    """Write (C, H, W) or (H, W) values in [0, 1] as 8-bit gray or RGB."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(path, format="PNG")


def _fmt_target(t: float) -> str:
    return repr(float(t))


def save_pairs(pairs: Iterable[ComparisonPair], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIRS_HEADER)
        for p in pairs:
            w.writerow([f"{p.id_i}.png", f"{p.id_j}.png", _fmt_target(p.t), p.attribute])


def _image_id(name: str) -> str:
    return Path(name).stem if name.lower().endswith(".png") else name


def read_pairs(path: Path) -> tuple[list[ComparisonPair], dict[str, str]]:
    """Parse a pairs CSV; returns the pairs and an id -> file name map."""
    pairs: list[ComparisonPair] = []
    files: dict[str, str] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot open pairs file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return pairs, files
        if [h.strip() for h in header] != PAIRS_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(PAIRS_HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            a, b, t_raw, attr = (c.strip() for c in row)
            if not a or not b or not attr:
                raise ParseError(f"{path}:{line}: empty field")
            try:
                t = float(t_raw)
            except ValueError:
                raise ParseError(f"{path}:{line}: target {t_raw!r} is not a number") from None
            _check_target(t, f" ({path}:{line})")
            for name in (a, b):
                key = _image_id(name)
                if files.setdefault(key, name) != name:
                    raise ParseError(f"{path}:{line}: id {key!r} maps to both {files[key]!r} and {name!r}")
            pairs.append(ComparisonPair(_image_id(a), _image_id(b), t, attr))
    return pairs, files


def _resolve(images_dir: Path, name: str, image_id: str) -> Path:
    for cand in (images_dir / name, images_dir / f"{name}.png"):
        if cand.is_file():
            return cand
    raise LoadError(f"missing image for id {image_id!r} (looked for {name!r} in {images_dir})")


def load_pairs(images_dir, pairs_file, test_pairs_file=None, *, attribute: str | None = None,
               image_shape: tuple[int, int, int] | None = None, resize: bool = False,
               latent: dict[str, float] | None = None, workers: int = 1) -> PairDataset:
    """Load train (and optionally test) pairs plus every image they reference.

    Images are decoded in id order; with ``workers > 1`` decoding runs in a
    thread pool but results are still assembled by id. When ``image_shape``
    is None the first image fixes the size and any mismatch is an error.
    """
    images_dir = Path(images_dir)
    train, files = read_pairs(Path(pairs_file))
    test: list[ComparisonPair] = []
    if test_pairs_file is not None:
        test, more = read_pairs(Path(test_pairs_file))
        for k, v in more.items():
            if files.setdefault(k, v) != v:
                raise ParseError(f"id {k!r} maps to both {files[k]!r} and {v!r}")
    attrs = {p.attribute for p in train + test}
    if attribute is not None:
        train = [p for p in train if p.attribute == attribute]
        test = [p for p in test if p.attribute == attribute]
    elif len(attrs) > 1:
        raise ValidationError(f"pairs mix attributes {sorted(attrs)}; choose one (one model per attribute)")
    else:
        attribute = next(iter(attrs), "")
    ids = sorted({i for p in train + test for i in (p.id_i, p.id_j)})
    paths = [_resolve(images_dir, files[i], i) for i in ids]
    if image_shape is None and paths and not resize:
        image_shape = read_png(paths[0]).shape
    decode = lambda path: read_png(path, image_shape, resize)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(decode, paths))
    else:
        arrays = [decode(p) for p in paths]
    latent = latent or {}
    samples = {i: ImageSample(i, a, latent.get(i)) for i, a in zip(ids, arrays)}
    return PairDataset(samples, train, test, attribute)


def save_dataset(ds: PairDataset, out_dir, manifest: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for sid in sorted(ds.samples):
        write_png(out / "images" / f"{sid}.png", ds.samples[sid].pixels)
    save_pairs(ds.train_pairs, out / "train_pairs.csv")
    save_pairs(ds.test_pairs, out / "test_pairs.csv")
    if manifest is not None:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(data_dir, **kwargs) -> PairDataset:
    """Load a dataset directory; generated data also gets its latent strengths."""
    d = Path(data_dir)
    if not (d / "train_pairs.csv").is_file():
        raise LoadError(f"{d} has no train_pairs.csv")
    test = d / "test_pairs.csv"
    manifest = d / "manifest.json"
    latent = None
    if manifest.is_file():
        try:
            latent = json.loads(manifest.read_text())["latent_strength"]
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad manifest {manifest}: {exc}") from exc
    ds = load_pairs(d / "images", d / "train_pairs.csv", test if test.is_file() else None,
                    latent=latent, **kwargs)
    if latent:
        # images referenced by no pair still belong to the ranking universe
        missing = sorted(set(latent) - set(ds.samples))
        shape = ds.image_shape
        for sid in missing:
            ds.samples[sid] = ImageSample(sid, read_png(_resolve(d / "images", f"{sid}.png", sid), shape),
                                          latent[sid])
    return ds


# ---------------------------------------------------------------------------
# synthetic relative-attribute data


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "brightness"
    n_images: int = 200
    image_size: int = 32
    n_train_pairs: int = 1000
    n_test_pairs: int = 300
    equality_fraction: float = 0.0
    seed: int = 0
    test_image_fraction: float = 0.25
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_images < 2:
            raise ValidationError("n_images must be >= 2")
        if self.image_size < 4:
            raise ValidationError("image_size must be >= 4")
        if self.n_train_pairs < 0 or self.n_test_pairs < 0:
            raise ValidationError("pair counts must be >= 0")
        if not 0.0 <= self.equality_fraction <= 1.0:
            raise ValidationError("equality_fraction must lie in [0, 1]")
        if not 0.0 <= self.test_image_fraction < 1.0:
            raise ValidationError("test_image_fraction must lie in [0, 1)")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")


def _disk(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    # linear one-pixel edge ramp keeps coverage strictly increasing in radius
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def blob_radius(s: float, size: int) -> float:
    return size * (0.06 + 0.19 * s)


def render(kind: str, s: float, size: int) -> np.ndarray:
    """Noise-free (1, size, size) rendering of latent strength ``s`` in [0, 1]."""
    c = (size - 1) / 2.0
    if kind == "brightness":
        img = np.full((size, size), _BG + (_FG - _BG) * s)
    elif kind == "blob_size":
        img = _BG + (_FG - _BG) * _disk(size, c, c, blob_radius(s, size))
    elif kind == "vertical_position":
        radius = 0.15 * size
        margin = radius + 1.0
        cy = (size - 1) - (margin + (size - 1 - 2 * margin) * s)  # larger s sits higher
        img = _BG + (_FG - _BG) * _disk(size, cy, c, radius)
    else:
        raise ValidationError(f"unknown kind {kind!r}")
    return img[None]


def blob_box(s: float, size: int) -> tuple[int, int, int, int]:
    """Pixel bounding box (row0, row1, col0, col1), end-exclusive, of the rendered blob."""
    c = (size - 1) / 2.0
    r = blob_radius(s, size) + 0.5
    lo, hi = max(0, math.ceil(c - r)), min(size, math.floor(c + r) + 1)
    return lo, hi, lo, hi


def label_for(s_i: float, s_j: float, delta: float = EQUALITY_DELTA) -> float:
    if s_i > s_j + delta:
        return 1.0
    if s_j > s_i + delta:
        return 0.0
    return 0.5


def _sample_pairs(rng: np.random.Generator, idx: np.ndarray, strengths: np.ndarray, n: int,
                  eq_fraction: float, exclude: set[tuple[int, int]]) -> list[tuple[int, int]]:
    a, b = np.triu_indices(len(idx), k=1)
    a, b = idx[a], idx[b]
    if exclude:
        keep = np.array([(int(x), int(y)) not in exclude for x, y in zip(a, b)], dtype=bool)
        a, b = a[keep], b[keep]
    near = np.abs(strengths[a] - strengths[b]) <= EQUALITY_DELTA
    n_eq = int(round(eq_fraction * n))
    near_idx, far_idx = np.flatnonzero(near), np.flatnonzero(~near)
    if n_eq > len(near_idx) or n - n_eq > len(far_idx):
        raise ValidationError(f"cannot draw {n_eq} near-equal and {n - n_eq} ordered pairs from "
                              f"{len(near_idx)} / {len(far_idx)} available; add images or lower counts")
    chosen = np.concatenate([rng.choice(near_idx, n_eq, replace=False),
                             rng.choice(far_idx, n - n_eq, replace=False)]).astype(np.int64)
    chosen = chosen[rng.permutation(len(chosen))]
    flip = rng.random(len(chosen)) < 0.5
    return [(int(b[k]), int(a[k])) if f else (int(a[k]), int(b[k])) for k, f in zip(chosen, flip)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[PairDataset, dict]:
    """Render images with known latent strength and label pairs from it.

    Returns the dataset (pixels already quantized to 8 bits, so it equals
    what a PNG round trip yields) and the JSON-ready manifest.
    """
    ss = np.random.SeedSequence(spec.seed)
    rng_s, rng_split, rng_pairs, rng_noise = (np.random.default_rng(c) for c in ss.spawn(4))
    strengths = rng_s.uniform(0.0, 1.0, size=spec.n_images)
    ids = [f"img{k:05d}" for k in range(spec.n_images)]
    n_test_images = int(round(spec.test_image_fraction * spec.n_images))
    order = rng_split.permutation(spec.n_images)
    test_idx, train_idx = np.sort(order[:n_test_images]), np.sort(order[n_test_images:])
    if spec.n_test_pairs and n_test_images < 2:
        test_idx = train_idx  # shared images; pairs themselves stay disjoint
    samples: dict[str, ImageSample] = {}
    for k, sid in enumerate(ids):
        img = render(spec.kind, float(strengths[k]), spec.image_size)
        if spec.noise:
            img = img + rng_noise.normal(0.0, spec.noise, size=img.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        samples[sid] = ImageSample(sid, img, float(strengths[k]))
    train_ij = _sample_pairs(rng_pairs, train_idx, strengths, spec.n_train_pairs, spec.equality_fraction, set())
    used = {(min(i, j), max(i, j)) for i, j in train_ij}
    test_ij = _sample_pairs(rng_pairs, test_idx, strengths, spec.n_test_pairs, spec.equality_fraction, used)

    def mk(pairs):
        return [ComparisonPair(ids[i], ids[j], label_for(strengths[i], strengths[j]), spec.kind)
                for i, j in pairs]

    ds = PairDataset(samples, mk(train_ij), mk(test_ij), spec.kind)
    manifest = {
        "format": "relrank-synthetic/1",
        "spec": asdict(spec),
        "seed": spec.seed,
        "equality_delta": EQUALITY_DELTA,
        "test_image_ids": [ids[k] for k in test_idx] if n_test_images >= 2 else [],
        "latent_strength": {sid: float(strengths[k]) for k, sid in enumerate(ids)},
    }
    return ds, manifest


# ---------------------------------------------------------------------------
# minibatching


def minibatches(pairs: Sequence, batch_pairs: int, seed: int, epoch: int) -> list[list]:
    """Shuffle with a permutation keyed by (seed, epoch) and cut into batches.

    Every pair appears exactly once; the last batch may be short.
    """
    if batch_pairs < 1:
        raise ValueError(f"batch_pairs must be >= 1, got {batch_pairs}")
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(len(pairs))
    return [[pairs[k] for k in perm[s:s + batch_pairs]] for s in range(0, len(pairs), batch_pairs)]
