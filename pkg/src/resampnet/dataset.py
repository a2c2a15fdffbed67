"""Labelled, split, provenance-tracked datasets built from source images.

Every stored image carries the full list of operations that produced it from
its source file, so a manifest can be re-verified bit for bit.  Generation is
a pure function of (recipe, sources, seed): per-entry random draws come from
an RNG keyed on ``(seed, tile, class)`` and never depend on processing order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imageops as ops
from .errors import ConfigError, GenerationError, InsufficientSourcesError, PatchError
from .imageio import decode_pnm, encode_pnm, read_image, write_pnm
from .imageops import ImageBuffer, OpRecord, resized_length

log = logging.getLogger(__name__)

FAMILIES = ("fixedParams", "randomParams", "postProcessed", "multiClass", "splicingPatches")
UPSCALE_FACTORS = tuple(range(110, 201, 10))
DOWNSCALE_FACTORS = tuple(range(50, 91, 10))
MULTICLASS_FACTORS = DOWNSCALE_FACTORS + UPSCALE_FACTORS
RANDOM_QUALITIES = tuple(range(50, 101, 10))
FIXED_QUALITIES = tuple(range(50, 91, 5))
SPLICING_QUALITIES = tuple(range(50, 101))
PATCH_SIZES = (256, 128, 96, 64)
SPLITS = ("train", "val", "test")
SOURCE_EXTENSIONS = (".pgm", ".ppm", ".png")

# Table-2 parameter sets of the post-processing operations
POST_OPS = {
    "gamma": {"gamma": (0.5, 0.6, 0.7, 0.8, 0.9, 1.2, 1.4, 1.6, 1.8, 2.0)},
    "mean": {"window": (3, 5, 7)},
    "gaussian": {"window": (3, 5, 7), "sigma": (0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6)},
    "median": {"window": (3, 5, 7)},
    "wiener": {"window": (3, 5, 7)},
}

_RECIPE_KEYS = {
    "family": "family",
    "scaleFactors": "scale_factors",
    "qualityRange": "quality_range",
    "patchSize": "patch_size",
    "countPerClass": "count_per_class",
    "seed": "seed",
    "splitRatios": "split_ratios",
    "resampleKind": "resample_kind",
    "postOp": "post_op",
    "channel": "channel",
}


@dataclass
class DatasetRecipe:
    family: str = "fixedParams"
    scale_factors: List[float] = field(default_factory=list)
    quality_range: List[int] = field(default_factory=list)
    patch_size: int = 256
    count_per_class: int = 1000
    seed: int = 0
    split_ratios: Tuple[int, int, int] = (5, 1, 1)
    resample_kind: str = "up"
    post_op: Optional[str] = None
    channel: str = "green"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.resample_kind not in ("up", "down", "both"):
            raise ConfigError(f"resampleKind must be up, down or both, got {self.resample_kind!r}")
        if not self.scale_factors:
            self.scale_factors = list(self._default_factors())
        if not self.quality_range:
            self.quality_range = list(self._default_qualities())
        self.scale_factors = [int(f) if float(f).is_integer() else float(f) for f in self.scale_factors]
        self.quality_range = [int(q) for q in self.quality_range]
        self.split_ratios = tuple(int(r) for r in self.split_ratios)
        if self.family == "fixedParams" and (len(self.scale_factors) != 1 or len(self.quality_range) != 1):
            raise ConfigError("fixedParams needs exactly one scale factor and one quality")
        if self.patch_size not in PATCH_SIZES:
            raise ConfigError(f"patchSize must be one of {PATCH_SIZES}, got {self.patch_size}")
        if self.count_per_class < 1:
            raise ConfigError(f"countPerClass must be positive, got {self.count_per_class}")
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 or sum(self.split_ratios) == 0:
            raise ConfigError(f"splitRatios must be three non-negative ints, got {self.split_ratios}")
        if any(not 10 <= f <= 400 or f == 100 for f in self.scale_factors):
            raise ConfigError(f"scale factors must lie in [10, 400] and differ from 100: {self.scale_factors}")
        if any(not 1 <= q <= 100 for q in self.quality_range):
            raise ConfigError(f"qualities must lie in [1, 100]: {self.quality_range}")
        if self.family == "postProcessed":
            if self.post_op not in POST_OPS:
                raise ConfigError(f"postProcessed needs postOp in {sorted(POST_OPS)}, got {self.post_op!r}")
        elif self.post_op is not None:
            raise ConfigError(f"postOp only applies to the postProcessed family, got {self.post_op!r}")
        if self.channel not in ("green", "gray"):
            raise ConfigError(f"channel must be green or gray, got {self.channel!r}")

    def _default_factors(self):
        if self.family == "fixedParams":
            return (150,)
        if self.family == "multiClass":
            return MULTICLASS_FACTORS
        if self.family == "splicingPatches":
            up, down = tuple(range(101, 201)), tuple(range(50, 100))
        else:
            up, down = UPSCALE_FACTORS, DOWNSCALE_FACTORS
        return {"up": up, "down": down, "both": down + up}[self.resample_kind]

    def _default_qualities(self):
        if self.family == "fixedParams":
            return (75,)
        if self.family == "splicingPatches":
            return SPLICING_QUALITIES
        return RANDOM_QUALITIES

    @property
    def class_names(self) -> List[str]:
        if self.family == "multiClass":
            return [_factor_name(f) for f in self.scale_factors]
        return ["original", "resampled"]

    @property
    def tile_size(self) -> int:
        """Smallest square source window from which every class can cut a full patch."""
        size = self.patch_size
        for f in self.scale_factors:
            n = size
            while resized_length(n, f) < self.patch_size:
                n += 1
            size = max(size, n)
        return size

    def to_dict(self) -> dict:
        d = {k: getattr(self, v) for k, v in _RECIPE_KEYS.items()}
        d["splitRatios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecipe":
        unknown = set(d) - set(_RECIPE_KEYS) - {"sourceDir", "sourceKind"}
        if unknown:
            raise ConfigError(f"unknown recipe keys: {sorted(unknown)}")
        return cls(**{_RECIPE_KEYS[k]: v for k, v in d.items() if k in _RECIPE_KEYS})


def _factor_name(f) -> str:
    return str(int(f)) if float(f).is_integer() else str(f)


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str
    ops: List[OpRecord]

    def to_dict(self) -> dict:
        return {"path": self.path, "label": self.label, "split": self.split, "ops": [o.to_dict() for o in self.ops]}


@dataclass
class DatasetManifest:
    recipe: dict
    seed: int
    class_names: List[str]
    entries: List[ManifestEntry]
    root: Optional[Path] = None  # directory holding manifest.json and images/

    def to_json(self) -> str:
        doc = {
            "recipe": self.recipe,
            "seed": self.seed,
            "classNames": self.class_names,
            "entries": [e.to_dict() for e in self.entries],
        }
        return json.dumps(doc, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        missing = {"recipe", "seed", "classNames", "entries"} - set(doc)
        if missing:
            raise ConfigError(f"{path}: manifest lacks fields {sorted(missing)}")
        entries = [
            ManifestEntry(e["path"], int(e["label"]), e["split"], ops.records_from_dicts(e["ops"]))
            for e in doc["entries"]
        ]
        return cls(doc["recipe"], int(doc["seed"]), list(doc["classNames"]), entries, path.parent)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def image_path(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def load_image(self, entry: ManifestEntry) -> ImageBuffer:
        return read_image(self.image_path(entry))

    def arrays(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        """``(images, labels)`` for a split: float32 NHWC in [0, 1] and int labels."""
        entries = self.split(split)
        if not entries:
            raise ConfigError(f"split {split!r} is empty")
        imgs = [self.load_image(e) for e in entries]
        x = np.stack([i.data for i in imgs]).astype(np.float32)[..., None] / 255.0
        return x, np.array([e.label for e in entries])


# ------------------------------------------------------------------ sources

def list_sources(source_dir) -> List[Path]:
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise InsufficientSourcesError(f"sources not found: {source_dir}")
    return sorted(p for p in source_dir.iterdir() if p.suffix.lower() in SOURCE_EXTENSIONS)


def source_tiles(source_dir, tile: int) -> List[Tuple[str, int, int]]:
    """Non-overlapping ``tile``-sized windows ``(file name, top, left)`` of every source, row-major."""
    tiles = []
    for path in list_sources(source_dir):
        img = read_image(path)
        for top in range(0, img.height - tile + 1, tile):
            for left in range(0, img.width - tile + 1, tile):
                tiles.append((path.name, top, left))
    return tiles


def _draw(rng: np.random.Generator, values: Sequence):
    return values[int(rng.integers(len(values)))]


def _assign_splits(n: int, ratios: Sequence[int], seed: int) -> List[str]:
    total = sum(ratios)
    n_train = round(n * ratios[0] / total)
    n_val = round(n * ratios[1] / total)
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    split = [""] * n
    for rank, i in enumerate(order):
        split[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return split


def _entry_ops(recipe: DatasetRecipe, label: int, tile: Tuple[str, int, int], rng) -> List[OpRecord]:
    name, top, left = tile
    seq = [
        ("source", {"file": name}),
        ("window", {"top": top, "left": left, "size": recipe.tile_size}),
        ("channel", {"channel": recipe.channel}),
    ]
    if recipe.family == "multiClass":
        factor = recipe.scale_factors[label]
    else:
        factor = _draw(rng, recipe.scale_factors) if label == 1 else None
    q = _draw(rng, recipe.quality_range)
    if factor is not None:
        seq.append(("resize", {"factor": factor}))
    if recipe.family == "postProcessed":
        # only the resampled class is edited; both are compressed before the crop
        if factor is not None:
            choices = POST_OPS[recipe.post_op]
            seq.append((recipe.post_op, {k: _draw(rng, v) for k, v in choices.items()}))
        seq += [("jpeg", {"q": q}), ("crop", {"size": recipe.patch_size})]
    else:
        seq += [("crop", {"size": recipe.patch_size}), ("jpeg", {"q": q})]
    return [OpRecord(n, p, i) for i, (n, p) in enumerate(seq)]


def replay_entry(records: Sequence[OpRecord], source_dir, cache: Optional[dict] = None) -> ImageBuffer:
    """Rebuild an image from its operation records, the first of which names the source file."""
    first, rest = records[0], list(records[1:])
    if first.name != "source":
        raise GenerationError(f"op chain must start with 'source', got {first.name!r}")
    fname = first.params["file"]
    if cache is not None and fname in cache:
        img = cache[fname]
    else:
        img = read_image(Path(source_dir) / fname)
        if cache is not None:
            cache[fname] = img
    if img.color_space == "gray":
        # a gray source has no green plane; the gray channel is the image itself
        rest = [OpRecord(r.name, {"channel": "gray"}, r.index) if r.name == "channel" else r for r in rest]
    return ops.replay(img, rest)


def generate(recipe: DatasetRecipe, source_dir, out_dir) -> DatasetManifest:
    """Write ``images/<class>/<index>.pgm`` and ``manifest.json`` under ``out_dir``.

    Output is staged in a hidden sibling directory and moved into place only
    when every image has been written, so a failed run leaves no partial data.
    """
    source_dir = Path(source_dir).resolve()
    out_dir = Path(out_dir)
    tiles = source_tiles(source_dir, recipe.tile_size)
    if len(tiles) < recipe.count_per_class:
        raise InsufficientSourcesError(
            f"{len(tiles)} source windows of {recipe.tile_size}x{recipe.tile_size} available in {source_dir}, "
            f"{recipe.count_per_class} needed"
        )
    pick = np.random.default_rng([recipe.seed, 0x711E]).permutation(len(tiles))[: recipe.count_per_class]
    chosen = [tiles[i] for i in sorted(pick)]
    splits = _assign_splits(len(chosen), recipe.split_ratios, recipe.seed)
    names = recipe.class_names

    staging = out_dir / ".partial"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        shutil.rmtree(staging, ignore_errors=True)
        for name in names:
            (staging / "images" / name).mkdir(parents=True)
        entries = []
        cache: dict = {}
        for i, tile in enumerate(chosen):
            for label, cname in enumerate(names):
                rng = np.random.default_rng([recipe.seed, i, label])
                records = _entry_ops(recipe, label, tile, rng)
                img = replay_entry(records, source_dir, cache)
                rel = f"images/{cname}/{i:05d}.pgm"
                write_pnm(staging / rel, img)
                entries.append(ManifestEntry(rel, label, splits[i], records))
            if (i + 1) % 200 == 0:
                log.info("generated %d/%d source windows", i + 1, len(chosen))
        echo = recipe.to_dict()
        echo["sourceDir"] = str(source_dir)
        echo["sourceKind"] = source_kind(source_dir)
        manifest = DatasetManifest(echo, recipe.seed, names, entries, out_dir)
        manifest.save(staging / "manifest.json")
        shutil.rmtree(out_dir / "images", ignore_errors=True)
        os.replace(staging / "images", out_dir / "images")
        os.replace(staging / "manifest.json", out_dir / "manifest.json")
    except OSError as exc:
        raise GenerationError(f"cannot write dataset under {out_dir}: {exc}") from exc
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return manifest


# ---------------------------------------------------------------- verification

@dataclass
class VerifyReport:
    entry_ok: List[bool]
    failures: List[str]
    disjointness_violations: List[str]
    balance_violations: List[str]

    @property
    def passed(self) -> bool:
        return all(self.entry_ok) and not self.disjointness_violations and not self.balance_violations

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "entries": len(self.entry_ok),
            "failedEntries": self.failures,
            "disjointnessViolations": self.disjointness_violations,
            "balanceViolations": self.balance_violations,
        }


def verify(manifest: DatasetManifest, source_dir=None) -> VerifyReport:
    """Replay every entry and compare with the stored image; check split hygiene."""
    source_dir = Path(source_dir or manifest.recipe.get("sourceDir", "."))
    ok, failures = [], []
    cache: dict = {}
    for e in manifest.entries:
        try:
            stored = manifest.image_path(e).read_bytes()
            good = encode_pnm(replay_entry(e.ops, source_dir, cache)) == stored
        except Exception as exc:  # report, never raise
            good = False
            failures.append(f"{e.path}: {exc}")
        else:
            if not good:
                failures.append(f"{e.path}: replay differs from stored image")
        ok.append(good)

    disjoint = []
    seen_path: Dict[str, str] = {}
    seen_source: Dict[tuple, str] = {}
    for e in manifest.entries:
        prev = seen_path.setdefault(e.path, e.split)
        if prev != e.split:
            disjoint.append(f"{e.path} appears in splits {prev} and {e.split}")
        src = tuple(json.dumps(o.to_dict(), sort_keys=True) for o in e.ops[:2])
        prev = seen_source.setdefault(src, e.split)
        if prev != e.split:
            disjoint.append(f"source window {e.ops[0].params.get('file')} {e.ops[1].params} in {prev} and {e.split}")

    balance = []
    ratios = manifest.recipe.get("splitRatios", [5, 1, 1])
    counts = {label: {s: 0 for s in SPLITS} for label in range(len(manifest.class_names))}
    for e in manifest.entries:
        if e.split not in SPLITS:
            balance.append(f"{e.path}: unknown split {e.split!r}")
            continue
        counts.setdefault(e.label, {s: 0 for s in SPLITS})[e.split] += 1
    totals = {label: sum(c.values()) for label, c in counts.items()}
    if len(set(totals.values())) > 1:
        balance.append(f"unbalanced classes: {totals}")
    for label, c in counts.items():
        n = totals[label]
        for s, r in zip(SPLITS, ratios):
            expected = n * r / sum(ratios)
            if abs(c[s] - expected) > 1:
                balance.append(f"class {label} split {s}: {c[s]} entries, expected {expected:.1f}")
    return VerifyReport(ok, failures, disjoint, balance)


# ------------------------------------------------------------- splicing grids

def patch_offsets(length: int, patch: int, stride: int) -> List[int]:
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] != length - patch:
        offs.append(length - patch)
    return offs


def make_splicing_patches(img: ImageBuffer, patch: int, stride: int):
    """Overlapping patch grid covering ``img``; returns ``[((top, left), ImageBuffer), ...]``.

    The last row/column of windows is snapped to the bottom/right border.
    """
    if patch < 1 or stride < 1:
        raise PatchError(f"patch and stride must be positive, got {patch}, {stride}")
    if img.height < patch or img.width < patch:
        raise PatchError(f"{patch}x{patch} patch does not fit a {img.height}x{img.width} image")
    return [
        ((top, left), ops.crop(img, top, left, patch, patch))
        for top in patch_offsets(img.height, patch, stride)
        for left in patch_offsets(img.width, patch, stride)
    ]


# ------------------------------------------------------------ synthetic sources

def synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """RGB camera-like picture: 1/f texture, hard-edged shapes, sensor noise.

    Returns float planes (3, size, size) on the 0..255 scale, unclipped.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    radius[0, 0] = 1.0
    beta = rng.uniform(0.9, 1.4)
    amp = radius ** -beta
    amp[0, 0] = 0.0
    planes = np.empty((3, size, size))
    shared = np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * amp).real
    for c in range(3):
        own = np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * amp).real
        tex = 0.8 * shared + 0.2 * own
        planes[c] = tex / (tex.std() + 1e-12)
    planes = 128 + rng.uniform(25, 50) * planes
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 9))):
        color = rng.uniform(20, 235, 3)
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 16, size / 3, 2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        alpha = rng.uniform(0.5, 0.9)
        planes[:, mask] = (1 - alpha) * planes[:, mask] + alpha * color[:, None]
    planes += rng.uniform(1.0, 3.0) * rng.standard_normal(planes.shape)
    return planes


def generate_synthetic_sources(out_dir, count: int, size: int = 256, seed: int = 0) -> List[Path]:
    """Write ``count`` synthetic RGB sources as PPM, each JPEG-compressed at Q 95-97.

    Stands in for a camera corpus when none is available.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        planes = synthetic_image(rng, size)
        q = int(rng.integers(95, 98))
        img = ops.jpeg_core_roundtrip(ops.from_planes(planes, "u8", "rgb"), q)
        path = out_dir / f"synthetic_{i:05d}.ppm"
        write_pnm(path, img)
        paths.append(path)
    (out_dir / "SOURCES.json").write_text(
        json.dumps({"sourceKind": "synthetic", "count": count, "size": size, "seed": seed}, indent=1) + "\n"
    )
    return paths


def source_kind(source_dir) -> str:
    meta = Path(source_dir) / "SOURCES.json"
    if meta.exists():
        try:
            return json.loads(meta.read_text()).get("sourceKind", "user")
        except ValueError:
            return "user"
    return "user"
