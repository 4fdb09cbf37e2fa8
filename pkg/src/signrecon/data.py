"""Data ingestion and synthesis.

Manifest-driven loading of pre-exported slices with side information,
preprocessing (center crop, resize, per-slice max normalisation),
volume-wise splits, a styled synthetic phantom generator for desk-scale
experiments, and batch construction (undersampling happens here, with
one seeded mask per slice).

On-disk formats:

* slice arrays: 16-byte header (8-byte magic ``SIGNIMG1``, uint32 H,
  uint32 W, little endian) followed by H*W float32 little-endian pixels
  in row-major order;
* manifest: JSON with ``volumes -> slices -> {path, side_info}``, side
  info keyed by schema field names (null means unknown).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from skimage.transform import resize as _skimage_resize

from .backbones import ReconBatch
from .errors import ConfigError, DegenerateSliceError, InvalidInputError
from .mri import fft2c, gen_gaussian_mask, undersample, zero_filled_recon
from .rng import substream_rng, substream_seed
from .sideinfo import ContinuousStats, SideInfoRecord, SideInfoSchema, normalize_continuous

__all__ = [
    "SLICE_MAGIC",
    "save_slice_array",
    "load_slice_array",
    "preprocess",
    "SliceEntry",
    "VolumeEntry",
    "DatasetManifest",
    "split_by_volume",
    "PhantomStyleSpec",
    "synth_phantom",
    "random_side_info",
    "generate_synthetic_dataset",
    "SliceDataset",
    "MaskParams",
    "build_batches",
]

logger = logging.getLogger(__name__)

SLICE_MAGIC = b"SIGNIMG1"
_HEADER_FMT = "<8sII"


def save_slice_array(path, arr: np.ndarray) -> None:
    """Write a 2D float32 array in the flat binary slice format."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"slice arrays are 2D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_FMT, SLICE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes())


def load_slice_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize(_HEADER_FMT)
    if len(blob) < header_size:
        raise InvalidInputError(f"slice file {path} is truncated")
    magic, h, w = struct.unpack(_HEADER_FMT, blob[:header_size])
    if magic != SLICE_MAGIC:
        raise InvalidInputError(f"slice file {path} has wrong magic {magic!r}")
    body = np.frombuffer(blob[header_size:], dtype="<f4")
    if body.size != h * w:
        raise InvalidInputError(
            f"slice file {path} has {body.size} pixels, header says {h}x{w}"
        )
    return body.reshape(h, w).astype(np.float32)


def preprocess(raw: np.ndarray, size: int = 320) -> np.ndarray:
    """Center-crop to square, bilinear-resize to (size, size), scale to
    [0, 1] by the per-slice maximum."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or min(raw.shape) < 32:
        raise InvalidInputError(f"expected a 2D slice of at least 32x32, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("slice contains non-finite values")
    h, w = raw.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    img = raw[top : top + side, left : left + side]
    if img.shape != (size, size):
        img = _skimage_resize(
            img, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True
        )
    peak = img.max()
    if peak <= 0:
        raise DegenerateSliceError("slice has no positive content")
    img = np.clip(img / peak, 0.0, 1.0)
    return img


@dataclass(frozen=True)
class SliceEntry:
    path: str
    record: SideInfoRecord


@dataclass(frozen=True)
class VolumeEntry:
    volume_id: str
    slices: tuple[SliceEntry, ...]
    split_hint: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    schema: SideInfoSchema
    volumes: tuple[VolumeEntry, ...]
    root: Path = Path(".")
    config_hash: str | None = None

    def __post_init__(self):
        ids = [v.volume_id for v in self.volumes]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("volume ids must be unique")

    @property
    def n_slices(self) -> int:
        return sum(len(v.slices) for v in self.volumes)

    def slice_path(self, entry: SliceEntry) -> Path:
        return self.root / entry.path

    def to_dict(self) -> dict:
        return {
            "format": "signrecon-manifest-v1",
            "config_hash": self.config_hash,
            "schema": self.schema.to_dict(),
            "volumes": [
                {
                    "id": v.volume_id,
                    "split": v.split_hint,
                    "slices": [
                        {"path": s.path, "side_info": s.record.to_dict(self.schema)}
                        for s in v.slices
                    ],
                }
                for v in self.volumes
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("format") != "signrecon-manifest-v1":
            raise InvalidInputError(f"unrecognised manifest format in {path}")
        schema = SideInfoSchema.from_dict(d["schema"])
        volumes = []
        for v in d["volumes"]:
            slices = tuple(
                SliceEntry(s["path"], SideInfoRecord.from_dict(schema, s["side_info"]))
                for s in v["slices"]
            )
            volumes.append(VolumeEntry(v["id"], slices, v.get("split")))
        manifest = cls(
            schema=schema,
            volumes=tuple(volumes),
            root=path.parent,
            config_hash=d.get("config_hash"),
        )
        if check_files:
            for vol in manifest.volumes:
                for entry in vol.slices:
                    p = manifest.slice_path(entry)
                    if not p.exists():
                        raise InvalidInputError(f"manifest references missing file {p}")
        return manifest


def split_by_volume(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Partition volumes into train/val/test manifests (no slice leakage)."""
    n = len(manifest.volumes)
    if n < 3:
        raise ConfigError(f"need at least 3 volumes to split, got {n}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    counts = [int(round(r * n)) for r in ratios[:2]]
    counts.append(n - counts[0] - counts[1])
    # Every split with a positive ratio gets at least one volume.
    for i in range(3):
        while ratios[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    if min(counts) < 0:
        raise ConfigError(f"ratios {ratios} give invalid counts {counts} for {n} volumes")
    order = substream_rng(seed, "split").permutation(n)
    shuffled = [manifest.volumes[i] for i in order]
    parts = []
    start = 0
    for size, name in zip(counts, ("train", "val", "test")):
        vols = tuple(replace(v, split_hint=name) for v in shuffled[start : start + size])
        parts.append(
            DatasetManifest(
                schema=manifest.schema,
                volumes=vols,
                root=manifest.root,
                config_hash=manifest.config_hash,
            )
        )
        start += size
    return parts[0], parts[1], parts[2]


@dataclass(frozen=True)
class PhantomStyleSpec:
    """Deterministic mapping from side information to rendering style.

    Contrast ids pick an intensity transfer exponent, view ids a
    rotation/aspect pair, source ids an additive noise level; scanning
    parameters map through fixed monotone curves to a brightness scale
    (TR, flip angle) and a blur width (TE). Distinct contrasts use
    distinct exponents so the conditioning signal is real.
    """

    contrast_exponents: tuple[float, ...] = (0.45, 0.7, 1.0, 1.4, 1.9, 2.5, 3.2)
    view_angles_deg: tuple[float, ...] = (0.0, 35.0, -35.0)
    view_aspects: tuple[float, ...] = (1.0, 0.75, 1.3)
    source_noise_std: tuple[float, ...] = (0.01, 0.025, 0.04, 0.025)
    brightness_range: tuple[float, float] = (0.75, 1.35)
    blur_max_sigma: float = 1.6
    # Reference scales for the monotone parameter curves.
    tr_scale_ms: float = 2000.0
    te_scale_ms: float = 60.0
    flip_scale_deg: float = 60.0

    def exponent(self, contrast_id: int) -> float:
        return self.contrast_exponents[contrast_id % len(self.contrast_exponents)]

    def view(self, view_id: int) -> tuple[float, float]:
        return (
            self.view_angles_deg[view_id % len(self.view_angles_deg)],
            self.view_aspects[view_id % len(self.view_aspects)],
        )

    def noise_std(self, source_id: int) -> float:
        return self.source_noise_std[source_id % len(self.source_noise_std)]

    def brightness(self, tr_ms: float, flip_deg: float) -> float:
        lo, hi = self.brightness_range
        u = _sigmoid(tr_ms / self.tr_scale_ms - 1.0) + _sigmoid(flip_deg / self.flip_scale_deg - 1.0)
        return lo + (hi - lo) * u / 2.0

    def blur_sigma(self, te_ms: float) -> float:
        return self.blur_max_sigma * _sigmoid(2.0 * (te_ms / self.te_scale_ms - 1.0))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


_CONTINUOUS_DEFAULTS = {"TR": 2000.0, "TE": 60.0, "flip_angle": 60.0}


def _continuous_by_name(
    schema: SideInfoSchema, rec: SideInfoRecord, name: str
) -> float:
    if name not in schema.continuous_fields:
        return _CONTINUOUS_DEFAULTS.get(name, 0.0)
    j = schema.continuous_fields.index(name)
    if not rec.continuous_known[j]:
        return _CONTINUOUS_DEFAULTS.get(name, 0.0)
    return rec.continuous_values[j]


def _render_geometry(size: int, rng: np.random.Generator, angle_deg: float, aspect: float) -> np.ndarray:
    """Random soft-edged ellipse/line phantom on a rotated, stretched grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = cy = (size - 1) / 2.0
    u = (xx - cx) / (size / 2.0)
    v = (yy - cy) / (size / 2.0)
    th = math.radians(angle_deg)
    ur = math.cos(th) * u + math.sin(th) * v
    vr = -math.sin(th) * u + math.cos(th) * v
    ur = ur / aspect
    vr = vr * aspect
    img = np.zeros((size, size), dtype=np.float64)
    sharp = size / 3.0

    def add_ellipse(cx_e, cy_e, a, b, tilt, intensity):
        ct, st = math.cos(tilt), math.sin(tilt)
        ue = (ur - cx_e) * ct + (vr - cy_e) * st
        ve = -(ur - cx_e) * st + (vr - cy_e) * ct
        d = (ue / a) ** 2 + (ve / b) ** 2
        mask = 1.0 / (1.0 + np.exp(np.clip(sharp * (d - 1.0), -40, 40)))
        return intensity * mask

    # Outer shell plus interior structures.
    img += add_ellipse(0.0, 0.0, 0.88, 0.92, 0.0, 0.55)
    n_inner = int(rng.integers(4, 8))
    for _ in range(n_inner):
        img += add_ellipse(
            rng.uniform(-0.45, 0.45),
            rng.uniform(-0.45, 0.45),
            rng.uniform(0.08, 0.35),
            rng.uniform(0.08, 0.35),
            rng.uniform(0, math.pi),
            rng.uniform(-0.35, 0.6),
        )
    # Thin line structures.
    n_lines = int(rng.integers(1, 4))
    for _ in range(n_lines):
        c = rng.uniform(-0.5, 0.5)
        width = rng.uniform(0.01, 0.03)
        tilt = rng.uniform(0, math.pi)
        d = np.abs(math.cos(tilt) * ur + math.sin(tilt) * vr - c)
        img += rng.uniform(0.15, 0.4) * np.exp(-((d / width) ** 2))
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return img


def synth_phantom(
    record: SideInfoRecord,
    style: PhantomStyleSpec,
    schema: SideInfoSchema,
    size: int = 64,
    seed: int = 0,
) -> tuple[np.ndarray, SideInfoRecord]:
    """Render a styled random phantom for the given side information.

    Geometry and noise are drawn from separate substreams of ``seed`` so
    the same seed with a modified style spec (e.g. zero noise) yields a
    pixel-aligned clean reference.
    """
    schema.validate_record(record)
    geo_rng = substream_rng(seed, "phantom-geometry")
    noise_rng = substream_rng(seed, "phantom-noise")

    names = schema.categorical_names
    contrast_id = record.categorical_ids[names.index("contrast")] if "contrast" in names else 0
    view_id = record.categorical_ids[names.index("view")] if "view" in names else 0
    source_id = record.categorical_ids[names.index("source")] if "source" in names else 0

    angle, aspect = style.view(view_id)
    img = _render_geometry(size, geo_rng, angle, aspect)
    img = np.power(img, style.exponent(contrast_id))

    tr = _continuous_by_name(schema, record, "TR")
    te = _continuous_by_name(schema, record, "TE")
    flip = _continuous_by_name(schema, record, "flip_angle")
    img = np.clip(img * style.brightness(tr, flip), 0.0, 1.0)
    sigma = style.blur_sigma(te)
    if sigma > 1e-3:
        img = gaussian_filter(img, sigma=sigma, mode="nearest")
    noise = noise_rng.standard_normal(img.shape)
    img = np.clip(img + style.noise_std(source_id) * noise, 0.0, 1.0)
    return img, record


def random_side_info(schema: SideInfoSchema, rng: np.random.Generator) -> SideInfoRecord:
    """Draw a record uniformly over vocabularies and typical scan ranges.

    The source field named "unknown" doubles as the unknown-parameters
    case: such records carry no scanning parameters (coded as zeros).
    """
    cat_ids = [int(rng.integers(0, len(vocab))) for _, vocab in schema.categorical_fields]
    ranges = {"TR": (400.0, 6000.0), "TE": (10.0, 120.0), "flip_angle": (10.0, 150.0)}
    values, known = [], []
    unknown_params = False
    if "source" in schema.categorical_names:
        i = schema.categorical_names.index("source")
        vocab = schema.vocabulary("source")
        unknown_params = vocab[cat_ids[i]] == "unknown"
    for name in schema.continuous_fields:
        if unknown_params:
            values.append(0.0)
            known.append(False)
        else:
            lo, hi = ranges.get(name, (0.0, 1.0))
            values.append(float(np.round(rng.uniform(lo, hi), 1)))
            known.append(True)
    return SideInfoRecord(tuple(cat_ids), tuple(values), tuple(known))


def generate_synthetic_dataset(
    out_dir,
    schema: SideInfoSchema,
    style: PhantomStyleSpec,
    n_volumes: int,
    slices_per_volume: int,
    size: int = 64,
    seed: int = 0,
    config_hash: str | None = None,
) -> DatasetManifest:
    """Write a styled synthetic dataset (arrays plus manifest) to disk.

    Side information is constant within a volume; geometry varies per
    slice. Idempotent for a fixed seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "arrays").mkdir(parents=True, exist_ok=True)
    volumes = []
    for vi in range(n_volumes):
        rec = random_side_info(schema, substream_rng(seed, "volume-style", vi))
        slices = []
        for si in range(slices_per_volume):
            img, _ = synth_phantom(
                rec, style, schema, size=size, seed=substream_seed(seed, "slice", vi, si)
            )
            rel = f"arrays/vol{vi:03d}_s{si:03d}.f32"
            save_slice_array(out_dir / rel, img)
            slices.append(SliceEntry(rel, rec))
        volumes.append(VolumeEntry(f"vol{vi:03d}", tuple(slices)))
    manifest = DatasetManifest(
        schema=schema, volumes=tuple(volumes), root=out_dir, config_hash=config_hash
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


@dataclass
class SliceDataset:
    """Preprocessed slices held in memory, batch-construction ready."""

    schema: SideInfoSchema
    images: list[np.ndarray]
    records: list[SideInfoRecord]
    keys: list[str]

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, size: int) -> "SliceDataset":
        images, records, keys = [], [], []
        for vol in manifest.volumes:
            for si, entry in enumerate(vol.slices):
                raw = load_slice_array(manifest.slice_path(entry))
                try:
                    img = preprocess(raw, size=size)
                except DegenerateSliceError as exc:
                    logger.warning(
                        "skipping slice %s of volume %s: %s", si, vol.volume_id, exc
                    )
                    continue
                images.append(img)
                records.append(entry.record)
                keys.append(f"{vol.volume_id}/s{si:03d}")
        return cls(schema=manifest.schema, images=images, records=records, keys=keys)


@dataclass(frozen=True)
class MaskParams:
    accel: float = 4.0
    center_fraction: float = 0.08
    std_factor: float = 6.0

    def __post_init__(self):
        if self.accel < 1:
            raise ConfigError(f"acceleration must be >= 1, got {self.accel}")


def build_batches(
    dataset: SliceDataset,
    stats: ContinuousStats,
    mask_params: MaskParams,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    shuffle: bool = True,
    fixed_masks: bool = False,
    dtype: torch.dtype = torch.float32,
) -> Iterator[ReconBatch]:
    """Yield batches of undersampled slices with aligned side information.

    One fresh mask per slice per epoch; with ``fixed_masks`` the mask
    depends only on the slice index (stable test-split metrics).
    Content is fully determined by (dataset, seed, epoch), independent
    of worker scheduling.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        order = substream_rng(seed, "batch-order", epoch).permutation(n)
    cdtype = torch.complex64 if dtype == torch.float32 else torch.complex128
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        zf, ks, masks, targets, recs, keys = [], [], [], [], [], []
        for i in idx:
            img = dataset.images[i]
            w = img.shape[-1]
            mask_seed = (
                substream_seed(seed, "mask", int(i))
                if fixed_masks
                else substream_seed(seed, "mask", epoch, int(i))
            )
            mask = gen_gaussian_mask(
                w,
                mask_params.accel,
                mask_params.center_fraction,
                seed=mask_seed,
                std_factor=mask_params.std_factor,
            )
            y = undersample(fft2c(img), mask)
            zf.append(zero_filled_recon(y))
            ks.append(y)
            masks.append(mask.columns)
            targets.append(img)
            recs.append(dataset.records[i])
            keys.append(dataset.keys[i])
        cat_ids = torch.tensor(
            [list(r.categorical_ids) for r in recs], dtype=torch.int64
        )
        cont_z = torch.tensor(
            np.stack([normalize_continuous(r, stats) for r in recs]), dtype=dtype
        )
        cont_masked = torch.tensor([r.continuous_masked for r in recs], dtype=torch.bool)
        yield ReconBatch(
            zero_filled=torch.tensor(np.stack(zf), dtype=dtype).unsqueeze(1),
            kspace=torch.tensor(np.stack(ks), dtype=cdtype),
            mask_cols=torch.tensor(np.stack(masks), dtype=torch.bool),
            cat_ids=cat_ids,
            cont_z=cont_z,
            cont_masked=cont_masked,
            target=torch.tensor(np.stack(targets), dtype=dtype).unsqueeze(1),
            records=tuple(recs),
            keys=tuple(keys),
        )
