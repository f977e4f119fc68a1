"""Synthetic phantom volumes, the portable slice-dataset format, and
deterministic shuffling.

High-field (HF) phantoms are stacks of soft anti-aliased ellipses whose
geometry drifts as a per-volume random walk across slices, so adjacent
slices correlate and distant slices do not. Low-field (LF) counterparts are
produced by blur -> downsample -> upsample -> additive noise -> clamp.
Every operation here is a pure function of its arguments including seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .errors import (
    ConfigurationError,
    DatasetChecksumError,
    DatasetEntryError,
    DatasetVersionError,
)
from .seeding import derive_rng, stable_int

RANGE_RAW = "raw"
RANGE_UNIT = "unit"
RANGE_SIGNED = "signed"
INTENSITY_RANGES = (RANGE_RAW, RANGE_UNIT, RANGE_SIGNED)

CONTRAST_TAGS = ("T1", "T2")
FIELD_LF = "LF"
FIELD_HF = "HF"

FORMAT_VERSION = 1
SLICE_DTYPE = "f32le"


@dataclass(frozen=True)
class Slice:
    """One 2D image with its declared intensity range and position metadata."""

    pixels: np.ndarray
    intensity_range: str
    contrast_tag: str
    volume_id: str
    slice_index: int


def make_slice(pixels, intensity_range, contrast_tag, volume_id, slice_index) -> Slice:
    """Build a Slice, coercing pixels to C-contiguous float32 and checking tags."""
    arr = np.ascontiguousarray(pixels, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"slice pixels must be 2D, got shape {arr.shape}")
    if intensity_range not in INTENSITY_RANGES:
        raise ValueError(f"unknown intensity_range {intensity_range!r}")
    if contrast_tag not in CONTRAST_TAGS:
        raise ValueError(f"unknown contrast_tag {contrast_tag!r}")
    if slice_index < 0:
        raise ValueError("slice_index must be >= 0")
    return Slice(arr, intensity_range, contrast_tag, volume_id, int(slice_index))


def validate_slice_range(s: Slice) -> None:
    """Check that pixel values honour the declared range tag."""
    if s.intensity_range == RANGE_UNIT:
        if s.pixels.min() < 0.0 or s.pixels.max() > 1.0:
            raise ValueError(
                f"slice {s.volume_id}/{s.slice_index} tagged unit but has values "
                f"outside [0, 1]"
            )
    elif s.intensity_range == RANGE_SIGNED:
        if s.pixels.min() < -1.0 or s.pixels.max() > 1.0:
            raise ValueError(
                f"slice {s.volume_id}/{s.slice_index} tagged signed but has values "
                f"outside [-1, 1]"
            )


@dataclass(frozen=True)
class Volume:
    """Ordered stack of slices from one (synthetic) acquisition."""

    slices: tuple
    field_strength_tag: str

    def __post_init__(self):
        if self.field_strength_tag not in (FIELD_LF, FIELD_HF):
            raise ValueError(f"unknown field_strength_tag {self.field_strength_tag!r}")
        if not self.slices:
            raise ValueError("volume must contain at least one slice")
        first = self.slices[0]
        for i, s in enumerate(self.slices):
            if s.slice_index != i:
                raise ValueError(
                    f"slice_index values must be consecutive from 0, got {s.slice_index} at {i}"
                )
            if s.pixels.shape != first.pixels.shape:
                raise ValueError("all slices in a volume must share dimensions")
            if s.volume_id != first.volume_id:
                raise ValueError("all slices in a volume must share volume_id")

    @property
    def volume_id(self) -> str:
        return self.slices[0].volume_id


@dataclass(frozen=True)
class PhantomConfig:
    """Knobs for the synthetic paired HF/LF phantom generator."""

    image_size: int = 64
    num_volumes: int = 20
    slices_per_volume: int = 16
    num_ellipses: tuple = (2, 5)
    lesion_probability: float = 0.3
    lf_blur_sigma: float = 1.8
    lf_noise_sigma: float = 0.25
    lf_downsample_factor: int = 2
    seed: int = 0
    block_size: int = 8
    contrast: str = "T1"

    def validate(self) -> None:
        if self.image_size <= 0:
            raise ConfigurationError("phantom.image_size must be positive")
        if self.block_size <= 0:
            raise ConfigurationError("phantom.block_size must be positive")
        if self.image_size % self.block_size != 0:
            raise ConfigurationError(
                f"phantom.image_size={self.image_size} must be divisible by "
                f"block_size={self.block_size}"
            )
        if self.lf_downsample_factor < 1:
            raise ConfigurationError("phantom.lf_downsample_factor must be >= 1")
        if self.image_size % self.lf_downsample_factor != 0:
            raise ConfigurationError(
                f"phantom.image_size={self.image_size} must be divisible by "
                f"lf_downsample_factor={self.lf_downsample_factor}"
            )
        if self.num_volumes < 1:
            raise ConfigurationError("phantom.num_volumes must be >= 1")
        if self.slices_per_volume < 1:
            raise ConfigurationError("phantom.slices_per_volume must be >= 1")
        lo, hi = normalize_ellipse_range(self.num_ellipses)
        if lo < 0 or hi < lo:
            raise ConfigurationError(
                f"phantom.num_ellipses range {self.num_ellipses!r} is invalid"
            )
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ConfigurationError("phantom.lesion_probability must be in [0, 1]")
        if self.lf_blur_sigma <= 0:
            raise ConfigurationError("phantom.lf_blur_sigma must be > 0")
        if self.lf_noise_sigma < 0:
            raise ConfigurationError("phantom.lf_noise_sigma must be >= 0")
        if self.contrast not in CONTRAST_TAGS:
            raise ConfigurationError(f"phantom.contrast must be one of {CONTRAST_TAGS}")


def normalize_ellipse_range(value) -> tuple:
    """Accept a scalar count or a (min, max) pair; return the pair."""
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    lo, hi = value
    return int(lo), int(hi)


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


def _render_scene(size, centers, axes, angles, intensities, softness):
    """Sum of soft ellipse indicators on a size x size grid, clipped to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size), dtype=np.float64)
    for (cy, cx), (ay, ax_), ang, inten, soft in zip(
        centers, axes, angles, intensities, softness
    ):
        dy = yy - cy
        dx = xx - cx
        u = dx * math.cos(ang) + dy * math.sin(ang)
        v = -dx * math.sin(ang) + dy * math.cos(ang)
        r = np.sqrt((u / ax_) ** 2 + (v / ay) ** 2)
        # approximate signed distance in pixels; expit keeps the edge smooth
        d = (r - 1.0) * min(ay, ax_)
        img += inten * expit(-d / soft)
    return np.clip(img, 0.0, 1.0)


def generate_phantom_volume(cfg: PhantomConfig, volume_seed: int) -> Volume:
    """Generate one high-field phantom volume, deterministic in (cfg.seed, volume_seed)."""
    cfg.validate()
    rng = derive_rng(cfg.seed, "phantom", volume_seed)
    size = cfg.image_size
    lo, hi = normalize_ellipse_range(cfg.num_ellipses)
    n_ell = int(rng.integers(lo, hi + 1))

    centers = rng.uniform(0.22 * size, 0.78 * size, size=(n_ell, 2))
    axes = rng.uniform(0.05 * size, 0.16 * size, size=(n_ell, 2))
    angles = rng.uniform(0.0, math.pi, size=n_ell)
    intensities = rng.uniform(0.35, 0.9, size=n_ell)
    softness = rng.uniform(0.8, 2.0, size=n_ell)

    has_lesion = n_ell > 0 and rng.uniform() < cfg.lesion_probability
    if has_lesion:
        host = int(rng.integers(0, n_ell))
        lesion_center = centers[host] + rng.uniform(-0.05 * size, 0.05 * size, size=2)
        lesion_radius = rng.uniform(1.5, 3.0)
        lesion_intensity = rng.uniform(0.85, 1.0)

    volume_id = f"vol{volume_seed:04d}"
    slices = []
    for idx in range(cfg.slices_per_volume):
        if idx > 0:
            centers = centers + rng.normal(0.0, 0.01 * size, size=centers.shape)
            axes = np.clip(
                axes + rng.normal(0.0, 0.005 * size, size=axes.shape),
                2.0,
                0.45 * size,
            )
            angles = angles + rng.normal(0.0, 0.03, size=angles.shape)
            intensities = np.clip(
                intensities + rng.normal(0.0, 0.015, size=intensities.shape), 0.2, 1.0
            )
            if has_lesion:
                lesion_center = lesion_center + rng.normal(0.0, 0.01 * size, size=2)
                lesion_radius = float(np.clip(lesion_radius + rng.normal(0.0, 0.08), 1.0, 4.0))

        all_centers = list(centers)
        all_axes = list(axes)
        all_angles = list(angles)
        all_intens = list(intensities)
        all_soft = list(softness)
        if has_lesion:
            all_centers.append(lesion_center)
            all_axes.append(np.array([lesion_radius, lesion_radius]))
            all_angles.append(0.0)
            all_intens.append(lesion_intensity)
            all_soft.append(0.7)

        img = _render_scene(size, all_centers, all_axes, all_angles, all_intens, all_soft)
        slices.append(
            make_slice(img, RANGE_UNIT, cfg.contrast, volume_id, idx)
        )
    return Volume(tuple(slices), FIELD_HF)


def degrade_to_lowfield(hf: Volume, cfg: PhantomConfig) -> Volume:
    """Simulate a low-field acquisition of an HF volume.

    Pipeline per slice: gaussian blur, factor-F mean pooling, nearest
    upsampling back to size, additive gaussian noise, clamp to [0, 1].
    The noise RNG is seeded from (cfg.seed, volume_id, slice_index) and draws
    standard normals before scaling, so sweeping lf_noise_sigma keeps the
    same underlying noise field.
    """
    size = hf.slices[0].pixels.shape[0]
    f = cfg.lf_downsample_factor
    if f < 1 or size % f != 0:
        raise ConfigurationError(
            f"lf_downsample_factor={f} does not divide image size {size}"
        )
    out = []
    for s in hf.slices:
        clean = lowfield_pipeline_noise_free(s.pixels, cfg)
        rng = derive_rng(cfg.seed, "lfnoise", s.volume_id, s.slice_index)
        noise = rng.standard_normal(size=clean.shape)
        noisy = np.clip(clean + cfg.lf_noise_sigma * noise, 0.0, 1.0)
        out.append(
            make_slice(noisy, RANGE_UNIT, s.contrast_tag, s.volume_id, s.slice_index)
        )
    return Volume(tuple(out), FIELD_LF)


def lowfield_pipeline_noise_free(pixels: np.ndarray, cfg: PhantomConfig) -> np.ndarray:
    """The deterministic blur/downsample/upsample part of the LF degradation."""
    f = cfg.lf_downsample_factor
    h, w = pixels.shape
    blurred = ndimage.gaussian_filter(pixels.astype(np.float64), cfg.lf_blur_sigma, mode="reflect")
    if f > 1:
        pooled = blurred.reshape(h // f, f, w // f, f).mean(axis=(1, 3))
        blurred = np.repeat(np.repeat(pooled, f, axis=0), f, axis=1)
    return blurred


# ---------------------------------------------------------------------------
# Normalization and range conversion
# ---------------------------------------------------------------------------

_RANGE_BOUNDS = {RANGE_UNIT: (0.0, 1.0), RANGE_SIGNED: (-1.0, 1.0)}


def normalize_slice(s: Slice, target: str) -> Slice:
    """Affine min-max map of the slice into the target range.

    Constant slices map to the range midpoint. Target "raw" returns the
    pixels unchanged with the tag updated (nothing to rescale against).
    """
    if target not in INTENSITY_RANGES:
        raise ValueError(f"unknown target range {target!r}")
    if target == RANGE_RAW:
        return replace(s, pixels=s.pixels.copy(), intensity_range=RANGE_RAW)
    lo, hi = _RANGE_BOUNDS[target]
    px = s.pixels
    mn = float(px.min())
    mx = float(px.max())
    if mn == mx:
        out = np.full_like(px, (lo + hi) / 2.0)
    else:
        out = (px - mn) / (mx - mn) * (hi - lo) + lo
    return replace(s, pixels=out.astype(np.float32), intensity_range=target)


def convert_range(s: Slice, target: str) -> Slice:
    """Fixed affine conversion between the declared unit and signed ranges.

    Unlike normalize_slice this does not look at the data, so paired slices
    stay comparable after conversion.
    """
    if target not in (RANGE_UNIT, RANGE_SIGNED):
        raise ValueError(f"convert_range target must be unit or signed, got {target!r}")
    if s.intensity_range == RANGE_RAW:
        raise ConfigurationError(
            "cannot convert a raw-tagged slice; normalize it first"
        )
    if s.intensity_range == target:
        return replace(s, pixels=s.pixels.copy())
    if target == RANGE_SIGNED:
        out = s.pixels * np.float32(2.0) - np.float32(1.0)
    else:
        out = (s.pixels + np.float32(1.0)) * np.float32(0.5)
    return replace(s, pixels=out.astype(np.float32), intensity_range=target)


def unit_to_signed_array(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) * np.float32(2.0)) - np.float32(1.0)


def signed_to_unit_array(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) + np.float32(1.0)) * np.float32(0.5)


# ---------------------------------------------------------------------------
# Dataset container and on-disk format
# ---------------------------------------------------------------------------


@dataclass
class SliceDataset:
    """In-memory dataset plus the metadata that goes into manifest.json."""

    slices: list
    field_strength: str
    normalization: str
    contrast: str
    seed: int
    provenance: dict | None = None

    def __post_init__(self):
        if not self.slices:
            raise ValueError("dataset must contain at least one slice")
        h, w = self.slices[0].pixels.shape
        for s in self.slices:
            if s.pixels.shape != (h, w):
                raise ValueError("all dataset slices must share dimensions")

    def __len__(self) -> int:
        return len(self.slices)

    @property
    def height(self) -> int:
        return self.slices[0].pixels.shape[0]

    @property
    def width(self) -> int:
        return self.slices[0].pixels.shape[1]

    def keys(self) -> list:
        return [(s.volume_id, s.slice_index) for s in self.slices]

    def index_of(self, volume_id: str, slice_index: int) -> int:
        for i, s in enumerate(self.slices):
            if s.volume_id == volume_id and s.slice_index == slice_index:
                return i
        raise KeyError(f"no slice ({volume_id}, {slice_index}) in dataset")

    def pixel_stack(self) -> np.ndarray:
        """All pixels as one [N, H, W] float32 array in dataset normalization."""
        return np.stack([s.pixels for s in self.slices]).astype(np.float32)

    def signed_stack(self) -> np.ndarray:
        """Pixels as [N, H, W] float32 in the signed range (nets consume this)."""
        if self.normalization == RANGE_SIGNED:
            return self.pixel_stack()
        if self.normalization == RANGE_UNIT:
            return unit_to_signed_array(self.pixel_stack())
        raise ConfigurationError(
            "dataset has raw normalization; normalize before use"
        )


def dataset_from_volumes(volumes, seed: int, provenance: dict | None = None) -> SliceDataset:
    """Flatten volumes (all sharing field strength / contrast) into a dataset."""
    slices = [s for v in volumes for s in v.slices]
    first = volumes[0]
    normalization = slices[0].intensity_range
    for s in slices:
        if s.intensity_range != normalization:
            raise ValueError("volumes mix intensity ranges")
    return SliceDataset(
        slices=slices,
        field_strength=first.field_strength_tag,
        normalization=normalization,
        contrast=slices[0].contrast_tag,
        seed=seed,
        provenance=provenance,
    )


def build_phantom_pair(cfg: PhantomConfig):
    """Generate the paired HF and LF datasets plus the evaluation pairing list."""
    cfg.validate()
    hf_volumes = [generate_phantom_volume(cfg, v) for v in range(cfg.num_volumes)]
    lf_volumes = [degrade_to_lowfield(v, cfg) for v in hf_volumes]
    hf_ds = dataset_from_volumes(hf_volumes, seed=cfg.seed)
    lf_ds = dataset_from_volumes(lf_volumes, seed=cfg.seed)
    pairing = [
        {"lf": {"volume_id": vid, "slice_index": idx},
         "hf": {"volume_id": vid, "slice_index": idx}}
        for vid, idx in lf_ds.keys()
    ]
    return hf_ds, lf_ds, pairing


def _slice_filename(volume_id: str, slice_index: int) -> str:
    return f"{volume_id}_{slice_index:04d}.f32"


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def dataset_entry_hash_list(manifest: dict) -> str:
    """Stable dataset-level hash: sha256 over the ordered entry checksums."""
    h = hashlib.sha256()
    for entry in manifest["entries"]:
        h.update(entry["sha256"].encode("ascii"))
    return h.hexdigest()


def save_dataset(ds: SliceDataset, directory) -> dict:
    """Write the dataset directory (manifest.json + raw f32le slice files).

    Files are written atomically (temp + rename); returns the manifest dict.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.slices:
        payload = np.ascontiguousarray(s.pixels, dtype="<f4").tobytes()
        fname = _slice_filename(s.volume_id, s.slice_index)
        _atomic_write_bytes(directory / fname, payload)
        entries.append(
            {
                "volume_id": s.volume_id,
                "slice_index": s.slice_index,
                "file": fname,
                "sha256": hashlib.sha256(payload).hexdigest(),
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "height": ds.height,
        "width": ds.width,
        "dtype": SLICE_DTYPE,
        "field_strength": ds.field_strength,
        "contrast": ds.contrast,
        "normalization": ds.normalization,
        "seed": ds.seed,
        "entries": entries,
    }
    if ds.provenance is not None:
        manifest["provenance"] = ds.provenance
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(directory / "manifest.json", text.encode("utf-8"))
    return manifest


def load_dataset(directory) -> SliceDataset:
    """Load and validate a dataset directory written by save_dataset."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetEntryError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported format_version {version!r} (expected {FORMAT_VERSION})"
        )
    if manifest.get("dtype") != SLICE_DTYPE:
        raise DatasetVersionError(f"unsupported dtype {manifest.get('dtype')!r}")
    h, w = int(manifest["height"]), int(manifest["width"])
    expected_bytes = h * w * 4
    slices = []
    for entry in manifest["entries"]:
        path = directory / entry["file"]
        if not path.exists():
            raise DatasetEntryError(f"missing slice file: {path}")
        payload = path.read_bytes()
        if len(payload) != expected_bytes:
            raise DatasetEntryError(
                f"slice file {path} has {len(payload)} bytes, expected "
                f"{expected_bytes} for entry ({entry['volume_id']}, {entry['slice_index']})"
            )
        digest = hashlib.sha256(payload).hexdigest()
        if digest != entry["sha256"]:
            raise DatasetChecksumError(
                f"checksum mismatch for entry ({entry['volume_id']}, "
                f"{entry['slice_index']}) at {path}"
            )
        arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)
        slices.append(
            make_slice(
                arr,
                manifest["normalization"],
                manifest["contrast"],
                entry["volume_id"],
                int(entry["slice_index"]),
            )
        )
    return SliceDataset(
        slices=slices,
        field_strength=manifest["field_strength"],
        normalization=manifest["normalization"],
        contrast=manifest["contrast"],
        seed=int(manifest["seed"]),
        provenance=manifest.get("provenance"),
    )


def save_pairing_manifest(path, pairing) -> None:
    text = json.dumps({"format_version": FORMAT_VERSION, "pairs": pairing},
                      sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def load_pairing_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DatasetEntryError(f"missing pairing manifest: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported pairing manifest version {doc.get('format_version')!r}"
        )
    return doc["pairs"]


# ---------------------------------------------------------------------------
# Shuffling and previews
# ---------------------------------------------------------------------------


def shuffle_with_permutation(slices, seed: int):
    """Permute a slice list deterministically; returns (shuffled, permutation).

    shuffled[i] == slices[permutation[i]]; permutation is a bijection on
    0..N-1.
    """
    if len(slices) == 0:
        raise ValueError("cannot shuffle an empty slice list")
    perm = derive_rng(seed, "shuffle").permutation(len(slices))
    return [slices[int(p)] for p in perm], [int(p) for p in perm]


def export_preview_png(s: Slice, path) -> None:
    """Write an 8-bit grayscale preview (lossy, never read back)."""
    from PIL import Image

    if s.intensity_range == RANGE_SIGNED:
        px = signed_to_unit_array(s.pixels)
    elif s.intensity_range == RANGE_UNIT:
        px = s.pixels
    else:
        mn, mx = float(s.pixels.min()), float(s.pixels.max())
        px = (s.pixels - mn) / (mx - mn) if mx > mn else np.zeros_like(s.pixels)
    quantized = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(Path(path), format="PNG")
