"""Volume and en-face file formats, preprocessing, and the synthetic
paired-cohort generator.

File layouts (little-endian):
  volume  -- magic ``VOL1``, uint32 Z, H, W, then Z*H*W float32 voxels
  en-face -- magic ``ENF1``, uint32 H, W, then H*W float32 pixels
Each file has a UTF-8 JSON sidecar at ``<path>.json`` holding patient id,
laterality, modality, and per-axis pixel spacing in mm.

Volumes are (Z, H, W): slice index (slow scan), depth, width. All stored
intensities live in [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, FormatError, UsageError

VOLUME_MAGIC = b"VOL1"
ENFACE_MAGIC = b"ENF1"


@dataclass
class Volume:
    voxels: np.ndarray
    patient_id: str = ""
    laterality: str = "OD"
    modality: str = "OCT"
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise UsageError(f"volume must be (Z, H, W), got {self.voxels.shape}")
        if self.laterality not in ("OD", "OS"):
            raise UsageError(f"laterality must be OD or OS, got {self.laterality!r}")

    @property
    def extents(self):
        return self.voxels.shape


@dataclass
class EnFaceImage:
    pixels: np.ndarray
    patient_id: str = ""
    laterality: str = "OD"
    modality: str = "IR"
    spacing_mm: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise UsageError(f"en-face image must be (H, W), got {self.pixels.shape}")
        if self.laterality not in ("OD", "OS"):
            raise UsageError(f"laterality must be OD or OS, got {self.laterality!r}")


# -- resampling -----------------------------------------------------------------


def _resample_axis(arr, axis, new_n):
    old_n = arr.shape[axis]
    if new_n == old_n:
        return arr
    moved = np.moveaxis(arr, axis, -1)
    if new_n == 1:
        out = moved[..., :1]
    elif old_n == 1:
        out = np.repeat(moved, new_n, axis=-1)
    else:
        # Align-corners: target index i samples source coordinate
        # i * (old_n - 1) / (new_n - 1), interpolated linearly.
        pos = np.arange(new_n, dtype=np.float64) * (old_n - 1) / (new_n - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), old_n - 2)
        frac = pos - lo
        out = moved[..., lo] * (1.0 - frac) + moved[..., lo + 1] * frac
    return np.moveaxis(out, -1, axis)


def resample_array(arr, target):
    """Separable align-corners linear resampling for 1-3D arrays."""
    arr = np.asarray(arr, dtype=np.float64)
    target = tuple(int(t) for t in (target if np.iterable(target) else [target]))
    if len(target) != arr.ndim:
        raise UsageError(f"target rank {len(target)} != array rank {arr.ndim}")
    if any(t < 1 for t in target):
        raise UsageError("target extents must be positive")
    out = arr
    for axis, new_n in enumerate(target):
        out = _resample_axis(out, axis, new_n)
    return np.ascontiguousarray(out)


def resample_volume(volume: Volume, target) -> Volume:
    """Trilinear align-corners resample; identity when extents match."""
    target = tuple(int(t) for t in target)
    if target == tuple(volume.extents):
        return replace(
            volume,
            voxels=volume.voxels.copy(),
            history=volume.history + [f"resample:{target}"],
        )
    resampled = resample_array(volume.voxels.astype(np.float64), target).astype(np.float32)
    spacing = tuple(
        s * (old / new)
        for s, old, new in zip(volume.spacing_mm, volume.extents, target)
    )
    return replace(
        volume,
        voxels=resampled,
        spacing_mm=spacing,
        history=volume.history + [f"resample:{target}"],
    )


# -- intensity clipping ------------------------------------------------------------


def quantile_sorted(values, q):
    """Order-statistics quantile with linear interpolation."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if not 0.0 <= q <= 1.0:
        raise UsageError(f"quantile must be in [0, 1], got {q}")
    pos = q * (values.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, values.size - 1)
    frac = pos - lo
    return float(values[lo] * (1.0 - frac) + values[hi] * frac)


def clip_intensities(volume: Volume, lo_q=1e-4, hi_q=0.9999) -> Volume:
    """Replace values outside the [lo_q, hi_q] quantile band by the band
    edges (quantiles recomputed from the data each call)."""
    if not 0.0 <= lo_q < hi_q <= 1.0:
        raise UsageError(f"need 0 <= lo_q < hi_q <= 1, got ({lo_q}, {hi_q})")
    lo = quantile_sorted(volume.voxels, lo_q)
    hi = quantile_sorted(volume.voxels, hi_q)
    clipped = np.clip(volume.voxels.astype(np.float64), lo, hi).astype(np.float32)
    return replace(
        volume,
        voxels=clipped,
        history=volume.history + [f"clip:{lo_q},{hi_q}"],
    )


# -- Otsu thresholding ----------------------------------------------------------------


def otsu_threshold(values=None, histogram=None, bin_centers=None):
    """Threshold maximizing between-class variance.

    Pass raw ``values`` (threshold picked among the unique values) or a
    ``histogram`` of counts with optional ``bin_centers``. The returned
    threshold t splits classes as (<= t) vs (> t); ties resolve to the
    lowest maximizing threshold.
    """
    if (values is None) == (histogram is None):
        raise UsageError("pass exactly one of values or histogram")
    if values is not None:
        flat = np.asarray(values, dtype=np.float64).ravel()
        centers, counts = np.unique(flat, return_counts=True)
    else:
        counts = np.asarray(histogram, dtype=np.float64)
        if counts.ndim != 1 or counts.size < 2:
            raise UsageError("histogram must be a flat array of >= 2 bins")
        if bin_centers is None:
            centers = np.arange(counts.size, dtype=np.float64)
        else:
            centers = np.asarray(bin_centers, dtype=np.float64)
            if centers.shape != counts.shape:
                raise UsageError("bin_centers must match histogram length")
        keep_leading = counts > 0
        if keep_leading.sum() >= 1:
            first = int(np.argmax(keep_leading))
            last = counts.size - int(np.argmax(keep_leading[::-1]))
            centers = centers[first:last]
            counts = counts[first:last]
    if centers.size < 2:
        raise DegenerateInputError("need at least two distinct values for Otsu")

    total = counts.sum()
    w0 = np.cumsum(counts)[:-1] / total
    w1 = 1.0 - w0
    cum_mean = np.cumsum(counts * centers)[:-1] / total
    grand_mean = (counts * centers).sum() / total
    mu0 = cum_mean / w0
    mu1 = (grand_mean - cum_mean) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    best = int(np.argmax(between))  # argmax picks the first (lowest) maximizer
    return float(centers[best])


def otsu_crop_depth(volume: Volume) -> Volume:
    """Keep the depth rows (axis 1) containing foreground voxels, where
    foreground means intensity above the volume-wide Otsu threshold."""
    threshold = otsu_threshold(values=volume.voxels)
    profile = (volume.voxels > threshold).any(axis=(0, 2))
    rows = np.flatnonzero(profile)
    if rows.size == 0:
        raise DegenerateInputError("no foreground rows above the Otsu threshold")
    lo, hi = int(rows[0]), int(rows[-1]) + 1
    return replace(
        volume,
        voxels=volume.voxels[:, lo:hi, :].copy(),
        history=volume.history + [f"otsu_crop:{lo}:{hi}"],
    )


def minmax_normalize(volume: Volume) -> Volume:
    """Affine map of the voxel range onto [0, 1]; constant volumes map to 0."""
    v = volume.voxels.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        v = (v - lo) / (hi - lo)
    else:
        v = np.zeros_like(v)
    return replace(
        volume,
        voxels=v.astype(np.float32),
        history=volume.history + ["normalize"],
    )


def flip_volume(volume: Volume, axis) -> Volume:
    name = {0: "flip_z", 2: "flip_w"}[axis]
    return replace(
        volume,
        voxels=np.flip(volume.voxels, axis=axis).copy(),
        history=volume.history + [name],
    )


def preprocess(volume: Volume, steps, seed=0) -> Volume:
    """Apply an ordered list of named steps; flips are coin-flipped with a
    seeded rng unless a probability of 1 forces them. Each applied step is
    recorded in the volume's history. An empty list is the identity."""
    rng = np.random.default_rng(seed)
    out = replace(volume, voxels=volume.voxels.copy(), history=list(volume.history))
    for step in steps:
        name, args = (step, {}) if isinstance(step, str) else (step[0], dict(step[1]))
        if name == "clip":
            out = clip_intensities(out, args.get("lo_q", 1e-4), args.get("hi_q", 0.9999))
        elif name == "otsu_crop":
            out = otsu_crop_depth(out)
        elif name == "resample":
            out = resample_volume(out, args["target"])
        elif name == "normalize":
            out = minmax_normalize(out)
        elif name in ("flip_w", "flip_z"):
            p = args.get("p", 0.5)
            if rng.random() < p:
                out = flip_volume(out, 2 if name == "flip_w" else 0)
        else:
            raise UsageError(f"unknown preprocessing step {name!r}")
    return out


# -- synthetic cohort ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCohortSpec:
    """Deterministic generator settings; same spec + seed -> identical cohort."""

    seed: int = 0
    count: int = 16
    volume_extents: tuple = (6, 32, 32)
    enface_extents: tuple = (32, 32)
    layer_thickness: float = 2.0
    lesion_radius: float = 3.5
    lesion_amplitude: float = 0.9
    mirror_os: bool = True
    positive_fraction: float = 0.5
    noise: float = 0.01
    target_noise: float = 0.05
    spacing_mm: tuple = (0.25, 0.004, 0.011)

    def __post_init__(self):
        if self.count < 1:
            raise UsageError("cohort needs at least one item")


@dataclass
class CohortItem:
    volume: Volume
    ir: EnFaceImage
    faf: EnFaceImage
    label: int
    growth_rate: float
    lesion_area: float


def _smooth_layers(rng, extents, thickness):
    """Depth-banded background: bright horizontal layers, gently modulated
    along the slow-scan and width axes. Values stay at or below ~0.72."""
    Z, H, W = extents
    h = np.arange(H, dtype=np.float64)
    profile = np.zeros(H)
    for center_frac, amp in ((0.35, 0.55), (0.55, 0.4), (0.75, 0.3)):
        center = H * (center_frac + 0.05 * (rng.random() - 0.5))
        width = thickness * (0.8 + 0.4 * rng.random())
        profile += amp * np.exp(-0.5 * ((h - center) / width) ** 2)
    profile = 0.62 * profile / max(profile.max(), 1e-9)
    z = np.arange(Z, dtype=np.float64) / max(Z - 1, 1)
    w = np.arange(W, dtype=np.float64) / max(W - 1, 1)
    ripple = 1.0 + 0.08 * np.sin(2 * np.pi * (z[:, None] + rng.random()))[..., None] * np.sin(
        2 * np.pi * (w[None, :] + rng.random())
    )[None, ...]
    return 0.06 + profile[None, :, None] * ripple


def _lesion_bump(rng, extents, radius, amplitude):
    """Localized bright ellipsoid centered mid-depth; returns the additive
    bump and its (Z, W) footprint mask."""
    Z, H, W = extents
    zc = Z * (0.35 + 0.3 * rng.random())
    hc = H * (0.3 + 0.3 * rng.random())
    wc = W * (0.3 + 0.4 * rng.random())
    rz = max(1.0, radius * Z / max(W, 1))
    zi = np.arange(Z)[:, None, None]
    hi = np.arange(H)[None, :, None]
    wi = np.arange(W)[None, None, :]
    dist2 = ((zi - zc) / rz) ** 2 + ((hi - hc) / radius) ** 2 + ((wi - wc) / radius) ** 2
    bump = amplitude * np.exp(-0.5 * dist2)
    footprint = (bump > 0.05 * amplitude).any(axis=1)
    return bump, footprint


def _vessel_mask(rng, shape):
    """Dark wavy curves imitating vessels on the en-face projection."""
    Z, W = shape
    mask = np.zeros(shape)
    for _ in range(2 + int(rng.integers(3))):
        w0 = W * (0.15 + 0.7 * rng.random())
        amp = W * 0.08 * (0.5 + rng.random())
        freq = 1.0 + 2.0 * rng.random()
        phase = 2 * np.pi * rng.random()
        for z in range(Z):
            col = int(round(w0 + amp * np.sin(freq * 2 * np.pi * z / max(Z, 1) + phase)))
            if 0 <= col < W:
                mask[z, max(0, col - 1) : min(W, col + 2)] = 1.0
    return mask


def synth_item(spec: SyntheticCohortSpec, index, laterality=None, label=None) -> CohortItem:
    """One deterministic cohort item. The latent draw depends only on
    (seed, index): forcing the opposite laterality mirrors the same
    content horizontally."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    if laterality is None:
        laterality = "OS" if (spec.mirror_os and index % 2 == 1) else "OD"
    if label is None:
        label = int(rng.random() < spec.positive_fraction)
    else:
        rng.random()  # keep the latent stream aligned with the default path
        label = int(label)

    volume = _smooth_layers(rng, spec.volume_extents, spec.layer_thickness)
    Z, H, W = spec.volume_extents
    if label:
        bump, footprint = _lesion_bump(rng, spec.volume_extents, spec.lesion_radius, spec.lesion_amplitude)
        volume = volume + bump
        area_px = float(footprint.sum())
    else:
        footprint = np.zeros((Z, W), dtype=bool)
        area_px = 0.0
    volume = volume + spec.noise * rng.standard_normal(volume.shape)
    volume = np.clip(volume, 0.0, 1.0)

    projection = volume.mean(axis=1)
    ir = projection / max(projection.max(), 1e-9)
    ir = ir - 0.3 * _vessel_mask(rng, projection.shape)
    ir = resample_array(ir, spec.enface_extents)
    ir = np.clip(ir + spec.noise * rng.standard_normal(ir.shape), 0.0, 1.0)

    gz = np.arange(Z)[:, None] / max(Z - 1, 1)
    gw = np.arange(W)[None, :] / max(W - 1, 1)
    faf = 0.55 + 0.2 * np.cos(np.pi * gz) * np.cos(np.pi * gw) + 0.0 * gw
    faf = faf - 0.4 * footprint.astype(np.float64)
    faf = resample_array(faf, spec.enface_extents)
    faf = np.clip(faf + spec.noise * rng.standard_normal(faf.shape), 0.0, 1.0)

    if laterality == "OS":
        volume = volume[:, :, ::-1].copy()
        ir = ir[:, ::-1].copy()
        faf = faf[:, ::-1].copy()

    pixel_area = spec.spacing_mm[0] * spec.spacing_mm[2]
    lesion_area = area_px * pixel_area
    growth = min(8.0, 12.0 * lesion_area)
    growth = float(np.clip(growth + spec.target_noise * rng.standard_normal(), 0.0, 8.0))

    patient = f"synth-{spec.seed:04d}-{index:04d}"
    return CohortItem(
        volume=Volume(
            voxels=volume.astype(np.float32),
            patient_id=patient,
            laterality=laterality,
            modality="OCT",
            spacing_mm=spec.spacing_mm,
        ),
        ir=EnFaceImage(
            pixels=ir.astype(np.float32),
            patient_id=patient,
            laterality=laterality,
            modality="IR",
            spacing_mm=(spec.spacing_mm[0], spec.spacing_mm[2]),
        ),
        faf=EnFaceImage(
            pixels=faf.astype(np.float32),
            patient_id=patient,
            laterality=laterality,
            modality="FAF",
            spacing_mm=(spec.spacing_mm[0], spec.spacing_mm[2]),
        ),
        label=label,
        growth_rate=growth,
        lesion_area=float(lesion_area),
    )


def synth_cohort(spec: SyntheticCohortSpec):
    """Full cohort, generated per item index (parallelizable, per-item
    child seeds)."""
    return [synth_item(spec, i) for i in range(spec.count)]


def recover_label_by_hand(volume_voxels, cut=0.85):
    """The planted label is recoverable by thresholding the brightest
    voxel: lesions saturate well above any background layer."""
    return int(np.asarray(volume_voxels).max() > cut)


# -- binary io ----------------------------------------------------------------------------


def _metadata_path(path):
    return f"{path}.json"


def _write_metadata(path, patient_id, laterality, modality, spacing_mm):
    doc = {
        "laterality": laterality,
        "modality": modality,
        "patient_id": patient_id,
        "spacing_mm": list(spacing_mm),
    }
    with open(_metadata_path(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=0)
        fh.write("\n")


def _read_metadata(path):
    try:
        with open(_metadata_path(path), "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {}
    except json.JSONDecodeError as err:
        raise FormatError(f"bad metadata sidecar for {path}: {err}") from err


def write_volume(path, volume: Volume):
    payload = volume.voxels.astype("<f4").tobytes()
    z, h, w = volume.extents
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<III", z, h, w))
        fh.write(payload)
    _write_metadata(path, volume.patient_id, volume.laterality, volume.modality, volume.spacing_mm)
    return path


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VOLUME_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {VOLUME_MAGIC!r}", offset=0)
    if len(blob) < 16:
        raise FormatError("header truncated", offset=len(blob))
    z, h, w = struct.unpack("<III", blob[4:16])
    expected = 16 + z * h * w * 4
    if len(blob) != expected:
        raise FormatError(
            f"payload length {len(blob) - 16} does not match extents "
            f"({z}, {h}, {w})",
            offset=min(len(blob), expected),
        )
    voxels = np.frombuffer(blob, dtype="<f4", offset=16).reshape(z, h, w)
    meta = _read_metadata(path)
    return Volume(
        voxels=voxels.copy(),
        patient_id=meta.get("patient_id", ""),
        laterality=meta.get("laterality", "OD"),
        modality=meta.get("modality", "OCT"),
        spacing_mm=tuple(meta.get("spacing_mm", (1.0, 1.0, 1.0))),
    )


def write_enface(path, image: EnFaceImage):
    payload = image.pixels.astype("<f4").tobytes()
    h, w = image.pixels.shape
    with open(path, "wb") as fh:
        fh.write(ENFACE_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(payload)
    _write_metadata(path, image.patient_id, image.laterality, image.modality, image.spacing_mm)
    return path


def read_enface(path) -> EnFaceImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != ENFACE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {ENFACE_MAGIC!r}", offset=0)
    if len(blob) < 12:
        raise FormatError("header truncated", offset=len(blob))
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + h * w * 4
    if len(blob) != expected:
        raise FormatError(
            f"payload length {len(blob) - 12} does not match extents ({h}, {w})",
            offset=min(len(blob), expected),
        )
    pixels = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w)
    meta = _read_metadata(path)
    return EnFaceImage(
        pixels=pixels.copy(),
        patient_id=meta.get("patient_id", ""),
        laterality=meta.get("laterality", "OD"),
        modality=meta.get("modality", "IR"),
        spacing_mm=tuple(meta.get("spacing_mm", (1.0, 1.0))),
    )
