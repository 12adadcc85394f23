"""Simulation of motion-corrupted, noisy low-resolution slice stacks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DescriptorError, GeometryError
from .geometry import Grid, RigidTransform, Volume3D, resample
from .phantom import GA_RANGE, SequenceParams
from .psf import PSFSpec, blur, world_fwhm

ORIENTATIONS = ("axial", "coronal", "sagittal")

# (slice normal axis, in-plane u axis, in-plane v axis) in world coordinates
_FRAMES = {
    "axial": (2, 0, 1),
    "coronal": (1, 0, 2),
    "sagittal": (0, 1, 2),
}


def orientation_frame(orientation: str) -> np.ndarray:
    """Columns are the world unit vectors of (u, v, normal) for an orientation."""
    try:
        normal, u, v = _FRAMES[orientation]
    except KeyError:
        raise ValueError(f"unknown orientation {orientation!r}") from None
    eye = np.eye(3)
    return np.stack([eye[u], eye[v], eye[normal]], axis=1)


def _stream(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class MotionConfig:
    corrupted_fraction: float = 0.05
    translation_range: float = 1.0
    rotation_range: float = 2.0
    amplitude_label: str = "little"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise ValueError("corrupted_fraction must lie in [0, 1]")
        if self.translation_range < 0 or self.rotation_range < 0:
            raise ValueError("motion ranges must be non-negative")

    @classmethod
    def preset(cls, label: str, seed: int = 0) -> "MotionConfig":
        if label == "little":
            return cls(0.05, 1.0, 2.0, "little", seed)
        if label == "moderate":
            return cls(0.10, 2.0, 4.0, "moderate", seed)
        raise ValueError(f"unknown motion amplitude {label!r}")

    @classmethod
    def none(cls, seed: int = 0) -> "MotionConfig":
        return cls(0.0, 0.0, 0.0, "none", seed)


def sample_motion(cfg: MotionConfig, n_slices: int, rng: np.random.Generator | None = None):
    """Draw per-slice rigid transforms; each slice is corrupted independently.

    Returns ``(transforms, corrupted)``; uncorrupted slices get the identity.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be at least 1")
    if rng is None:
        rng = _stream(cfg.seed, 11)
    corrupted = rng.random(n_slices) < cfg.corrupted_fraction
    transforms = []
    for flag in corrupted:
        if not flag:
            transforms.append(RigidTransform.identity())
            continue
        rot = rng.uniform(-cfg.rotation_range, cfg.rotation_range, 3)
        tr = rng.uniform(-cfg.translation_range, cfg.translation_range, 3)
        transforms.append(RigidTransform(tuple(rot), tuple(tr)))
    # a zero-range draw yields an identity even on a flagged slice
    corrupted = np.array([not t.is_identity for t in transforms], dtype=bool)
    return transforms, corrupted


@dataclass(frozen=True)
class SeriesGeometry:
    """Slice placement of one stack; slices and pixels are centred on the world origin."""

    orientation: str
    in_plane: float
    slice_thickness: float
    slice_spacing: float
    n_u: int
    n_v: int
    slice_positions: tuple[float, ...]

    @property
    def frame(self) -> np.ndarray:
        return orientation_frame(self.orientation)

    @property
    def n_slices(self) -> int:
        return len(self.slice_positions)

    @property
    def origin(self) -> np.ndarray:
        """World position of pixel (0, 0) of the first slice."""
        return self.slice_grid(0).origin

    def slice_grid(self, k: int) -> Grid:
        f = self.frame
        u0 = -(self.n_u - 1) / 2.0 * self.in_plane
        v0 = -(self.n_v - 1) / 2.0 * self.in_plane
        origin = u0 * f[:, 0] + v0 * f[:, 1] + self.slice_positions[k] * f[:, 2]
        return Grid((self.n_u, self.n_v, 1), (self.in_plane, self.in_plane, self.slice_thickness),
                    tuple(origin), f)

    def pixel_world(self, k: int) -> np.ndarray:
        """World coordinates of the pixel centres of slice ``k``, shape (n_u*n_v, 3)."""
        return self.slice_grid(k).world_coordinates().reshape(-1, 3)


def series_geometry(hr_grid: Grid, orientation: str, seq: SequenceParams, series_index: int = 0,
                    n_slices: int | None = None) -> SeriesGeometry:
    """Stack covering the HR field of view, shifted by ``series_index * fov_shift``."""
    f = orientation_frame(orientation)
    extent = np.abs(f.T @ (np.asarray(hr_grid.dims) * np.asarray(hr_grid.voxel_size)))
    if not np.allclose(hr_grid.axes, np.eye(3)):
        raise GeometryError("HR grid must be axis-aligned")
    n_u = max(1, int(round(extent[0] / seq.in_plane)))
    n_v = max(1, int(round(extent[1] / seq.in_plane)))
    if n_slices is None:
        n_slices = max(1, int(round(extent[2] / seq.slice_spacing)))
    if (n_slices - 1) * seq.slice_spacing > extent[2] + 1e-9:
        raise GeometryError(f"{n_slices} slices at {seq.slice_spacing} mm exceed the HR extent")
    offset = series_index * seq.fov_shift
    pos = tuple((k - (n_slices - 1) / 2.0) * seq.slice_spacing + offset for k in range(n_slices))
    return SeriesGeometry(orientation, seq.in_plane, seq.slice_thickness, seq.slice_spacing, n_u, n_v, pos)


@dataclass(frozen=True)
class LRSeries:
    orientation: str
    series_index: int
    slices: np.ndarray
    geometry: SeriesGeometry
    motion: tuple[RigidTransform, ...]
    corrupted: np.ndarray
    psf: PSFSpec = field(default=None)

    def __post_init__(self):
        slices = np.asarray(self.slices, dtype=float)
        if slices.ndim != 3 or slices.shape[0] < 1:
            raise ValueError("slices must be a non-empty (n, n_u, n_v) stack")
        if len(self.motion) != slices.shape[0] or len(self.corrupted) != slices.shape[0]:
            raise ValueError("motion and flags must have one entry per slice")
        flags = np.asarray(self.corrupted, dtype=bool)
        if any(bool(c) == t.is_identity for c, t in zip(flags, self.motion)):
            raise ValueError("exactly the flagged slices must carry non-identity motion")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "motion", tuple(self.motion))
        object.__setattr__(self, "corrupted", flags)

    @property
    def series_id(self) -> str:
        return f"{self.orientation}{self.series_index}"

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]


def add_kspace_noise(slice_: np.ndarray, sd: float, seed=None) -> np.ndarray:
    """Add complex white Gaussian noise in k-space and return the magnitude image.

    The k-space noise is scaled so that each image-domain pixel receives
    complex noise with standard deviation ``sd`` per real/imaginary component.
    """
    if sd < 0:
        raise ValueError("sd must be non-negative")
    img = np.asarray(slice_, dtype=float)
    if sd == 0:
        return np.abs(img)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = np.fft.fft2(img)
    k_sd = sd * np.sqrt(img.size)
    k = k + rng.normal(0.0, k_sd, k.shape) + 1j * rng.normal(0.0, k_sd, k.shape)
    return np.abs(np.fft.ifft2(k))


def simulate_lr_series(hr: Volume3D, orientation: str, seq: SequenceParams, motion_cfg: MotionConfig,
                       series_index: int = 0, seed: int = 0, n_slices: int | None = None,
                       psf: PSFSpec | None = None) -> LRSeries:
    """Acquire one LR stack from ``hr``: motion, slice-profile blur, sampling, noise.

    Random streams are keyed on ``(seed, orientation, series_index)`` so the
    result does not depend on the order in which series are simulated.
    """
    vs = np.asarray(hr.voxel_size)
    if not np.allclose(vs, vs[0]) or vs[0] > seq.in_plane + 1e-9:
        raise GeometryError("HR volume must be isotropic and at least as fine as the in-plane resolution")
    geom = series_geometry(hr.grid, orientation, seq, series_index, n_slices)
    psf = psf or PSFSpec.for_sequence(seq)
    o = ORIENTATIONS.index(orientation)
    motion_rng = _stream(seed, motion_cfg.seed, o, series_index, 1)
    motion, flags = sample_motion(motion_cfg, geom.n_slices, motion_rng)

    blurred = Volume3D(blur(hr.data, world_fwhm(psf, geom.frame), vs, psf.truncation), hr.grid)
    noise_rng = _stream(seed, o, series_index, 2)
    slices = np.empty((geom.n_slices, geom.n_u, geom.n_v))
    for k in range(geom.n_slices):
        # the motion maps slice-frame points onto the anatomy
        sampled = resample(blurred, motion[k], geom.slice_grid(k)).data[:, :, 0]
        slices[k] = add_kspace_noise(sampled, seq.noise_sd, noise_rng)
    return LRSeries(orientation, series_index, slices, geom, tuple(motion), flags, psf)


def simulate_series_set(hr: Volume3D, seq: SequenceParams, motion_cfg: MotionConfig, per_orientation: int = 3,
                        seed: int = 0, orientations: Sequence[str] = ORIENTATIONS) -> list[LRSeries]:
    """Orthogonal stacks, ``per_orientation`` FOV-shifted repeats per orientation."""
    return [simulate_lr_series(hr, o, seq, motion_cfg, i, seed)
            for i in range(per_orientation) for o in orientations]


@dataclass(frozen=True)
class SeriesSpec:
    orientation: str
    n_slices: int | None = None


@dataclass(frozen=True)
class ExamDescriptor:
    """Acquisition summary of one clinical exam, used to mimic it in simulation."""

    subject_id: str
    ga_weeks: float
    field_strength: float
    series: tuple[SeriesSpec, ...]
    motion_amplitude: str = "little"

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "ga_weeks": self.ga_weeks,
            "field_strength": self.field_strength,
            "motion_amplitude": self.motion_amplitude,
            "series": [{"orientation": s.orientation, **({"n_slices": s.n_slices} if s.n_slices else {})}
                       for s in self.series],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExamDescriptor":
        if not isinstance(raw, dict):
            raise DescriptorError("exam descriptor must be a JSON object")
        try:
            ga = float(raw["ga_weeks"])
            fs = float(raw["field_strength"])
            series_raw = raw["series"]
        except KeyError as exc:
            raise DescriptorError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise DescriptorError(str(exc)) from None
        if not GA_RANGE[0] <= ga <= GA_RANGE[1]:
            raise DescriptorError(f"ga_weeks {ga} outside {GA_RANGE}")
        if fs not in (1.5, 3.0):
            raise DescriptorError(f"unsupported field strength {fs}")
        motion = raw.get("motion_amplitude", "little")
        if motion not in ("little", "moderate"):
            raise DescriptorError(f"unknown motion amplitude {motion!r}")
        if not isinstance(series_raw, list) or not series_raw:
            raise DescriptorError("series must be a non-empty list")
        specs = []
        for s in series_raw:
            if not isinstance(s, dict) or s.get("orientation") not in ORIENTATIONS:
                raise DescriptorError(f"bad series entry {s!r}")
            n = s.get("n_slices")
            if n is not None and (not isinstance(n, int) or n < 1):
                raise DescriptorError(f"bad slice count {n!r}")
            specs.append(SeriesSpec(s["orientation"], n))
        return cls(str(raw.get("subject_id", "subject")), ga, fs, tuple(specs), motion)

    @classmethod
    def load(cls, path: str | Path) -> "ExamDescriptor":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DescriptorError(f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)


def simulate_exam(hr: Volume3D, exam: ExamDescriptor, seq: SequenceParams, seed: int = 0) -> list[LRSeries]:
    """Simulate the exam's series; repeated orientations get successive FOV shifts."""
    motion = MotionConfig.preset(exam.motion_amplitude, seed)
    counts = {o: 0 for o in ORIENTATIONS}
    out = []
    for spec in exam.series:
        idx = counts[spec.orientation]
        counts[spec.orientation] += 1
        out.append(simulate_lr_series(hr, spec.orientation, seq, motion, idx, seed, n_slices=spec.n_slices))
    return out


def without_noise(seq: SequenceParams) -> SequenceParams:
    return replace(seq, noise_sd=0.0)
