"""Procedural fetal-brain-like label phantom and T2-weighted signal rendering."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import GeometryError, ResolutionError, TableError
from .geometry import Grid, RigidTransform, Volume3D, resample

GA_RANGE = (21.0, 38.0)
MAX_VOXEL_MM = 1.1

BACKGROUND, CSF, CORTICAL_GM, WHITE_MATTER, DEEP_GM, VENTRICLES = range(6)
TISSUE_LABELS = (CSF, CORTICAL_GM, WHITE_MATTER, DEEP_GM, VENTRICLES)

# head semi-axes (mm) at GA 21 and growth per week, before scaling
_BASE_SEMI_AXES = np.array([18.0, 14.8, 13.5])
_GROWTH_PER_WEEK = np.array([0.80, 0.66, 0.60])
_CSF_MM = 2.0
_CORTEX_MM = 2.5


@dataclass(frozen=True)
class LabelVolume:
    """Integer tissue labels on a grid; label 0 is background."""

    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.grid.dims:
            raise GeometryError("label array does not match grid dims")
        if not np.issubdtype(data.dtype, np.integer):
            raise TypeError("labels must be integers")
        object.__setattr__(self, "data", data)

    def present(self) -> set[int]:
        return set(int(v) for v in np.unique(self.data))

    def support(self) -> np.ndarray:
        return self.data != BACKGROUND


@dataclass(frozen=True)
class TissueProperties:
    label: int
    name: str
    T1: float
    T2: float
    PD: float

    def __post_init__(self):
        if not (self.T1 > self.T2 > 0):
            raise ValueError(f"{self.name}: need T1 > T2 > 0")
        if not (0 < self.PD <= 1):
            raise ValueError(f"{self.name}: PD must lie in (0, 1]")


@dataclass(frozen=True)
class SequenceParams:
    """FSE acquisition parameters (times in ms, lengths in mm)."""

    field_strength: float
    TR: float
    TE: float
    in_plane: float
    slice_thickness: float
    slice_spacing: float
    noise_sd: float
    fov_shift: float = 1.6

    def __post_init__(self):
        if self.field_strength not in (1.5, 3.0):
            raise ValueError("field strength must be 1.5 or 3.0 T")
        for name in ("TR", "TE", "in_plane", "slice_thickness", "slice_spacing", "fov_shift"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")

    @classmethod
    def preset(cls, field_strength: float, **overrides) -> "SequenceParams":
        """Routine clinical FSE protocol at 1.5 T or 3 T.

        Slice thickness defaults to 3.0 mm with equal spacing; a 3.3 mm
        through-plane spacing can be requested via ``slice_spacing``.
        """
        fs = float(field_strength)
        if fs == 1.5:
            base = dict(TR=1200.0, TE=90.0, in_plane=1.1, noise_sd=0.15)
        elif fs == 3.0:
            base = dict(TR=1100.0, TE=101.0, in_plane=0.5, noise_sd=0.0025)
        else:
            raise ValueError("field strength must be 1.5 or 3.0 T")
        params = dict(field_strength=fs, slice_thickness=3.0, slice_spacing=3.0,
                      fov_shift=1.6, **base)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


def load_tissue_table(field_strength: float, path: str | Path | None = None) -> dict[int, TissueProperties]:
    """Read the ``label -> TissueProperties`` table for one field strength."""
    if path is None:
        text = resources.files("srrtune.data").joinpath("tissues.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    key = f"{float(field_strength):.1f}"
    if key not in raw:
        raise TableError(f"no tissue table for {key} T")
    table = {}
    for entry in raw[key]:
        tp = TissueProperties(int(entry["label"]), str(entry["name"]), float(entry["T1_ms"]),
                              float(entry["T2_ms"]), float(entry["PD"]))
        table[tp.label] = tp
    return table


def head_semi_axes(ga_weeks: float) -> np.ndarray:
    """Unscaled head semi-axes in mm; grows linearly with gestational age."""
    return _BASE_SEMI_AXES + _GROWTH_PER_WEEK * (ga_weeks - GA_RANGE[0])


def auto_scale(grid: Grid) -> float:
    """Largest anatomy scale (<= 1) that fits a GA-38 head inside ``grid``."""
    half_fov = 0.5 * (np.asarray(grid.dims) - 1) * np.asarray(grid.voxel_size)
    margin = 4.0 * max(grid.voxel_size)
    return float(min(1.0, np.min((half_fov - margin) / head_semi_axes(GA_RANGE[1]))))


def _folding(directions: np.ndarray, rng: np.random.Generator, n_waves: int = 12) -> np.ndarray:
    """Smooth zero-mean surface undulation over unit directions, in [-1, 1]."""
    k = rng.normal(size=(n_waves, 3))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    freq = rng.uniform(3.0, 7.0, size=n_waves)
    phase = rng.uniform(0, 2 * np.pi, size=n_waves)
    field = np.zeros(directions.shape[:-1])
    for kk, f, ph in zip(k, freq, phase):
        field += np.cos(f * (directions @ kk) + ph)
    return field / n_waves * np.sqrt(2.0)


def _ellipsoid(pts, center, semi):
    return np.sum(((pts - center) / semi) ** 2, axis=-1) <= 1.0


def generate_phantom(ga_weeks: float, grid: Grid, seed: int = 0, scale: float | None = None) -> LabelVolume:
    """Nested five-tissue brain phantom centred at the world origin.

    Head size grows with ``ga_weeks`` and the cortical folding amplitude grows
    with it as well.  ``scale`` shrinks the anatomy; by default the largest
    scale that fits a GA-38 head on ``grid`` is used, so sizes are comparable
    across gestational ages on a given grid.
    """
    if not GA_RANGE[0] <= ga_weeks <= GA_RANGE[1]:
        raise ValueError(f"ga_weeks must lie in {GA_RANGE}")
    vs = np.asarray(grid.voxel_size)
    if not np.allclose(vs, vs[0]):
        raise GeometryError("phantom grid must be isotropic")
    if vs[0] > MAX_VOXEL_MM + 1e-9:
        raise ResolutionError(f"voxel size {vs[0]} mm exceeds {MAX_VOXEL_MM} mm")
    if scale is None:
        scale = auto_scale(grid)
    if scale <= 0:
        raise GeometryError("grid too small to hold the phantom")
    h = vs[0]
    if _CORTEX_MM * scale < 1.5 * h or _CSF_MM * scale < h:
        raise ResolutionError("grid too coarse to resolve the cortical ribbon")

    rng = np.random.default_rng([int(seed), 7919])
    semi = head_semi_axes(ga_weeks) * scale
    pts = grid.world_coordinates()
    half_fov = 0.5 * (np.asarray(grid.dims) - 1) * vs
    if np.any(semi + 3 * h > half_fov):
        raise GeometryError("phantom does not fit inside the grid")

    rho = np.sqrt(np.sum((pts / semi) ** 2, axis=-1))
    norm = np.linalg.norm(pts, axis=-1, keepdims=True)
    directions = np.divide(pts, norm, out=np.zeros_like(pts), where=norm > 0)
    folding_amp = (0.012 + 0.0045 * (ga_weeks - GA_RANGE[0])) * _folding(directions, rng)
    r_mean = float(np.mean(semi))

    brain_surface = 1.0 - _CSF_MM * scale / r_mean
    wm_surface = brain_surface - _CORTEX_MM * scale / r_mean
    rho_fold = rho * (1.0 + folding_amp)

    labels = np.zeros(grid.dims, dtype=np.int16)
    labels[rho <= 1.0] = CSF
    labels[rho_fold <= brain_surface] = CORTICAL_GM
    labels[(rho_fold <= wm_surface) & (rho <= brain_surface)] = WHITE_MATTER

    jitter = lambda: 1.0 + rng.uniform(-0.05, 0.05)  # noqa: E731
    for side in (-1.0, 1.0):
        dgm_c = np.array([0.05 * semi[0], side * 0.30 * semi[1], -0.05 * semi[2]])
        dgm_s = np.array([0.32, 0.20, 0.24]) * semi * jitter()
        labels[_ellipsoid(pts, dgm_c, dgm_s)] = DEEP_GM
    vent_scale = 1.0 - 0.25 * (ga_weeks - GA_RANGE[0]) / (GA_RANGE[1] - GA_RANGE[0])
    for side in (-1.0, 1.0):
        v_c = np.array([0.0, side * 0.10 * semi[1], 0.12 * semi[2]])
        v_s = np.array([0.45, 0.07, 0.16]) * semi * vent_scale * jitter()
        v_s[1] = max(v_s[1], 1.5 * h)
        labels[_ellipsoid(pts, v_c, v_s)] = VENTRICLES

    out = LabelVolume(labels, grid)
    missing = set(TISSUE_LABELS) - out.present()
    if missing:
        raise ResolutionError(f"grid too coarse: labels {sorted(missing)} vanished")
    return out


def signal_intensity(tissue: TissueProperties, TR: float, TE: float) -> float:
    """Saturation-recovery T2-weighted spin-echo signal of one tissue."""
    return tissue.PD * np.exp(-TE / tissue.T2) * (1.0 - np.exp(-TR / tissue.T1))


def render_signal(labels: LabelVolume, tissues: dict[int, TissueProperties], seq: SequenceParams) -> Volume3D:
    lut_size = int(labels.data.max()) + 1
    lut = np.zeros(lut_size)
    for lab in labels.present():
        if lab == BACKGROUND:
            continue
        if lab not in tissues:
            raise TableError(f"no tissue properties for label {lab}")
        lut[lab] = signal_intensity(tissues[lab], seq.TR, seq.TE)
    return Volume3D(lut[labels.data], labels.grid)


def reference_hr(labels: LabelVolume, tissues, seq: SequenceParams, grid: Grid | None = None) -> Volume3D:
    """Motion-free, noise-free HR reference on ``grid`` (default: the label grid)."""
    img = render_signal(labels, tissues, seq)
    if grid is None or grid.same_as(labels.grid):
        return img
    return resample(img, RigidTransform.identity(), grid)
