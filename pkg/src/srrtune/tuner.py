"""Grid search for the regularization weight α.

Two protocols are supported: *setting-wise* tuning of an acquisition
configuration (field strength, number of series) over simulated phantoms and
repeated random series subsets, and *subject-wise* tuning that simulates one
exam descriptor.  Every (repeat, α) pair is an independent task; tasks can run
in a process pool and are merged by key, so serial and parallel runs agree.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .acquisition import (ORIENTATIONS, ExamDescriptor, MotionConfig, _stream, simulate_exam,
                          simulate_series_set)
from .errors import DivergenceError, InputError
from .forward import build_operator, stack_data
from .geometry import Grid
from .metrics import evaluation_mask, psnr, ssim
from .phantom import GA_RANGE, MAX_VOXEL_MM, SequenceParams, generate_phantom, load_tissue_table, reference_hr
from .solvers import RegularizerKind, SolverConfig, solve

N_SIMULATED_SERIES = 9
METRICS = ("psnr", "ssim")
TV_GRID_RECIPROCALS = (0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 5.0)


@dataclass(frozen=True)
class GridSpec:
    values: tuple[float, ...]
    default_alpha: float
    label: str = "custom"

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValueError("grid is empty")
        if any(not v > 0 for v in values):
            raise ValueError("grid values must be positive")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("grid values must be strictly increasing")
        if float(self.default_alpha) not in values:
            raise ValueError("default alpha must be one of the grid values")
        if self.label not in ("tv-style", "tikhonov-style", "custom"):
            raise ValueError(f"unknown grid label {self.label!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "default_alpha", float(self.default_alpha))

    @classmethod
    def custom(cls, values: Iterable[float], default_alpha: float | None = None) -> "GridSpec":
        vals = sorted(set(float(v) for v in values))
        if default_alpha is not None and float(default_alpha) not in vals:
            vals = sorted(vals + [float(default_alpha)])
        return cls(tuple(vals), vals[0] if default_alpha is None else default_alpha, "custom")

    def __len__(self) -> int:
        return len(self.values)

    def index(self, alpha: float) -> int:
        return int(np.argmin(np.abs(np.log(self.values) - math.log(alpha))))

    def to_dict(self) -> dict:
        return {"label": self.label, "values": list(self.values), "default_alpha": self.default_alpha}


def make_grid(kind: str) -> GridSpec:
    """The two published α grids.

    ``tikhonov-style``: 10 values geometrically spaced on [1e-3, 2] plus the
    default 0.01.  ``tv-style``: reciprocals of 0.75 … 5.0 with default 4/3.
    """
    if kind == "tikhonov-style":
        values = np.geomspace(1e-3, 2.0, 10).tolist()
        values[0], values[-1] = 1e-3, 2.0
        return GridSpec(tuple(sorted(values + [0.01])), 0.01, kind)
    if kind == "tv-style":
        return GridSpec(tuple(sorted(1.0 / r for r in TV_GRID_RECIPROCALS)), 1.0 / 0.75, kind)
    raise ValueError(f"unknown grid kind {kind!r}; expected 'tv-style' or 'tikhonov-style'")


def default_grid(reg) -> GridSpec:
    reg = RegularizerKind.parse(reg)
    return make_grid("tv-style" if reg is RegularizerKind.TV else "tikhonov-style")


@dataclass(frozen=True)
class Configuration:
    """One acquisition setting of the setting-wise protocol."""

    field_strength: float = 1.5
    n_series: int = 3
    ga_weeks: float = 30.0
    repeats: int = 3
    seed: int = 0
    hr_dims: int = 64
    motion: str = "little"
    max_iters: int | None = None

    def __post_init__(self):
        if self.field_strength not in (1.5, 3.0):
            raise ValueError("field strength must be 1.5 or 3.0 T")
        if not 1 <= self.n_series <= N_SIMULATED_SERIES:
            raise ValueError(f"n_series must lie in [1, {N_SIMULATED_SERIES}]")
        if not GA_RANGE[0] <= self.ga_weeks <= GA_RANGE[1]:
            raise ValueError(f"ga_weeks must lie in {GA_RANGE}")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.hr_dims < 16:
            raise ValueError("hr_dims must be at least 16")

    @property
    def config_id(self) -> str:
        return f"{self.field_strength:g}T-{self.n_series}s-ga{self.ga_weeks:g}-seed{self.seed}"

    def sequence(self) -> SequenceParams:
        return SequenceParams.preset(self.field_strength)

    def hr_grid(self) -> Grid:
        return Grid.centered(self.hr_dims, min(MAX_VOXEL_MM, self.sequence().in_plane))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Row:
    config_id: str
    field_strength: float
    n_series: int
    ga_weeks: float
    regularizer: str
    alpha: float
    repeat: int
    psnr_db: float
    ssim: float
    iterations: int = 0
    converged: bool = True

    CSV_COLUMNS = ("config_id", "field_strength", "n_series", "ga_weeks", "regularizer",
                   "alpha", "repeat", "psnr_db", "ssim")

    def metric(self, name: str) -> float:
        return self.psnr_db if name == "psnr" else self.ssim

    def csv_record(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_COLUMNS}


@dataclass
class TuneResult:
    rows: list[Row]
    alpha_star_psnr: float
    alpha_star_ssim: float
    config: dict
    grid: GridSpec
    regularizer: str
    reconstructions: dict = field(default_factory=dict, repr=False)

    def mean_metric(self, metric: str) -> dict[float, float]:
        return mean_by_alpha(self.rows, metric)

    def alpha_star(self, metric: str) -> float:
        return self.alpha_star_psnr if metric == "psnr" else self.alpha_star_ssim

    def gain(self, metric: str) -> float:
        """Mean metric at α* minus mean metric at the default α."""
        means = self.mean_metric(metric)
        return means[self.alpha_star(metric)] - means[self.grid.default_alpha]

    def summary(self) -> dict:
        return {
            "config_id": self.config.get("config_id"),
            "regularizer": self.regularizer,
            "alpha_star_psnr": self.alpha_star_psnr,
            "alpha_star_ssim": self.alpha_star_ssim,
            "default_alpha": self.grid.default_alpha,
            "gains": {"psnr_db": _finite_or_none(self.gain("psnr")), "ssim": self.gain("ssim")},
            "unconverged_solves": sum(not r.converged for r in self.rows),
        }


def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def mean_by_alpha(rows: Sequence[Row], metric: str) -> dict[float, float]:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    acc: dict[float, list[float]] = {}
    for r in rows:
        acc.setdefault(r.alpha, []).append(r.metric(metric))
    return {a: float(np.mean(v)) for a, v in sorted(acc.items())}


def select_alpha(result, metric: str) -> float:
    """α with the highest mean ``metric`` over repeats; ties go to the smaller α."""
    rows = result.rows if isinstance(result, TuneResult) else list(result)
    if not rows:
        raise InputError("no rows to select from")
    means = mean_by_alpha(rows, metric)
    best = max(means.values())
    return min(a for a, m in means.items() if m == best)


def balanced_subset(orientations: Sequence[str], n: int, rng: np.random.Generator) -> list[int]:
    """Indices of ``n`` series spread as evenly as possible over orientations.

    Each orientation contributes ``n // 3`` series; the remainder goes to
    randomly chosen orientations.  Returned indices keep the input order.
    """
    by_o = {o: [i for i, s in enumerate(orientations) if s == o] for o in ORIENTATIONS}
    present = [o for o in ORIENTATIONS if by_o[o]]
    if n > len(orientations):
        raise ValueError("subset larger than the available series")
    quota = {o: n // len(present) for o in present}
    for o in rng.permutation(present)[: n % len(present)]:
        quota[str(o)] += 1
    picked = []
    for o in present:
        if quota[o] > len(by_o[o]):
            raise ValueError(f"not enough {o} series for a balanced subset of {n}")
        picked.extend(rng.choice(by_o[o], size=quota[o], replace=False).tolist())
    return sorted(picked)


# ---------------------------------------------------------------- task context

@dataclass(frozen=True)
class _Setting:
    config: Configuration


@dataclass(frozen=True)
class _Subject:
    exam_json: str
    seed: int
    hr_dims: int


@dataclass
class _Context:
    H: object
    y: np.ndarray
    reference: np.ndarray
    mask: np.ndarray


@lru_cache(maxsize=1)
def _phantom(ga: float, fs: float, seed: int, hr_dims: int):
    seq = SequenceParams.preset(fs)
    grid = Grid.centered(hr_dims, min(MAX_VOXEL_MM, seq.in_plane))
    labels = generate_phantom(ga, grid, seed=seed)
    hr = reference_hr(labels, load_tissue_table(fs), seq)
    return seq, hr, evaluation_mask(labels.support())


@lru_cache(maxsize=1)
def _setting_series(config: Configuration):
    seq, hr, mask = _phantom(config.ga_weeks, config.field_strength, config.seed, config.hr_dims)
    series = simulate_series_set(hr, seq, MotionConfig.preset(config.motion, config.seed),
                                 per_orientation=N_SIMULATED_SERIES // 3, seed=config.seed)
    return hr, mask, series


@lru_cache(maxsize=2)
def _context(source, repeat: int) -> _Context:
    if isinstance(source, _Setting):
        cfg = source.config
        hr, mask, series = _setting_series(cfg)
        rng = _stream(cfg.seed, repeat, 17)
        chosen = [series[i] for i in balanced_subset([s.orientation for s in series], cfg.n_series, rng)]
    else:
        exam = ExamDescriptor.from_dict(json.loads(source.exam_json))
        seq, hr, mask = _phantom(exam.ga_weeks, exam.field_strength, source.seed, source.hr_dims)
        # each repeat is a fresh motion + noise realisation of the same exam
        chosen = simulate_exam(hr, exam, seq, seed=int(_stream(source.seed, repeat, 23).integers(2**31)))
    H = build_operator(chosen, hr.grid)
    H.norm()
    return _Context(H, stack_data(chosen), hr.data, mask)


def _run_task(source, reg: str, alpha: float, repeat: int, max_iters, keep: bool):
    ctx = _context(source, repeat)
    try:
        res = solve(ctx.H, ctx.y, reg, SolverConfig(alpha, max_iters=max_iters))
    except DivergenceError as exc:
        raise DivergenceError(exc.iteration, f"{exc} (alpha={alpha:g}, repeat={repeat})") from None
    return (psnr(res.x, ctx.reference, ctx.mask), ssim(res.x, ctx.reference, ctx.mask),
            res.iterations, res.converged, res.x if keep else None)


def _execute(source, reg: RegularizerKind, grid: GridSpec, repeats: int, max_iters, workers: int,
             keep_alphas: Iterable[float] | None):
    keep = set() if keep_alphas is None else {float(a) for a in keep_alphas}
    # repeat-major ordering lets each worker reuse its cached operator
    tasks = [(r, a) for r in range(repeats) for a in grid.values]
    args = [(source, reg.value, a, r, max_iters, a in keep) for r, a in tasks]
    if workers <= 1:
        outputs = [_run_task(*a) for a in args]
    else:
        chunk = max(1, len(tasks) // (workers * repeats) or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_task, *zip(*args), chunksize=chunk))
    return dict(zip(tasks, outputs))


def _assemble(results: dict, grid: GridSpec, reg: RegularizerKind, echo: dict, ident: dict) -> TuneResult:
    rows, recon = [], {}
    for (r, a) in sorted(results, key=lambda k: (grid.values.index(k[1]), k[0])):
        p, s, its, conv, x = results[(r, a)]
        rows.append(Row(alpha=a, repeat=r, psnr_db=p, ssim=s, iterations=its, converged=conv,
                        regularizer=reg.value, **ident))
        if x is not None:
            recon[(r, a)] = x
    return TuneResult(rows, select_alpha(rows, "psnr"), select_alpha(rows, "ssim"), echo, grid, reg.value, recon)


def tune_setting(config: Configuration, grid: GridSpec | None, reg, workers: int = 1,
                 keep_alphas: Iterable[float] | None = None) -> TuneResult:
    """Setting-wise grid search.

    Nine series (three FOV-shifted stacks per orientation) are simulated once
    for the phantom; each repeat reconstructs an orientation-balanced random
    subset of ``config.n_series`` of them at every α.  Motion is fixed per
    phantom, so repeats differ only in the chosen subset.
    """
    reg = RegularizerKind.parse(reg)
    grid = grid or default_grid(reg)
    results = _execute(_Setting(config), reg, grid, config.repeats, config.max_iters, workers, keep_alphas)
    ident = dict(config_id=config.config_id, field_strength=config.field_strength,
                 n_series=config.n_series, ga_weeks=config.ga_weeks)
    echo = {**config.to_dict(), "config_id": config.config_id, "protocol": "setting"}
    return _assemble(results, grid, reg, echo, ident)


def tune_subject(exam: ExamDescriptor | dict, grid: GridSpec | None, reg, seed: int = 0, repeats: int = 1,
                 hr_dims: int = 64, max_iters: int | None = None, workers: int = 1,
                 keep_alphas: Iterable[float] | None = None) -> TuneResult:
    """Subject-wise grid search on a simulation mimicking one exam descriptor."""
    if isinstance(exam, dict):
        exam = ExamDescriptor.from_dict(exam)
    reg = RegularizerKind.parse(reg)
    grid = grid or default_grid(reg)
    source = _Subject(json.dumps(exam.to_dict(), sort_keys=True), int(seed), int(hr_dims))
    results = _execute(source, reg, grid, repeats, max_iters, workers, keep_alphas)
    config_id = f"{exam.subject_id}-seed{seed}"
    ident = dict(config_id=config_id, field_strength=exam.field_strength,
                 n_series=len(exam.series), ga_weeks=exam.ga_weeks)
    echo = {"protocol": "subject", "config_id": config_id, "exam": exam.to_dict(), "seed": seed,
            "repeats": repeats, "hr_dims": hr_dims, "max_iters": max_iters}
    return _assemble(results, grid, reg, echo, ident)


def ga_sweep(ga_values: Sequence[float], template: Configuration, grid: GridSpec | None, reg,
             workers: int = 1) -> list[tuple[float, float, float]]:
    """``(ga, α*_psnr, α*_ssim)`` for one setting-wise run per gestational age."""
    out = []
    for ga in ga_values:
        res = tune_setting(replace(template, ga_weeks=float(ga)), grid, reg, workers=workers)
        out.append((float(ga), res.alpha_star_psnr, res.alpha_star_ssim))
    return out
