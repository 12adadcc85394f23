"""Regularized least-squares reconstruction: ½‖Hx − y‖² + α·R(x).

Two regularizer families are provided:

* ``tv`` -- isotropic total variation, solved with a first-order primal-dual
  (Chambolle-Pock) scheme;
* ``tikhonov1`` -- squared norm of the forward-difference gradient, solved via
  the normal equations ``(HᵀH + 2αDᵀD) x = Hᵀy`` with conjugate gradients.

Solvers accept any operator exposing ``apply``, ``adjoint`` and
``domain_shape`` (and optionally ``norm`` and ``target``).
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, DomainError, ShapeError
from .geometry import Volume3D

log = logging.getLogger(__name__)


class RegularizerKind(str, enum.Enum):
    TV = "tv"
    TIKHONOV1 = "tikhonov1"

    @classmethod
    def parse(cls, value) -> "RegularizerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown regularizer {value!r}; expected 'tv' or 'tikhonov1'") from None


DEFAULT_MAX_ITERS = {RegularizerKind.TV: 300, RegularizerKind.TIKHONOV1: 100}


@dataclass(frozen=True)
class SolverConfig:
    alpha: float
    max_iters: int | None = None
    tol: float = 1e-6
    init: str = "adjoint-backprojection"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.init not in ("zeros", "adjoint-backprojection"):
            raise ValueError(f"unknown init {self.init!r}")

    def iterations_for(self, reg: RegularizerKind) -> int:
        return self.max_iters if self.max_iters is not None else DEFAULT_MAX_ITERS[reg]


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    residual: float | None = None
    target: object = None

    @property
    def volume(self) -> Volume3D:
        if self.target is None:
            raise AttributeError("operator has no target grid")
        return Volume3D(self.x, self.target)


def convert_lambda(lam: float) -> float:
    """Regularization weight for a solver that weights the fidelity by ``lam``."""
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    return 1.0 / lam


def gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences along every axis with a replicate (Neumann) boundary."""
    g = np.zeros((x.ndim,) + x.shape)
    for ax in range(x.ndim):
        lo = [slice(None)] * x.ndim
        hi = [slice(None)] * x.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        np.subtract(x[tuple(hi)], x[tuple(lo)], out=g[ax][tuple(lo)])
    return g


def gradient_adjoint(g: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`gradient` (i.e. minus the divergence)."""
    out = np.zeros(g.shape[1:])
    for ax in range(g.shape[0]):
        n = g.shape[ax + 1]
        gi = g[ax]
        lo = [slice(None)] * (g.ndim - 1)
        hi = [slice(None)] * (g.ndim - 1)
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        inner = gi[tuple(lo)]
        out[tuple(lo)] -= inner
        out[tuple(hi)] += inner
    return out


def tv_norm(x: np.ndarray) -> float:
    g = gradient(x)
    return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))


def tikhonov1_norm(x: np.ndarray) -> float:
    g = gradient(x)
    return float(np.sum(g * g))


def regularizer_value(x: np.ndarray, reg) -> float:
    reg = RegularizerKind.parse(reg)
    return tv_norm(x) if reg is RegularizerKind.TV else tikhonov1_norm(x)


def _data(x):
    return x.data if isinstance(x, Volume3D) else np.asarray(x, dtype=float)


def objective(H, y, x, reg, alpha: float) -> float:
    """½‖Hx − y‖² + α·R(x)."""
    x = _data(x)
    if x.shape != tuple(H.domain_shape):
        raise ShapeError(f"x has shape {x.shape}, operator expects {tuple(H.domain_shape)}")
    y = np.asarray(y, dtype=float).ravel()
    r = H.apply(x) - y
    return 0.5 * float(r @ r) + alpha * regularizer_value(x, reg)


def _initial(H, y, init: str) -> np.ndarray:
    shape = tuple(H.domain_shape)
    if init == "zeros":
        return np.zeros(shape)
    back = H.adjoint(y)
    hits = H.adjoint(np.ones_like(y))
    out = np.zeros(shape)
    ok = hits > 1e-12 * max(float(hits.max()), 1e-300)
    out[ok] = back[ok] / hits[ok]
    return out


def operator_norm(H) -> float:
    if hasattr(H, "norm"):
        return float(H.norm())
    from .forward import power_norm
    return power_norm(lambda v: H.adjoint(H.apply(v)), tuple(H.domain_shape))


def solve(H, y, reg, cfg: SolverConfig) -> SolveResult:
    """Minimize ½‖Hx − y‖² + α·R(x) for the chosen regularizer."""
    reg = RegularizerKind.parse(reg)
    y = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("data contain non-finite values")
    if reg is RegularizerKind.TV:
        res = _solve_tv(H, y, cfg)
    else:
        res = _solve_tikhonov1(H, y, cfg)
    res.target = getattr(H, "target", None)
    if not res.converged:
        log.info("%s solve hit max_iters=%d (alpha=%g)", reg.value, res.iterations, cfg.alpha)
    return res


def _solve_tv(H, y, cfg: SolverConfig) -> SolveResult:
    alpha = cfg.alpha
    max_iters = cfg.iterations_for(RegularizerKind.TV)
    x = _initial(H, y, cfg.init)
    ndim = x.ndim
    # ‖K‖² <= ‖H‖² + ‖∇‖², with ‖∇‖² <= 4·ndim for forward differences
    L = np.sqrt(operator_norm(H) ** 2 + 4.0 * ndim)
    sigma = tau = 0.99 / L

    Hx = H.apply(x)
    Gx = gradient(x)
    p = np.zeros_like(y)
    q = np.zeros_like(Gx)
    Hxb, Gxb = Hx, Gx

    def value(Hx_, Gx_):
        r = Hx_ - y
        return 0.5 * float(r @ r) + alpha * float(np.sum(np.sqrt(np.sum(Gx_ * Gx_, axis=0))))

    f = value(Hx, Gx)
    best_f, best_x = f, x
    history = [f]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        p = (p + sigma * (Hxb - y)) / (1.0 + sigma)
        q = q + sigma * Gxb
        if alpha > 0:
            mag = np.sqrt(np.sum(q * q, axis=0))
            q /= np.maximum(1.0, mag / alpha)
        else:
            q[:] = 0.0
        x_new = x - tau * (H.adjoint(p) + gradient_adjoint(q))
        Hx_new = H.apply(x_new)
        Gx_new = gradient(x_new)
        f_new = value(Hx_new, Gx_new)
        if not np.isfinite(f_new):
            raise DivergenceError(it)
        Hxb = 2.0 * Hx_new - Hx
        Gxb = 2.0 * Gx_new - Gx
        x, Hx, Gx = x_new, Hx_new, Gx_new
        history.append(f_new)
        if f_new < best_f:
            best_f, best_x = f_new, x
        if abs(f - f_new) <= cfg.tol * max(abs(f), 1e-300):
            f = f_new
            converged = True
            break
        f = f_new
    return SolveResult(best_x, best_f, it, converged, history)


def _solve_tikhonov1(H, y, cfg: SolverConfig) -> SolveResult:
    alpha = cfg.alpha
    max_iters = cfg.iterations_for(RegularizerKind.TIKHONOV1)
    x = _initial(H, y, cfg.init)
    yy = float(y @ y)

    def normal(v):
        return H.adjoint(H.apply(v)) + 2.0 * alpha * gradient_adjoint(gradient(v))

    b = H.adjoint(y)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        x = np.zeros(tuple(H.domain_shape))
        return SolveResult(x, 0.5 * yy, 0, True, [0.5 * yy], 0.0)
    r = b - normal(x)
    # objective = ½xᵀAx − bᵀx + ½‖y‖² = −½xᵀ(b + r) + ½‖y‖²
    f = -0.5 * float(np.vdot(x, b + r)) + 0.5 * yy
    history = [f]
    d = r.copy()
    rr = float(np.vdot(r, r))
    rel = np.sqrt(rr) / b_norm
    it = 0
    converged = rel < cfg.tol
    while not converged and it < max_iters:
        it += 1
        Ad = normal(d)
        dAd = float(np.vdot(d, Ad))
        if dAd <= 0:
            break
        step = rr / dAd
        x = x + step * d
        r = r - step * Ad
        rr_new = float(np.vdot(r, r))
        f = -0.5 * float(np.vdot(x, b + r)) + 0.5 * yy
        if not np.isfinite(f):
            raise DivergenceError(it)
        history.append(f)
        rel = np.sqrt(rr_new) / b_norm
        if rel < cfg.tol:
            converged = True
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    # recompute the true residual; the recursive one drifts
    rel = float(np.linalg.norm(b - normal(x))) / b_norm
    return SolveResult(x, objective_from_parts(H, y, x, alpha), it, rel < cfg.tol, history, rel)


def objective_from_parts(H, y, x, alpha) -> float:
    r = H.apply(x) - y
    return 0.5 * float(r @ r) + alpha * tikhonov1_norm(x)
