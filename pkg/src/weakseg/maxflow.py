"""Continuous max-flow solvers for binary and Potts (multi-region) labelling.

Both solvers run the augmented-Lagrangian primal-dual iteration on the
max-flow dual of the anisotropic (per-axis L1) total-variation energy:
source/sink flows, a spatial flow field per axis bounded by the TV weight,
and the labelling function as the multiplier of the flow-conservation
constraint. Gradients are forward differences on unit voxels.

Binary energy minimised over ``u(x) in [0, 1]``::

    E(u) = sum_x ds(x) u(x) + dt(x) (1 - u(x)) + alpha * sum_edges |u(x) - u(y)|

Potts energy minimised over the label simplex::

    E(u) = sum_L sum_x d_L(x) u_L(x) + alpha * sum_L sum_edges |u_L(x) - u_L(y)|

A solve stops once the mean absolute multiplier update falls below
``tolerance`` *and* the duality gap certifies the current solution (see
:class:`SolverConfig`); otherwise it runs to ``max_iterations`` and the
report is flagged as not converged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "CostField",
    "PottsCostField",
    "SolverConfig",
    "SolveReport",
    "solve_binary",
    "solve_potts",
    "threshold",
    "argmax_labels",
    "discrete_energy",
    "potts_energy",
    "project_simplex",
]


@dataclass(frozen=True)
class CostField:
    """Per-voxel source cost ``ds`` (paid by FG) and sink cost ``dt`` (paid by BG)."""

    ds: np.ndarray
    dt: np.ndarray

    def __post_init__(self):
        ds, dt = np.asarray(self.ds), np.asarray(self.dt)
        if ds.shape != dt.shape:
            raise ValueError(f"ds shape {ds.shape} != dt shape {dt.shape}")
        _check_costs(ds, "ds")
        _check_costs(dt, "dt")
        object.__setattr__(self, "ds", ds)
        object.__setattr__(self, "dt", dt)

    @property
    def shape(self):
        return self.ds.shape


@dataclass(frozen=True)
class PottsCostField:
    """Per-label costs stacked along the first axis: ``d[L, ...]``."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d)
        if d.ndim < 2 or d.shape[0] < 2:
            raise ValueError("Potts costs need shape (n_labels >= 2, *grid)")
        _check_costs(d, "d")
        object.__setattr__(self, "d", d)

    @property
    def n_labels(self) -> int:
        return self.d.shape[0]


def _check_costs(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"cost {name} contains non-finite values")
    if arr.size and arr.min() < 0:
        raise ValueError(f"cost {name} must be >= 0")


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``tolerance`` bounds the mean absolute update of ``u`` per voxel.
    ``gap_tolerance`` bounds the relative duality gap that must also hold
    before stopping: for the binary solver it is measured between the
    energy of the thresholded labelling and the dual lower bound, so a
    converged report certifies that labelling; for Potts it bounds the gap
    of the relaxed problem. Set it to ``inf`` to stop on the update alone.
    """

    alpha: float = 4.0
    max_iterations: int = 2000
    tolerance: float = 1e-4
    augmentation_weight: float = 0.2
    step_size: float = 0.11
    gap_tolerance: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.augmentation_weight <= 0 or self.step_size <= 0:
            raise ValueError("augmentation_weight and step_size must be > 0")


@dataclass(frozen=True)
class SolveReport:
    residual: float
    iterations: int
    converged: bool
    gap: float


def _as_3d(arr: np.ndarray, dtype) -> np.ndarray:
    if arr.ndim > 3:
        raise ValueError("grids of at most 3 dimensions are supported")
    return np.ascontiguousarray(arr.reshape((1,) * (3 - arr.ndim) + arr.shape), dtype=dtype)


def _work_dtype(*arrays) -> np.dtype:
    if all(a.dtype == np.float32 for a in arrays):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


# -- binary -----------------------------------------------------------------


@njit(cache=True)
def _binary_sweep(cs, ct, u, ps, pt, p0, p1, p2, dv, r, alpha, c, step):
    nz, ny, nx = u.shape
    inv_c = 1.0 / c
    total = 0.0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                rc = r[k, j, i]
                # r ahead of (k, j, i) still holds the previous iterate, flows behind it are updated
                if k < nz - 1:
                    p0[k, j, i] = min(alpha, max(-alpha, p0[k, j, i] + step * (r[k + 1, j, i] - rc)))
                if j < ny - 1:
                    p1[k, j, i] = min(alpha, max(-alpha, p1[k, j, i] + step * (r[k, j + 1, i] - rc)))
                if i < nx - 1:
                    p2[k, j, i] = min(alpha, max(-alpha, p2[k, j, i] + step * (r[k, j, i + 1] - rc)))
                d = p0[k, j, i] + p1[k, j, i] + p2[k, j, i]
                if k > 0:
                    d -= p0[k - 1, j, i]
                if j > 0:
                    d -= p1[k, j - 1, i]
                if i > 0:
                    d -= p2[k, j, i - 1]
                uu = u[k, j, i]
                s = min(cs[k, j, i], d + pt[k, j, i] + (1.0 - uu) * inv_c)
                t = min(ct[k, j, i], s - d + uu * inv_c)
                e = c * (d - s + t)
                uu -= e
                total += abs(e)
                u[k, j, i] = uu
                ps[k, j, i] = s
                pt[k, j, i] = t
                dv[k, j, i] = d
                r[k, j, i] = d - s + t - uu * inv_c
    return total / u.size


def _tv(labels: np.ndarray) -> float:
    total = 0.0
    for axis in range(labels.ndim):
        if labels.shape[axis] > 1:
            total += float(np.count_nonzero(np.diff(labels, axis=axis)))
    return total


def discrete_energy(labeling: np.ndarray, cost: CostField, alpha: float) -> float:
    """Binary energy of a 0/1 labelling: data terms plus ``alpha`` per cut edge."""
    lab = np.asarray(labeling).astype(bool)
    if lab.shape != cost.shape:
        raise ValueError(f"labelling shape {lab.shape} != cost shape {cost.shape}")
    data = float(np.sum(cost.ds, where=lab, dtype=np.float64))
    data += float(np.sum(cost.dt, where=~lab, dtype=np.float64))
    return data + alpha * _tv(lab.astype(np.int8))


def solve_binary(cost: CostField, cfg: SolverConfig = SolverConfig()):
    """Minimise the relaxed binary energy. Returns ``(u, SolveReport)``.

    ``u`` has the shape of the cost field and stays within [0, 1] at every
    iteration (up to rounding).
    """
    shape = cost.shape
    dtype = _work_dtype(cost.ds, cost.dt)
    # flow capacities: the source edge carries the BG cost, the sink edge the FG cost
    cs = _as_3d(cost.dt, dtype)
    ct = _as_3d(cost.ds, dtype)
    ps = np.minimum(cs, ct)
    pt = ps.copy()
    u = (ct <= cs).astype(dtype)
    p0, p1, p2 = (np.zeros_like(u) for _ in range(3))
    dv = np.zeros_like(u)
    c = float(cfg.augmentation_weight)
    r = -u / dtype.type(c)
    alpha = float(cfg.alpha)

    residual, gap, converged = math.inf, math.inf, False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        residual = _binary_sweep(cs, ct, u, ps, pt, p0, p1, p2, dv, r, alpha, c, float(cfg.step_size))
        if residual <= cfg.tolerance:
            gap = _binary_gap(u, cs, ct, dv, alpha)
            if gap <= cfg.gap_tolerance:
                converged = True
                break
    return u.reshape(shape), SolveReport(float(residual), it, converged, float(gap))


def _binary_gap(u, cs, ct, dv, alpha) -> float:
    # any bounded flow gives the lower bound sum(min(Cs, Ct + div p)) on the min-cut energy
    lower = float(np.minimum(cs, ct + dv).sum(dtype=np.float64))
    lab = u >= 0.5
    upper = float(np.sum(ct, where=lab, dtype=np.float64) + np.sum(cs, where=~lab, dtype=np.float64))
    upper += alpha * _tv(lab.astype(np.int8))
    return (upper - lower) / max(abs(upper), 1e-12)


def threshold(u: np.ndarray, level: float = 0.5) -> np.ndarray:
    """Foreground is ``u >= level``; a value of exactly 0.5 counts as foreground."""
    return np.asarray(u) >= level


# -- Potts ------------------------------------------------------------------


@njit(cache=True)
def _potts_sweep(cost, u, ps, pt, p0, p1, p2, dv, r, alpha, c, step):
    nz, ny, nx, nl = u.shape
    inv_c = 1.0 / c
    total = 0.0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                s_old = ps[k, j, i]
                acc = 0.0
                for l in range(nl):
                    rc = r[k, j, i, l]
                    if k < nz - 1:
                        p0[k, j, i, l] = min(alpha, max(-alpha, p0[k, j, i, l] + step * (r[k + 1, j, i, l] - rc)))
                    if j < ny - 1:
                        p1[k, j, i, l] = min(alpha, max(-alpha, p1[k, j, i, l] + step * (r[k, j + 1, i, l] - rc)))
                    if i < nx - 1:
                        p2[k, j, i, l] = min(alpha, max(-alpha, p2[k, j, i, l] + step * (r[k, j, i + 1, l] - rc)))
                    d = p0[k, j, i, l] + p1[k, j, i, l] + p2[k, j, i, l]
                    if k > 0:
                        d -= p0[k - 1, j, i, l]
                    if j > 0:
                        d -= p1[k, j - 1, i, l]
                    if i > 0:
                        d -= p2[k, j, i - 1, l]
                    ul = u[k, j, i, l]
                    t = min(cost[k, j, i, l], s_old - d + ul * inv_c)
                    pt[k, j, i, l] = t
                    dv[k, j, i, l] = d
                    acc += t + d - ul * inv_c
                s = (acc + inv_c) / nl
                ps[k, j, i] = s
                for l in range(nl):
                    d = dv[k, j, i, l]
                    t = pt[k, j, i, l]
                    e = c * (d - s + t)
                    ul = u[k, j, i, l] - e
                    total += abs(e)
                    u[k, j, i, l] = ul
                    r[k, j, i, l] = d - s + t - ul * inv_c
    return total / u.size


def project_simplex(u: np.ndarray, axis: int = 0) -> np.ndarray:
    """Euclidean projection of each vector along ``axis`` onto the probability simplex."""
    v = np.moveaxis(np.asarray(u, dtype=np.float64), axis, -1)
    n = v.shape[-1]
    srt = -np.sort(-v, axis=-1)
    css = np.cumsum(srt, axis=-1) - 1.0
    ks = np.arange(1, n + 1)
    cond = srt - css / ks > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    out = np.maximum(v - theta, 0.0)
    return np.moveaxis(out, -1, axis).astype(np.asarray(u).dtype, copy=False)


def solve_potts(cost: PottsCostField, cfg: SolverConfig = SolverConfig(alpha=0.05)):
    """Minimise the relaxed Potts energy. Returns ``(u, SolveReport)``.

    ``u`` has shape ``(n_labels, *grid)``; each voxel's label vector lies on
    the probability simplex (sums to 1, non-negative).
    """
    n_labels = cost.n_labels
    grid = cost.d.shape[1:]
    dtype = _work_dtype(cost.d)
    d = np.stack([_as_3d(cost.d[l], dtype) for l in range(n_labels)], axis=-1)
    best = d.min(axis=-1)
    ps = best.copy()
    pt = np.repeat(best[..., None], n_labels, axis=-1)
    u = (np.arange(n_labels) == d.argmin(axis=-1)[..., None]).astype(dtype)
    p0, p1, p2 = (np.zeros_like(u) for _ in range(3))
    dv = np.zeros_like(u)
    c = float(cfg.augmentation_weight)
    r = -u / dtype.type(c)
    alpha = float(cfg.alpha)

    residual, gap, converged = math.inf, math.inf, False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        residual = _potts_sweep(d, u, ps, pt, p0, p1, p2, dv, r, alpha, c, float(cfg.step_size))
        if residual <= cfg.tolerance:
            gap = _potts_gap(u, d, dv, alpha) if math.isfinite(cfg.gap_tolerance) else 0.0
            if gap <= cfg.gap_tolerance:
                converged = True
                break
    u = project_simplex(u, axis=-1)
    u = np.moveaxis(u, -1, 0).reshape((n_labels,) + grid)
    return np.ascontiguousarray(u), SolveReport(float(residual), it, converged, float(gap))


def _potts_gap(u, d, dv, alpha) -> float:
    lower = float((d + dv).min(axis=-1).sum(dtype=np.float64))
    up = project_simplex(u, axis=-1)
    upper = float((d * up).sum(dtype=np.float64))
    for axis in range(3):
        if up.shape[axis] > 1:
            upper += alpha * float(np.abs(np.diff(up, axis=axis)).sum(dtype=np.float64))
    return (upper - lower) / max(abs(upper), 1e-12)


def argmax_labels(u: np.ndarray) -> np.ndarray:
    """Voxel-wise argmax over the label axis; ties resolve to the lower index."""
    return np.argmax(np.asarray(u), axis=0)


def potts_energy(labels: np.ndarray, cost: PottsCostField, alpha: float) -> float:
    """Discrete Potts energy of a label map.

    Each edge joining two different labels changes two indicator channels,
    so it costs ``2 * alpha``.
    """
    labels = np.asarray(labels)
    if labels.shape != cost.d.shape[1:]:
        raise ValueError("label map does not match the cost grid")
    data = float(np.take_along_axis(cost.d, labels[None].astype(np.intp), axis=0).sum(dtype=np.float64))
    return data + 2.0 * alpha * _tv(labels)
