"""Fusion of slice annotations into volume priors, intensity models and the weak segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotate import SliceAnnotation, SubjectRecord
from .maxflow import CostField, SolveReport, SolverConfig, solve_binary, threshold
from .volgrid import DIRECTIONS, VolumeGrid, axis_of

__all__ = [
    "PriorVolumes",
    "IntensityModel",
    "SegmentationResult",
    "fuse_foreground",
    "fuse_background",
    "build_priors",
    "build_intensity_model",
    "build_cost_field",
    "segment_weak",
    "EPSILON",
    "N_BINS",
]

EPSILON = 1e-8
N_BINS = 256


@dataclass
class PriorVolumes:
    sc_vol: np.ndarray
    a_vol: np.ndarray
    u_vol: np.ndarray
    s_fg: np.ndarray
    s_bg: np.ndarray


def _annotated(annotations):
    items = annotations.values() if isinstance(annotations, dict) else annotations
    return [a for a in items if a.annotated]


def fuse_foreground(annotations, shape) -> np.ndarray:
    """Union of all scribbles, placed back into the volume."""
    out = np.zeros(shape, dtype=bool)
    for a in _annotated(annotations):
        if a.scribble is not None:
            _or_slice(out, a, a.scribble)
    return out


def _or_slice(vol: np.ndarray, a: SliceAnnotation, plane: np.ndarray) -> None:
    key = [slice(None)] * 3
    key[axis_of(a.direction)] = a.index
    view = vol[tuple(key)]
    if view.shape != plane.shape:
        raise ValueError(
            f"annotation ({a.direction}, {a.index}) has shape {plane.shape}, slice is {view.shape}"
        )
    view |= plane


def fuse_background(annotations, shape):
    """``(a_vol, u_vol, s_bg)`` from region annotations and the annotated-slice schedule.

    A voxel is unseen in a direction when none of that direction's slices
    through it was annotated; ``u_vol`` holds voxels unseen in every
    direction. Not-visible slices add no region but count as seen.
    """
    a_vol = np.zeros(shape, dtype=bool)
    u_vol = np.ones(shape, dtype=bool)
    seen = {d: np.zeros(shape[axis_of(d)], dtype=bool) for d in DIRECTIONS}
    for a in _annotated(annotations):
        seen[a.direction][a.index] = True
        if a.mask is not None:
            _or_slice(a_vol, a, a.mask)
    for d in DIRECTIONS:
        unseen = ~seen[d]
        bshape = [1, 1, 1]
        bshape[axis_of(d)] = -1
        u_vol &= unseen.reshape(bshape)
    return a_vol, u_vol, ~a_vol & ~u_vol


def build_priors(annotations, shape) -> PriorVolumes:
    """Foreground and background sample sets; foreground wins where they meet."""
    sc_vol = fuse_foreground(annotations, shape)
    a_vol, u_vol, s_bg = fuse_background(annotations, shape)
    return PriorVolumes(sc_vol, a_vol, u_vol, sc_vol.copy(), s_bg & ~sc_vol)


@dataclass(frozen=True)
class IntensityModel:
    """Floored, normalised intensity histogram over ``[lo, hi]``."""

    lo: float
    hi: float
    probabilities: np.ndarray

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, len(self.probabilities) + 1)

    def bin_index(self, values) -> np.ndarray:
        n = len(self.probabilities)
        scaled = (np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo) * n
        return np.clip(scaled.astype(np.int64), 0, n - 1)

    def likelihood(self, values) -> np.ndarray:
        return self.probabilities[self.bin_index(values)]


def _range(volume: VolumeGrid) -> tuple[float, float]:
    lo, hi = float(volume.data.min()), float(volume.data.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def build_intensity_model(
    volume: VolumeGrid, samples: np.ndarray, bins: int = N_BINS, eps: float = EPSILON
) -> IntensityModel:
    """Histogram of the sampled intensities on uniform bins over the volume range.

    Each probability is ``eps + (1 - bins*eps) * frequency`` so the floor
    holds and the total stays exactly 1.
    """
    samples = np.asarray(samples, dtype=bool)
    if samples.shape != volume.shape:
        raise ValueError("sample mask does not match the volume")
    if not samples.any():
        raise ValueError("cannot build an intensity model from an empty sample set")
    if bins * eps >= 1.0:
        raise ValueError("floor too large for the number of bins")
    lo, hi = _range(volume)
    model = IntensityModel(lo, hi, np.zeros(bins))
    counts = np.bincount(model.bin_index(volume.data[samples]), minlength=bins)
    probs = eps + (1.0 - bins * eps) * counts / counts.sum()
    return IntensityModel(lo, hi, probs)


def build_cost_field(
    volume: VolumeGrid, fg: IntensityModel, bg: IntensityModel, priors: PriorVolumes
) -> CostField:
    """Negative log-likelihood costs, zeroed on the annotated samples."""
    ds = -np.log(fg.likelihood(volume.data))
    dt = -np.log(bg.likelihood(volume.data))
    ds[priors.s_fg] = 0.0
    dt[priors.s_bg] = 0.0
    return CostField(ds.astype(np.float32), dt.astype(np.float32))


@dataclass
class SegmentationResult:
    mask: np.ndarray
    failed: bool
    report: SolveReport | None = None
    priors: PriorVolumes | None = None


def segment_weak(
    subject: SubjectRecord, cfg: SolverConfig = SolverConfig(), annotations=None
) -> SegmentationResult:
    """Segment the subject's target from its (or the given) weak annotations.

    Cases without foreground or background samples fail with an empty mask.
    """
    annotations = subject.annotations if annotations is None else annotations
    volume = subject.volume
    priors = build_priors(annotations, volume.shape)
    if not priors.s_fg.any() or not priors.s_bg.any():
        return SegmentationResult(np.zeros(volume.shape, dtype=bool), True, None, priors)
    fg = build_intensity_model(volume, priors.s_fg)
    bg = build_intensity_model(volume, priors.s_bg)
    u, report = solve_binary(build_cost_field(volume, fg, bg, priors), cfg)
    return SegmentationResult(threshold(u), False, report, priors)

