"""Simulated weak annotations: scribbles, grid decisions, boxes and merged pre-segmentations.

Every selected slice of a subject receives one :class:`SliceAnnotation`
holding the scribble (foreground seed) and the region annotation of the
plan's type. Misidentification errors re-annotate the slice from a
distractor organ, or declare the target not visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .maxflow import PottsCostField, SolverConfig, argmax_labels, solve_potts
from .volgrid import (
    DIRECTIONS,
    VolumeGrid,
    bounding_rect,
    erode_mask,
    extract_slice,
    insert_slice,
    label_components,
    slice_count,
)

__all__ = [
    "Kind",
    "ANNOTATION_TYPES",
    "AnnotationPlan",
    "SliceAnnotation",
    "SubjectRecord",
    "Presegmentation",
    "select_slices",
    "simulate_sc",
    "simulate_bd",
    "simulate_rr",
    "simulate_ps",
    "potts_costs",
    "compute_presegmentation",
    "annotate_clean",
    "apply_error_model",
    "simulate_annotations",
    "slice_rng",
    "write_annotations",
    "read_annotations",
]


class Kind(str, Enum):
    SC = "SC"
    BD = "BD"
    RR = "RR"
    PS = "PS"
    NOT_VISIBLE = "NOT_VISIBLE"
    UNANNOTATED = "UNANNOTATED"


# plan type -> kind of the region annotation that accompanies the scribble
ANNOTATION_TYPES = {"sc": Kind.SC, "bd": Kind.BD, "rr": Kind.RR, "ps": Kind.PS}


@dataclass(frozen=True)
class AnnotationPlan:
    """Annotation rate, error rate and annotation type for one simulation.

    ``ann_type`` is one of ``sc`` (scribbles only), ``bd``, ``rr`` or ``ps``
    (scribbles plus that region annotation). ``sc_fraction`` caps the
    scribble area relative to the object's area in the slice.
    """

    ar: float = 1.0
    err: float = 0.0
    ann_type: str = "rr"
    ds: int = 4
    sc_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ar <= 1.0:
            raise ValueError(f"annotation rate must lie in (0, 1], got {self.ar}")
        if not 0.0 <= self.err <= 1.0:
            raise ValueError(f"error rate must lie in [0, 1], got {self.err}")
        if self.ann_type not in ANNOTATION_TYPES:
            raise ValueError(f"unknown annotation type {self.ann_type!r}")
        if self.ds < 1:
            raise ValueError("ds must be >= 1")

    @property
    def k(self) -> int:
        """Slice stride, 1/AR rounded to the nearest integer."""
        return max(1, math.floor(1.0 / self.ar + 0.5))

    @property
    def n_bd(self) -> int:
        return self.ds * self.ds

    @property
    def kind(self) -> Kind:
        return ANNOTATION_TYPES[self.ann_type]


@dataclass
class SliceAnnotation:
    """One weak annotation of slice ``index`` in ``direction``.

    ``mask`` is the region the annotator rated as foreground (the scribble
    itself for scribble-only plans); ``scribble`` the foreground seed. Both
    are None for NOT_VISIBLE and UNANNOTATED. ``corrupted`` is simulation
    provenance and is never consulted by the segmentation or QC code.
    """

    direction: int
    index: int
    kind: Kind
    mask: np.ndarray | None = None
    scribble: np.ndarray | None = None
    corrupted: bool = False

    @property
    def annotated(self) -> bool:
        return self.kind is not Kind.UNANNOTATED

    def region(self, plane_shape) -> np.ndarray:
        """Foreground region as a boolean plane; empty when not visible."""
        if self.mask is None:
            return np.zeros(plane_shape, dtype=bool)
        return self.mask


@dataclass
class SubjectRecord:
    id: int
    volume: VolumeGrid
    organs: dict[str, np.ndarray]
    target: str = "liver"
    annotations: dict[tuple[int, int], SliceAnnotation] = field(default_factory=dict)
    seed: int | None = None
    poses: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if self.target not in self.organs:
            raise ValueError(f"target organ {self.target!r} missing")
        for name, mask in self.organs.items():
            if mask.shape != self.volume.shape:
                raise ValueError(f"organ {name!r} does not match the volume shape")
        occupancy = np.zeros(self.volume.shape, dtype=np.int16)
        for mask in self.organs.values():
            occupancy += mask.astype(np.int16)
        if occupancy.max(initial=0) > 1:
            raise ValueError("organ masks overlap")

    @property
    def shape(self):
        return self.volume.shape

    @property
    def target_mask(self) -> np.ndarray:
        return self.organs[self.target]

    @property
    def distractors(self) -> list[str]:
        return [n for n in self.organs if n != self.target]

    def with_annotations(self, annotations) -> SubjectRecord:
        return replace(self, annotations=dict(annotations))


# -- slice schedule and per-slice simulators ---------------------------------


def select_slices(plan: AnnotationPlan, shape) -> list[tuple[int, int]]:
    """Every k-th slice from index 0, in each of the three directions."""
    return [(d, j) for d in DIRECTIONS for j in range(0, slice_count(shape, d), plan.k)]


def simulate_sc(m: np.ndarray, max_area_fraction: float = 0.15) -> np.ndarray | None:
    """Erode ``m`` until its area drops to ``max_area_fraction`` of the original.

    Stops early if the next erosion would remove everything; returns None
    for an empty mask.
    """
    m = np.asarray(m, dtype=bool)
    area = int(m.sum())
    if area == 0:
        return None
    limit = max_area_fraction * area
    current = m
    while current.sum() > limit:
        nxt = erode_mask(current, 1)
        if not nxt.any():
            break
        current = nxt
    return current


def _grid_edges(n: int, ds: int) -> list[int]:
    step = n // ds
    return [i * step for i in range(ds)] + [n]


def simulate_bd(m: np.ndarray, ds: int = 4) -> np.ndarray | None:
    """Union of the ds x ds grid cells that intersect ``m``.

    Leftover rows/columns from uneven splits belong to the last cell.
    """
    m = np.asarray(m, dtype=bool)
    if not m.any():
        return None
    rows = _grid_edges(m.shape[0], ds)
    cols = _grid_edges(m.shape[1], ds)
    out = np.zeros_like(m)
    for r0, r1 in zip(rows, rows[1:]):
        for c0, c1 in zip(cols, cols[1:]):
            if m[r0:r1, c0:c1].any():
                out[r0:r1, c0:c1] = True
    return out


def simulate_rr(m: np.ndarray) -> np.ndarray | None:
    """Filled tight bounding box of ``m``."""
    rect = bounding_rect(m)
    if rect is None:
        return None
    r0, r1, c0, c1 = rect
    out = np.zeros(np.shape(m), dtype=bool)
    out[r0 : r1 + 1, c0 : c1 + 1] = True
    return out


def simulate_ps(m: np.ndarray, components: np.ndarray) -> np.ndarray | None:
    """Union of all pre-segmentation components that intersect ``m``."""
    m = np.asarray(m, dtype=bool)
    if components.shape != m.shape:
        raise ValueError("component map does not match the mask")
    if not m.any():
        return None
    hit = np.unique(components[m])
    hit = hit[hit != 0]
    return np.isin(components, hit)


# -- Potts pre-segmentation --------------------------------------------------

PRESEG_SOLVER = SolverConfig(
    alpha=0.05, augmentation_weight=0.5, tolerance=3e-4, gap_tolerance=math.inf
)


def potts_costs(volume: VolumeGrid, n_labels: int = 16, bins: int | None = None):
    """L1 intensity costs to the ``n_labels`` most frequent intensities.

    The intensity histogram uses ``bins`` uniform bins over the volume
    range (twice the label count by default); each chosen bin is represented by the mean intensity of its
    voxels (the bin centre if it is empty). Ties in frequency go to the
    lower bin. Returns ``(PottsCostField, levels)`` with levels ascending.
    """
    if n_labels < 2:
        raise ValueError("n_labels must be >= 2")
    data = volume.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        hi = lo + 1.0
    bins = max(bins or 2 * n_labels, n_labels)
    which = np.clip(((data - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1).ravel()
    counts = np.bincount(which, minlength=bins)
    sums = np.bincount(which, weights=data.ravel(), minlength=bins)
    chosen = np.sort(np.argsort(-counts, kind="stable")[:n_labels])
    centres = lo + (np.arange(bins) + 0.5) * (hi - lo) / bins
    levels = np.where(counts[chosen] > 0, sums[chosen] / np.maximum(counts[chosen], 1), centres[chosen])
    cost = np.abs(volume.data.astype(np.float32)[None] - levels.astype(np.float32)[:, None, None, None])
    return PottsCostField(cost), levels


@dataclass
class Presegmentation:
    """Potts label map plus per-slice 4-connected component maps per direction."""

    labels: np.ndarray
    components: dict[int, np.ndarray]
    levels: np.ndarray
    report: object = None

    def slice_components(self, direction: int, index: int) -> np.ndarray:
        return extract_slice(self.components[direction], direction, index)


def components_per_slice(label_map: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    for d in DIRECTIONS:
        comp = np.zeros(label_map.shape, dtype=np.int32)
        for j in range(slice_count(label_map.shape, d)):
            insert_slice(comp, d, j, label_components(extract_slice(label_map, d, j))[0])
        out[d] = comp
    return out


def compute_presegmentation(
    volume: VolumeGrid,
    n_labels: int = 16,
    alpha_potts: float = 0.05,
    cfg: SolverConfig | None = None,
) -> Presegmentation:
    """Potts intensity segmentation followed by per-slice component analysis."""
    cost, levels = potts_costs(volume, n_labels)
    cfg = replace(cfg or PRESEG_SOLVER, alpha=alpha_potts)
    u, report = solve_potts(cost, cfg)
    labels = argmax_labels(u).astype(np.int16)
    return Presegmentation(labels, components_per_slice(labels), levels, report)


# -- whole-subject simulation ------------------------------------------------


def slice_rng(seed: int, subject_id: int, direction: int, index: int) -> np.random.Generator:
    """Independent Philox stream per (seed, subject, direction, slice)."""
    ss = np.random.SeedSequence([int(seed), int(subject_id), int(direction), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def _annotate_plane(m, plan: AnnotationPlan, components=None):
    scribble = simulate_sc(m, plan.sc_fraction)
    if scribble is None:
        return Kind.NOT_VISIBLE, None, None
    kind = plan.kind
    if kind is Kind.SC:
        region = scribble
    elif kind is Kind.BD:
        region = simulate_bd(m, plan.ds)
    elif kind is Kind.RR:
        region = simulate_rr(m)
    else:
        if components is None:
            raise ValueError("PS annotations need a pre-segmentation")
        region = simulate_ps(m, components)
    return kind, region, scribble


def _components_for(preseg, d, j):
    return None if preseg is None else preseg.slice_components(d, j)


def annotate_clean(
    subject: SubjectRecord, plan: AnnotationPlan, preseg: Presegmentation | None = None
) -> dict[tuple[int, int], SliceAnnotation]:
    """Error-free annotations of the target organ on the scheduled slices."""
    out = {}
    target = subject.target_mask
    for d, j in select_slices(plan, subject.shape):
        kind, region, scribble = _annotate_plane(
            extract_slice(target, d, j), plan, _components_for(preseg, d, j)
        )
        out[d, j] = SliceAnnotation(d, j, kind, region, scribble)
    return out


def apply_error_model(
    subject: SubjectRecord, plan: AnnotationPlan, preseg: Presegmentation | None = None
) -> SubjectRecord:
    """Corrupt each annotated slice independently with probability ``plan.err``.

    A corrupted slice is re-annotated from a distractor organ picked
    uniformly among those visible in the slice, or declared NOT_VISIBLE if
    none is. The draw for a slice depends only on (seed, subject, slice),
    so lower error rates corrupt a subset of the slices corrupted at
    higher rates.
    """
    out = {}
    names = subject.distractors
    for (d, j), ann in subject.annotations.items():
        if not ann.annotated:
            out[d, j] = ann
            continue
        rng = slice_rng(plan.seed, subject.id, d, j)
        draw = rng.random()
        if draw >= plan.err:
            out[d, j] = ann
            continue
        visible = [n for n in names if extract_slice(subject.organs[n], d, j).any()]
        if visible:
            pick = visible[int(rng.integers(len(visible)))]
            m = extract_slice(subject.organs[pick], d, j)
            kind, region, scribble = _annotate_plane(m, plan, _components_for(preseg, d, j))
        else:
            kind, region, scribble = Kind.NOT_VISIBLE, None, None
        out[d, j] = SliceAnnotation(d, j, kind, region, scribble, corrupted=True)
    return subject.with_annotations(out)


def simulate_annotations(
    subject: SubjectRecord, plan: AnnotationPlan, preseg: Presegmentation | None = None
) -> SubjectRecord:
    """Clean annotations followed by the error model."""
    clean = subject.with_annotations(annotate_clean(subject, plan, preseg))
    return apply_error_model(clean, plan, preseg)


# -- manifest I/O ------------------------------------------------------------
#
#   weakseg-annotations 1
#   subject <id>
#   shape <nz> <ny> <nx>
#   slice <direction> <index> <kind> <corrupted 0|1> <mask> <scribble>
#
# Masks are run lengths over the row-major plane, comma separated, starting
# with a run of zeros (possibly 0); "-" marks an absent mask.


def _rle(mask: np.ndarray | None) -> str:
    if mask is None:
        return "-"
    flat = np.asarray(mask, dtype=np.int8).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return ",".join(str(r) for r in runs) if runs else "0"


def _unrle(text: str, shape) -> np.ndarray | None:
    if text == "-":
        return None
    runs = [int(r) for r in text.split(",")]
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    n = int(np.prod(shape))
    if flat.size != n:
        raise ValueError(f"run lengths cover {flat.size} pixels, expected {n}")
    return flat.reshape(shape)


def write_annotations(path, subject: SubjectRecord) -> Path:
    path = Path(path)
    nz, ny, nx = subject.shape
    lines = ["weakseg-annotations 1", f"subject {subject.id}", f"shape {nz} {ny} {nx}"]
    for (d, j) in sorted(subject.annotations):
        a = subject.annotations[d, j]
        lines.append(
            f"slice {d} {j} {a.kind.value} {int(a.corrupted)} {_rle(a.mask)} {_rle(a.scribble)}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def read_annotations(path) -> tuple[int, dict[tuple[int, int], SliceAnnotation]]:
    """Parse a manifest; returns ``(subject_id, annotations)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != ["weakseg-annotations", "1"]:
        raise ValueError(f"{path}: not an annotation manifest")
    subject_id, shape, out = None, None, {}
    for line in lines[1:]:
        parts = line.split(" ")
        if not parts or not parts[0]:
            continue
        if parts[0] == "subject":
            subject_id = int(parts[1])
        elif parts[0] == "shape":
            shape = tuple(int(v) for v in parts[1:4])
        elif parts[0] == "slice":
            if shape is None:
                raise ValueError(f"{path}: slice record before shape")
            d, j = int(parts[1]), int(parts[2])
            axis = 2 - d
            plane = tuple(s for a, s in enumerate(shape) if a != axis)
            out[d, j] = SliceAnnotation(
                d,
                j,
                Kind(parts[3]),
                _unrle(parts[5], plane),
                _unrle(parts[6], plane),
                corrupted=parts[4] == "1",
            )
        else:
            raise ValueError(f"{path}: unknown record {parts[0]!r}")
    if subject_id is None:
        raise ValueError(f"{path}: missing subject record")
    return subject_id, out
