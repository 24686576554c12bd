"""Annotation quality control against a weakly labelled atlas built from the database itself.

Each annotation is compared with an iteratively refined consensus of the
same slice in the most similar other subjects, and rejected when it agrees
with that consensus less than the consensus members do on average.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotate import Kind, SliceAnnotation, SubjectRecord
from .volgrid import extract_slice

__all__ = [
    "dice",
    "AtlasDatabase",
    "QCConfig",
    "OutlierDecision",
    "QCRecord",
    "retrieve_similar",
    "consensus_fusion",
    "detect_outlier",
    "filter_database",
    "detection_scores",
    "write_qc_report",
]


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|), defined as 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _dice_many(ref: np.ndarray, stack: np.ndarray) -> np.ndarray:
    # dice of ref against every mask in stack (leading axis)
    flat = stack.reshape(len(stack), -1)
    r = ref.ravel()
    inter = (flat & r).sum(axis=1)
    total = flat.sum(axis=1) + r.sum()
    out = np.ones(len(stack))
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out


@dataclass(frozen=True)
class QCConfig:
    n_similar: int = 30
    n_iterations: int = 2
    consensus_threshold: float = 0.5

    def __post_init__(self):
        if self.n_similar < 1 or self.n_iterations < 1:
            raise ValueError("n_similar and n_iterations must be >= 1")
        if not 0.0 <= self.consensus_threshold < 1.0:
            raise ValueError("consensus_threshold must lie in [0, 1)")


class AtlasDatabase:
    """Subjects sharing one grid, with per-slice image and annotation stacks."""

    def __init__(self, subjects: list[SubjectRecord]):
        if not subjects:
            raise ValueError("database needs at least one subject")
        shape = subjects[0].shape
        if any(s.shape != shape for s in subjects):
            raise ValueError("all subjects must share the same grid")
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        self.subjects = list(subjects)
        self.shape = shape
        self._pos = {s.id: i for i, s in enumerate(self.subjects)}
        self._images: dict[tuple[int, int], np.ndarray] = {}

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def subject(self, subject_id: int) -> SubjectRecord:
        return self.subjects[self._pos[subject_id]]

    def images(self, direction: int, index: int) -> np.ndarray:
        """Stack of the (direction, index) image slice of every subject."""
        key = (direction, index)
        if key not in self._images:
            self._images[key] = np.stack(
                [extract_slice(s.volume, direction, index).astype(np.float64) for s in self.subjects]
            )
        return self._images[key]

    def annotation_stack(self, direction: int, index: int):
        """``(masks, present)``: region masks (empty if not visible) and a flag per subject
        telling whether the slice carries an evaluable annotation."""
        plane = self.images(direction, index).shape[1:]
        masks = np.zeros((len(self.subjects), *plane), dtype=bool)
        present = np.zeros(len(self.subjects), dtype=bool)
        for i, s in enumerate(self.subjects):
            ann = s.annotations.get((direction, index))
            if ann is None or not ann.annotated:
                continue
            present[i] = True
            masks[i] = ann.region(plane)
        return masks, present

    def with_subjects(self, subjects) -> AtlasDatabase:
        db = AtlasDatabase(subjects)
        db._images = self._images
        return db


def retrieve_similar(query: np.ndarray, candidates: np.ndarray, ids, n: int) -> list[int]:
    """Positions of the ``n`` candidate slices with the smallest SSD to ``query``.

    ``candidates`` stacks images along the first axis; ``ids`` orders ties.
    """
    ssd = ((candidates - query[None]) ** 2).reshape(len(candidates), -1).sum(axis=1)
    order = np.lexsort((np.asarray(ids), ssd))
    return [int(i) for i in order[:n]]


def consensus_fusion(masks, threshold: float = 0.5) -> np.ndarray:
    """Pixels where the mean of the binary masks strictly exceeds ``threshold``."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim < 1 or len(masks) == 0:
        raise ValueError("consensus needs at least one mask")
    return masks.mean(axis=0) > threshold


@dataclass(frozen=True)
class OutlierDecision:
    outlier: bool
    dice: float
    mu: float
    n_consensus: int


def _refine(query_mask, masks, cfg: QCConfig) -> OutlierDecision:
    # iterative consensus over the retrieved annotations
    q = np.arange(len(masks))
    if q.size == 0:
        return OutlierDecision(False, float("nan"), float("nan"), 0)
    consensus = mu = None
    for _ in range(cfg.n_iterations):
        if q.size == 0:
            break
        o = consensus_fusion(masks[q], cfg.consensus_threshold)
        scores = _dice_many(o, masks[q])
        consensus, mu, support = o, float(scores.mean()), q.size
        q = q[scores >= mu]
    score = dice(query_mask, consensus)
    return OutlierDecision(score < mu, score, mu, support)


def _classify(db: AtlasDatabase, pos: int, direction: int, index: int, cfg: QCConfig, stacks):
    images = db.images(direction, index)
    masks, present = stacks
    ann = db.subjects[pos].annotations[direction, index]
    others = np.flatnonzero(present & (np.arange(len(db)) != pos))
    ids = [db.subjects[i].id for i in others]
    picked = others[retrieve_similar(images[pos], images[others], ids, cfg.n_similar)]
    return _refine(ann.region(images.shape[1:]), masks[picked], cfg)


def detect_outlier(
    wa: SliceAnnotation, subject_id: int, db: AtlasDatabase, cfg: QCConfig = QCConfig()
) -> OutlierDecision:
    """Judge one annotation of subject ``subject_id`` against the rest of ``db``."""
    if not wa.annotated:
        raise ValueError("unannotated slices are not evaluated")
    pos = db._pos[subject_id]
    if db.subjects[pos].annotations.get((wa.direction, wa.index)) is not wa:
        subj = db.subjects[pos]
        subj = subj.with_annotations({**subj.annotations, (wa.direction, wa.index): wa})
        db = db.with_subjects([subj if i == pos else s for i, s in enumerate(db.subjects)])
    stacks = db.annotation_stack(wa.direction, wa.index)
    return _classify(db, pos, wa.direction, wa.index, cfg, stacks)


@dataclass(frozen=True)
class QCRecord:
    subject: int
    direction: int
    index: int
    kind: Kind
    corrupted: bool
    dice: float
    mu: float
    rejected: bool


def filter_database(db: AtlasDatabase, cfg: QCConfig = QCConfig()):
    """Classify every annotation against the original database.

    Returns ``(filtered_db, records)``; rejected annotations become
    UNANNOTATED in the filtered copy.
    """
    keys = sorted({k for s in db.subjects for k, a in s.annotations.items() if a.annotated})
    records: list[QCRecord] = []
    rejected: set[tuple[int, int, int]] = set()
    for d, j in keys:
        stacks = db.annotation_stack(d, j)
        for pos, s in enumerate(db.subjects):
            ann = s.annotations.get((d, j))
            if ann is None or not ann.annotated:
                continue
            dec = _classify(db, pos, d, j, cfg, stacks)
            records.append(QCRecord(s.id, d, j, ann.kind, ann.corrupted, dec.dice, dec.mu, dec.outlier))
            if dec.outlier:
                rejected.add((s.id, d, j))
    out = []
    for s in db.subjects:
        anns = dict(s.annotations)
        for (d, j), a in s.annotations.items():
            if (s.id, d, j) in rejected:
                anns[d, j] = SliceAnnotation(d, j, Kind.UNANNOTATED, corrupted=a.corrupted)
        out.append(s.with_annotations(anns))
    records.sort(key=lambda r: (r.subject, r.direction, r.index))
    return db.with_subjects(out), records


def detection_scores(records) -> tuple[float, float]:
    """Precision and recall of the rejections against the corruption flags."""
    tp = sum(r.rejected and r.corrupted for r in records)
    fp = sum(r.rejected and not r.corrupted for r in records)
    fn = sum(r.corrupted and not r.rejected for r in records)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def write_qc_report(path, records) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "direction", "index", "kind", "corrupted", "dice", "mu", "decision"])
        for r in records:
            w.writerow(
                [
                    r.subject,
                    r.direction,
                    r.index,
                    r.kind.value,
                    int(r.corrupted),
                    f"{r.dice:.6f}",
                    f"{r.mu:.6f}",
                    "reject" if r.rejected else "keep",
                ]
            )
    return path
