"""Annotation-rate x error-rate experiment grid, paired t-tests and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .annotate import AnnotationPlan, Presegmentation, compute_presegmentation, simulate_annotations
from .fusion import segment_weak
from .maxflow import SolverConfig
from .phantom import default_spec, generate_cohort
from .qc import AtlasDatabase, QCConfig, dice, filter_database

__all__ = [
    "ExperimentConfig",
    "CellResult",
    "AccuracyMatrix",
    "load_config",
    "smoke_config",
    "build_cohort",
    "presegment_cohort",
    "run_cell",
    "run_grid",
    "betainc",
    "t_sf",
    "paired_t_test",
    "significance",
    "emit_reports",
    "write_pgm",
]

DEFAULT_AR = (1.0, 0.5, 0.33, 0.25, 0.1, 0.05, 0.01)
DEFAULT_ERR = (0.0, 0.05, 0.1, 0.25, 0.5)
GRID_TYPES = ("bd", "rr", "ps")


@dataclass(frozen=True)
class ExperimentConfig:
    ar_set: tuple[float, ...] = DEFAULT_AR
    err_set: tuple[float, ...] = DEFAULT_ERR
    types: tuple[str, ...] = GRID_TYPES
    n_subjects: int = 30
    shape: tuple[int, int, int] = (64, 64, 64)
    cohort_seed: int = 0
    seed: int = 0
    alpha: float = 4.0
    alpha_potts: float = 0.05
    n_labels: int = 16
    ds: int = 4
    sc_fraction: float = 0.15
    n_similar: int = 30
    n_iterations: int = 2
    max_iterations: int = 2000
    tolerance: float = 1e-4

    def __post_init__(self):
        if not self.ar_set or not self.err_set or not self.types:
            raise ValueError("ar_set, err_set and types must be non-empty")
        for ar in self.ar_set:
            if not 0.0 < ar <= 1.0:
                raise ValueError(f"annotation rate {ar} outside (0, 1]")
        for err in self.err_set:
            if not 0.0 <= err <= 1.0:
                raise ValueError(f"error rate {err} outside [0, 1]")
        for t in self.types:
            if t not in GRID_TYPES:
                raise ValueError(f"unknown annotation type {t!r}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        # surface range errors for the nested configs early
        self.solver
        self.qc

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(
            alpha=self.alpha, max_iterations=self.max_iterations, tolerance=self.tolerance
        )

    @property
    def qc(self) -> QCConfig:
        return QCConfig(n_similar=self.n_similar, n_iterations=self.n_iterations)

    def plan(self, ann_type: str, ar: float, err: float) -> AnnotationPlan:
        return AnnotationPlan(ar, err, ann_type, self.ds, self.sc_fraction, self.seed)


def smoke_config(**overrides) -> ExperimentConfig:
    """Small grid for quick checks: 3 rates x 2 error rates on 5 subjects at 32^3."""
    base = dict(ar_set=(1.0, 0.25, 0.05), err_set=(0.0, 0.25), n_subjects=5, shape=(32, 32, 32))
    return ExperimentConfig(**(base | overrides))


def _parse_value(name: str, text: str, default):
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if name == "types":
            return tuple(parts)
        if name == "shape":
            if len(parts) != 3:
                raise ValueError("shape needs three values")
            return tuple(int(p) for p in parts)
        return tuple(float(p) for p in parts)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    return float(text)


def load_config(path) -> ExperimentConfig:
    """Read ``key = value`` lines (``#`` starts a comment; lists are comma separated).

    ``profile = smoke`` starts from the smoke settings instead of the
    defaults; later keys override either.
    """
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values: dict = {}
    base = ExperimentConfig
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        if key == "profile":
            if text not in ("default", "smoke"):
                raise ValueError(f"{path}:{n}: unknown profile {text!r}")
            base = smoke_config if text == "smoke" else ExperimentConfig
            continue
        if key not in defaults:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, text, defaults[key])
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return base(**values)


# -- grid execution ----------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    dscs: tuple[float, ...]
    failures: int
    iterations: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return len(self.dscs)

    @property
    def mean(self) -> float:
        return float(np.mean(self.dscs))

    @property
    def sd(self) -> float:
        return float(np.std(self.dscs, ddof=1)) if self.n > 1 else 0.0


@dataclass
class AccuracyMatrix:
    """Cell results keyed by ``(type, ar, err)``."""

    ar_set: tuple[float, ...]
    err_set: tuple[float, ...]
    types: tuple[str, ...]
    cells: dict[tuple[str, float, float], CellResult] = field(default_factory=dict)

    def __getitem__(self, key) -> CellResult:
        return self.cells[key]

    def mean(self, ann_type: str, ar: float, err: float) -> float:
        return self.cells[ann_type, ar, err].mean


def build_cohort(cfg: ExperimentConfig) -> AtlasDatabase:
    return generate_cohort(default_spec(cfg.shape), cfg.n_subjects, cfg.cohort_seed)


def presegment_cohort(cfg: ExperimentConfig, db: AtlasDatabase) -> dict[int, Presegmentation]:
    return {
        s.id: compute_presegmentation(s.volume, cfg.n_labels, cfg.alpha_potts) for s in db.subjects
    }


def run_cell(
    cfg: ExperimentConfig,
    db: AtlasDatabase,
    ann_type: str,
    ar: float,
    err: float,
    corrected: bool,
    presegs: dict[int, Presegmentation] | None = None,
) -> CellResult:
    plan = cfg.plan(ann_type, ar, err)
    if ann_type == "ps" and presegs is None:
        presegs = presegment_cohort(cfg, db)
    annotated = db.with_subjects(
        [
            simulate_annotations(s, plan, presegs[s.id] if ann_type == "ps" else None)
            for s in db.subjects
        ]
    )
    if corrected:
        annotated, _ = filter_database(annotated, cfg.qc)
    dscs, failures, iterations = [], 0, []
    for s in annotated.subjects:
        result = segment_weak(s, cfg.solver)
        failures += result.failed
        dscs.append(0.0 if result.failed else dice(result.mask, s.target_mask))
        iterations.append(result.report.iterations if result.report else 0)
    return CellResult(tuple(dscs), failures, tuple(iterations))


def run_grid(
    cfg: ExperimentConfig,
    corrected: bool,
    db: AtlasDatabase | None = None,
    presegs: dict[int, Presegmentation] | None = None,
    progress=None,
) -> AccuracyMatrix:
    """Evaluate every (type, AR, ERR) cell; failed segmentations score 0."""
    db = db if db is not None else build_cohort(cfg)
    if "ps" in cfg.types and presegs is None:
        presegs = presegment_cohort(cfg, db)
    out = AccuracyMatrix(cfg.ar_set, cfg.err_set, cfg.types)
    for t in cfg.types:
        for ar in cfg.ar_set:
            for err in cfg.err_set:
                try:
                    out.cells[t, ar, err] = run_cell(cfg, db, t, ar, err, corrected, presegs)
                except Exception as exc:
                    raise RuntimeError(f"cell type={t} ar={ar:g} err={err:g} failed: {exc}") from exc
                if progress is not None:
                    progress(t, ar, err, out.cells[t, ar, err])
    return out


# -- statistics --------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # continued fraction for the incomplete beta, modified Lentz evaluation
    tiny, eps = 1e-300, 1e-15
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, dof: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t."""
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 < dof:
        # small |t|: x is close to 1, use the complement to keep precision
        return 1.0 - betainc(0.5, dof / 2.0, t2 / (dof + t2))
    return betainc(dof / 2.0, 0.5, dof / (dof + t2))


def paired_t_test(a, b) -> tuple[float, float]:
    """Paired t statistic of ``a - b`` and its two-sided p value.

    Constant differences give p = 1 if they are all zero and p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("at least two pairs are required")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, t_sf(t, n - 1)


def significance(corrected: AccuracyMatrix, raw: AccuracyMatrix, level: float = 0.05):
    """Per type, rows ``(ar, err, t, p, direction)`` comparing corrected with raw."""
    out: dict[str, list] = {}
    for t in raw.types:
        rows = []
        for ar in raw.ar_set:
            for err in raw.err_set:
                c, r = corrected[t, ar, err], raw[t, ar, err]
                stat, p = paired_t_test(c.dscs, r.dscs)
                sign = "0"
                if p < level:
                    sign = "+" if c.mean > r.mean else "-"
                rows.append((ar, err, stat, p, sign))
        out[t] = rows
    return out


# -- reports -----------------------------------------------------------------


def _num(v: float) -> str:
    return f"{v:g}"


def write_pgm(path, values: np.ndarray, cell: int = 8) -> Path:
    """Binary graymap, each value in [0, 1] drawn as a ``cell`` x ``cell`` block."""
    values = np.asarray(values, dtype=np.float64)
    pix = np.round(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)
    pix = np.kron(pix, np.ones((cell, cell), dtype=np.uint8))
    h, w = pix.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path


def _write_accuracy(path, m: AccuracyMatrix, ann_type: str):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ar", "err", "mean_dsc", "sd_dsc", "failures", "n"])
        for ar in m.ar_set:
            for err in m.err_set:
                c = m[ann_type, ar, err]
                w.writerow([_num(ar), _num(err), f"{c.mean:.6f}", f"{c.sd:.6f}", c.failures, c.n])


def _write_cases(path, m: AccuracyMatrix, cfg: ExperimentConfig | None):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["type", "ar", "err", "case", "dsc", "iterations", "seed", "alpha"])
        for (t, ar, err), c in m.cells.items():
            its = c.iterations or (0,) * c.n
            for i, (v, it) in enumerate(zip(c.dscs, its)):
                seed = cfg.seed if cfg else ""
                alpha = _num(cfg.alpha) if cfg else ""
                w.writerow([t, _num(ar), _num(err), i, f"{v:.6f}", it, seed, alpha])


def emit_reports(matrices: dict[str, AccuracyMatrix], tests, outdir, cfg=None) -> list[Path]:
    """Write accuracy CSVs, per-case CSVs, heatmaps and significance files.

    ``matrices`` maps ``raw`` / ``corrected`` to results; ``tests`` maps an
    annotation type to its rows from :func:`significance` (may be empty).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    types: tuple[str, ...] = ()
    for variant, m in matrices.items():
        types = m.types
        for t in m.types:
            p = outdir / f"accuracy_{t}_{variant}.csv"
            _write_accuracy(p, m, t)
            grid = np.array([[m.mean(t, ar, err) for err in m.err_set] for ar in m.ar_set])
            written += [p, write_pgm(outdir / f"accuracy_{t}_{variant}.pgm", grid)]
        p = outdir / f"cases_{variant}.csv"
        _write_cases(p, m, cfg)
        written.append(p)
    for t in types:
        p = outdir / f"significance_{t}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ar", "err", "t", "p", "direction"])
            for ar, err, stat, pv, sign in (tests or {}).get(t, []):
                w.writerow([_num(ar), _num(err), f"{stat:.6f}", f"{pv:.6g}", sign])
        written.append(p)
    return written

