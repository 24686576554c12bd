"""Synthetic abdominal phantoms: deformed ellipsoidal organs with Gaussian noise.

Randomness comes from numpy's Philox4x64-10 counter-based generator seeded
through ``SeedSequence``, so volumes are reproducible bit for bit across
platforms for a given spec and seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotate import SubjectRecord
from .qc import AtlasDatabase
from .volgrid import VolumeGrid, read_volume, write_volume

__all__ = [
    "OrganSpec",
    "PhantomSpec",
    "default_spec",
    "generate_phantom",
    "generate_cohort",
    "subject_seed",
    "save_cohort",
    "load_cohort",
]


@dataclass(frozen=True)
class OrganSpec:
    """Ellipsoid organ. Centers and radii are ``(z, y, x)`` in voxels.

    ``shell`` > 0 turns the ellipsoid into a shell of that thickness
    (voxels), measured inward from the outer surface.
    """

    name: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    mean: float
    sigma: float
    shell: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    organs: tuple[OrganSpec, ...] = ()
    background_mean: float = 0.3
    background_sigma: float = 0.04
    target: str = "liver"
    # residual pose/shape variability after an (implicit) affine alignment
    center_jitter: float = 0.5
    radius_jitter: float = 0.01
    shape_jitter: float = 0.04
    gap: int = 1
    max_retries: int = 200

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad phantom shape {self.shape}")
        names = [o.name for o in self.organs]
        if len(set(names)) != len(names):
            raise ValueError("organ names must be unique")
        if self.organs and self.target not in names:
            raise ValueError(f"target {self.target!r} is not among the organs")
        if self.center_jitter < 0 or not 0 <= self.radius_jitter < 1:
            raise ValueError("jitter out of range")
        if not 0 <= self.shape_jitter < 0.5:
            raise ValueError("shape_jitter must lie in [0, 0.5)")
        for o in self.organs:
            if min(o.radii) <= 0 or o.sigma < 0:
                raise ValueError(f"organ {o.name!r}: radii must be > 0 and sigma >= 0")
        values = [self.background_mean] + [o.mean for o in self.organs]
        if not all(np.isfinite(np.float32(v)) for v in values):
            raise ValueError("intensities must fit FLOAT32")


def default_spec(shape=(64, 64, 64), **overrides) -> PhantomSpec:
    """Liver (target, largest), spleen, two kidneys, spine and aorta.

    Positions and sizes scale with ``shape``. The spine and aorta run
    through the whole z extent, so every transverse slice shows an organ.
    """
    s = np.asarray(shape, dtype=float)

    def at(fz, fy, fx):
        return (fz * s[0], fy * s[1], fx * s[2])

    organs = (
        OrganSpec("liver", at(0.50, 0.45, 0.30), at(0.30, 0.27, 0.21), 0.60, 0.04),
        OrganSpec("spleen", at(0.52, 0.38, 0.76), at(0.16, 0.14, 0.12), 0.70, 0.04),
        OrganSpec("kidney_left", at(0.42, 0.74, 0.71), at(0.12, 0.08, 0.07), 0.85, 0.04),
        OrganSpec("kidney_right", at(0.30, 0.78, 0.30), at(0.10, 0.07, 0.07), 0.85, 0.04),
        OrganSpec("spine", at(0.50, 0.86, 0.50), at(0.62, 0.07, 0.07), 0.95, 0.04),
        OrganSpec("aorta", at(0.50, 0.69, 0.52), at(0.62, 0.035, 0.035), 0.80, 0.04),
    )
    params = dict(shape=tuple(int(v) for v in shape), organs=organs) | overrides
    return PhantomSpec(**params)


def subject_seed(master_seed: int, index: int) -> int:
    """Per-subject 64-bit seed derived from the cohort's master seed."""
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


N_BUMPS = 10
BUMP_WIDTH = 0.45


def _bump_field(n, bumps) -> np.ndarray:
    # sum of Gaussian bumps on the unit sphere, bumps given as (direction, amplitude)
    z, y, x = n
    out = 0.0
    for (vz, vy, vx), amp in bumps:
        cos = z * vz + y * vy + x * vx
        out = out + amp * np.exp((cos - 1.0) / BUMP_WIDTH**2)
    return out


def _ellipsoid(shape, center, radii, shell=0.0, bumps=()) -> np.ndarray:
    """Voxels whose centres lie inside the (optionally deformed) ellipsoid.

    ``bumps`` scales the boundary radially by ``1 + sum(a * g(n . v))`` where
    ``n`` is the unit direction in normalised coordinates and ``g`` a
    Gaussian in the angle to the bump direction ``v``.
    """
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    q = [(g + 0.5 - c) / a for g, c, a in zip(grids, center, radii)]
    r2 = sum(v**2 for v in q)
    if len(bumps):
        rho = np.sqrt(r2)
        safe = np.where(rho > 0, rho, 1.0)
        mask = rho <= 1.0 + _bump_field([v / safe for v in q], bumps)
    else:
        mask = r2 <= 1.0
    if shell > 0:
        inner = [max(a - shell, 1e-6) for a in radii]
        ri = sum(((g + 0.5 - c) / a) ** 2 for g, c, a in zip(grids, center, inner))
        mask &= ri > 1.0
    return mask


def _dilate(mask: np.ndarray, gap: int) -> np.ndarray:
    if gap <= 0:
        return mask
    return ndimage.binary_dilation(mask, iterations=gap)


def _random_bumps(rng: np.random.Generator, amplitude: float):
    if amplitude == 0:
        return ()
    dirs = rng.standard_normal((N_BUMPS, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(-amplitude, amplitude, N_BUMPS)
    return tuple((tuple(float(v) for v in d), float(a)) for d, a in zip(dirs, amps))


def _place(spec: PhantomSpec, rng: np.random.Generator):
    """Sample jittered poses until no two organs touch; returns (poses, masks)."""
    for _ in range(spec.max_retries):
        poses, masks = [], {}
        taken = np.zeros(spec.shape, dtype=bool)
        ok = True
        for o in spec.organs:
            offset = rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
            scale = 1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter, 3)
            center = tuple(float(c + dc) for c, dc in zip(o.center, offset))
            radii = tuple(float(r * k) for r, k in zip(o.radii, scale))
            bumps = _random_bumps(rng, spec.shape_jitter) if o.shell == 0 else ()
            m = _ellipsoid(spec.shape, center, radii, o.shell, bumps)
            if not m.any() or (_dilate(m, spec.gap) & taken).any():
                ok = False
                break
            taken |= m
            masks[o.name] = m
            flat = tuple(float(v) for (vec, amp) in bumps for v in (*vec, amp))
            poses.append((o, center, radii, flat))
        if ok:
            return poses, masks
    raise ValueError(f"could not place organs without collision in {spec.max_retries} attempts")


def generate_phantom(spec: PhantomSpec, seed: int, subject_id: int = 0) -> SubjectRecord:
    """One subject: jittered organ poses, piecewise-constant means plus noise."""
    if not spec.organs:
        raise ValueError("phantom spec has no organs")
    rng = _rng(seed)
    poses, masks = _place(spec, rng)
    mean = np.full(spec.shape, spec.background_mean, dtype=np.float64)
    sigma = np.full(spec.shape, spec.background_sigma, dtype=np.float64)
    for o, *_ in poses:
        mean[masks[o.name]] = o.mean
        sigma[masks[o.name]] = o.sigma
    data = (mean + sigma * rng.standard_normal(spec.shape)).astype(np.float32)
    poses = {o.name: (c, r, k) for o, c, r, k in poses}
    return SubjectRecord(
        subject_id, VolumeGrid(data), masks, spec.target, seed=int(seed), poses=poses
    )


def generate_cohort(spec: PhantomSpec, count: int, master_seed: int = 0) -> AtlasDatabase:
    if count < 1:
        raise ValueError("count must be >= 1")
    subjects = [generate_phantom(spec, subject_seed(master_seed, i), i) for i in range(count)]
    return AtlasDatabase(subjects)


# -- persistence -------------------------------------------------------------
#
# cohort.txt:
#   weakseg-cohort 1
#   shape <nz> <ny> <nx>
#   target <name>
#   subject <id> <seed> <image file>
#   organ <id> <name> <mask file> <cz> <cy> <cx> <rz> <ry> <rx> [<vz> <vy> <vx> <amp>]...


def save_cohort(db: AtlasDatabase, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = db.subjects[0]
    nz, ny, nx = first.shape
    lines = ["weakseg-cohort 1", f"shape {nz} {ny} {nx}", f"target {first.target}"]
    for s in db.subjects:
        image = f"subject_{s.id:03d}.mhd"
        write_volume(directory / image, s.volume.data, s.volume.spacing)
        lines.append(f"subject {s.id} {s.seed if s.seed is not None else -1} {image}")
        poses = s.poses
        for name, mask in s.organs.items():
            fname = f"subject_{s.id:03d}_{name}.mhd"
            write_volume(directory / fname, mask.astype(np.uint8))
            c, r, k = poses.get(name, ((0.0,) * 3, (0.0,) * 3, ()))
            pose = " ".join(f"{v:.6f}" for v in (*c, *r, *k))
            lines.append(f"organ {s.id} {name} {fname} {pose}")
    path = directory / "cohort.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_cohort(directory) -> AtlasDatabase:
    directory = Path(directory)
    path = directory / "cohort.txt" if directory.is_dir() else directory
    directory = path.parent
    lines = path.read_text().splitlines()
    if not lines or lines[0].split() != ["weakseg-cohort", "1"]:
        raise ValueError(f"{path}: not a cohort manifest")
    target = "liver"
    subjects: dict[int, dict] = {}
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "target":
            target = parts[1]
        elif parts[0] == "subject":
            data, spacing = read_volume(directory / parts[3])
            seed = int(parts[2])
            subjects[int(parts[1])] = dict(
                volume=VolumeGrid(data, spacing),
                seed=None if seed < 0 else seed,
                organs={},
                poses={},
            )
        elif parts[0] == "organ":
            mask, _ = read_volume(directory / parts[3])
            entry = subjects[int(parts[1])]
            entry["organs"][parts[2]] = mask.astype(bool)
            pose = [float(v) for v in parts[4:]]
            entry["poses"][parts[2]] = (tuple(pose[:3]), tuple(pose[3:6]), tuple(pose[6:]))
    records = [
        SubjectRecord(i, s["volume"], s["organs"], target, seed=s["seed"], poses=s["poses"])
        for i, s in sorted(subjects.items())
    ]
    return AtlasDatabase(records)
