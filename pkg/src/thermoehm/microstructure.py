"""Voxel polycrystal RVEs: generation, orientations, adjacency and file I/O."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InfeasiblePartition

CONVENTION = "BUNGE-ZXZ"


class Phase(str, enum.Enum):
    HCP_alpha = "HCP_alpha"
    BCC_beta = "BCC_beta"


@dataclass(frozen=True)
class GrainRecord:
    orientation: tuple  # (phi1, Phi, phi2) in radians
    phase: Phase = Phase.HCP_alpha

    @property
    def rotation(self):
        return rotation_matrix(self.orientation)


@dataclass(frozen=True)
class VoxelRve:
    """Periodic voxel grid of grain IDs, indexed ``grain_id[ix, iy, iz]``.

    Voxels are cubes of edge ``spacing`` chosen so the RVE volume is 1.
    """
    grain_id: np.ndarray
    n_grains: int
    seed: int = 0

    def __post_init__(self):
        gid = np.array(self.grain_id, dtype=np.int64)
        if gid.ndim != 3:
            raise ValueError("grain_id must be a 3-D array")
        if gid.min() < 0 or gid.max() >= self.n_grains:
            raise ValueError("grain IDs must lie in [0, n_grains)")
        counts = np.bincount(gid.ravel(), minlength=self.n_grains)
        if np.any(counts == 0):
            raise InfeasiblePartition("every grain must own at least one voxel")
        gid.setflags(write=False)
        object.__setattr__(self, "grain_id", gid)

    @property
    def dims(self):
        return tuple(int(d) for d in self.grain_id.shape)

    @property
    def n_voxels(self):
        return int(self.grain_id.size)

    @property
    def spacing(self):
        return self.n_voxels ** (-1.0 / 3.0)

    @property
    def volume_fractions(self):
        counts = np.bincount(self.grain_id.ravel(), minlength=self.n_grains)
        return counts / float(self.n_voxels)


@dataclass(frozen=True)
class AdjacencyGraph:
    neighbors: tuple = field(default_factory=tuple)

    def edges(self):
        """Undirected edges as sorted (i, j) pairs with i < j."""
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]


def rotation_matrix(euler):
    """Crystal-to-sample rotation for Bunge (Z-X-Z) angles.

    Columns are the crystal axes expressed in the sample frame, so a crystal
    vector ``v_c`` maps to ``R @ v_c``.
    """
    phi1, Phi, phi2 = (float(a) for a in euler)
    c1, s1 = np.cos(phi1), np.sin(phi1)
    c, s = np.cos(Phi), np.sin(Phi)
    c2, s2 = np.cos(phi2), np.sin(phi2)
    g = np.array([
        [c1 * c2 - s1 * s2 * c, s1 * c2 + c1 * s2 * c, s2 * s],
        [-c1 * s2 - s1 * c2 * c, -s1 * s2 + c1 * c2 * c, c2 * s],
        [s1 * s, -c1 * s, c],
    ])
    return g.T


def _random_orientations(rng, n):
    phi1 = rng.uniform(0.0, 2.0 * np.pi, n)
    Phi = np.arccos(rng.uniform(-1.0, 1.0, n))
    phi2 = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([phi1, Phi, phi2])


def _fiber_orientations(rng, n, axis, spread):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    d = axis + spread * rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # orient each c-axis into the hemisphere of the fiber axis
    d *= np.where(d @ axis < 0.0, -1.0, 1.0)[:, None]
    Phi = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi1 = np.mod(np.arctan2(d[:, 0], -d[:, 1]), 2.0 * np.pi)
    phi2 = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([phi1, Phi, phi2])


def build_synthetic_rve(dims, n_grains, seed, texture_spec=None):
    """Periodic Voronoi RVE with ``n_grains`` grains.

    ``texture_spec`` keys: ``kind`` ('random' or 'fiber'), ``axis`` and
    ``spread`` (radians, fiber only), ``beta_fraction`` (share of BCC grains).
    Returns ``(rve, grains)``.
    """
    dims = tuple(int(d) for d in dims)
    n_vox = int(np.prod(dims))
    if n_grains < 1 or n_grains > n_vox:
        raise InfeasiblePartition(f"cannot place {n_grains} grains in {n_vox} voxels")
    spec = {"kind": "random", "beta_fraction": 0.1, "axis": (1.0, 0.0, 0.0), "spread": 0.3}
    spec.update(texture_spec or {})
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)

    ijk = np.indices(dims).reshape(3, -1).T
    centers = ijk + 0.5
    while True:
        # seeds sit on distinct voxel centres, so each owns at least its own voxel
        picks = rng.choice(n_vox, size=n_grains, replace=False)
        tree = cKDTree(centers[picks], boxsize=np.array(dims, dtype=float))
        _, owner = tree.query(centers)
        gid = np.asarray(owner, dtype=np.int64).reshape(dims)
        if np.all(np.bincount(gid.ravel(), minlength=n_grains) > 0):
            break

    if spec["kind"] == "random":
        euler = _random_orientations(rng, n_grains)
    elif spec["kind"] == "fiber":
        euler = _fiber_orientations(rng, n_grains, spec["axis"], float(spec["spread"]))
    else:
        raise ValueError(f"unknown texture kind {spec['kind']!r}")
    n_beta = int(round(float(spec["beta_fraction"]) * n_grains))
    beta = np.zeros(n_grains, dtype=bool)
    if n_beta:
        beta[rng.choice(n_grains, size=n_beta, replace=False)] = True
    grains = [GrainRecord(tuple(float(a) for a in euler[g]),
                          Phase.BCC_beta if beta[g] else Phase.HCP_alpha)
              for g in range(n_grains)]
    return VoxelRve(gid, n_grains, seed), grains


def rotate_texture(grains, euler_shift):
    """Return new records with each Bunge angle shifted by ``euler_shift``.

    A shift of the third angle is a rotation about the crystal c-axis
    (``R_new = R_old @ Rz(shift).T``); the first angle rotates about the sample Z axis.
    """
    if not grains:
        raise ValueError("grains must be nonempty")
    shift = np.broadcast_to(np.asarray(euler_shift, dtype=float), (3,))
    return [GrainRecord(tuple(float(a + d) for a, d in zip(g.orientation, shift)), g.phase)
            for g in grains]


def adjacency(rve):
    """Face-sharing neighbours under periodic wraparound."""
    gid = rve.grain_id
    pairs = set()
    for axis in range(3):
        if gid.shape[axis] < 2:
            continue
        other = np.roll(gid, -1, axis=axis)
        mask = gid != other
        a, b = gid[mask], other[mask]
        pairs.update(zip(a.tolist(), b.tolist()))
    nb = [set() for _ in range(rve.n_grains)]
    for a, b in pairs:
        nb[a].add(b)
        nb[b].add(a)
    return AdjacencyGraph(tuple(tuple(sorted(s)) for s in nb))


def write_rve(path, rve, grains):
    lines = [
        "# thermoehm voxel RVE",
        f"dims {rve.dims[0]} {rve.dims[1]} {rve.dims[2]}",
        f"n_grains {rve.n_grains}",
        f"seed {rve.seed}",
        f"convention {CONVENTION}",
        "voxels",
    ]
    flat = rve.grain_id.ravel(order="F")  # x fastest
    for k in range(0, flat.size, 32):
        lines.append(" ".join(str(v) for v in flat[k:k + 32]))
    lines.append("grains")
    for g, rec in enumerate(grains):
        phi1, Phi, phi2 = rec.orientation
        lines.append(f"{g} {rec.phase.value} {phi1!r} {Phi!r} {phi2!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_rve(path):
    header = {}
    voxels, grain_lines = [], []
    section = "header"
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in ("voxels", "grains"):
            section = line
            continue
        if section == "header":
            key, *vals = line.split()
            header[key] = vals
        elif section == "voxels":
            voxels.extend(int(v) for v in line.split())
        else:
            grain_lines.append(line.split())
    try:
        dims = tuple(int(v) for v in header["dims"])
        n_grains = int(header["n_grains"][0])
        seed = int(header.get("seed", ["0"])[0])
        convention = header.get("convention", [CONVENTION])[0]
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"bad RVE header in {path}") from exc
    if convention != CONVENTION:
        raise FormatError(f"unsupported orientation convention {convention}")
    if len(voxels) != int(np.prod(dims)):
        raise FormatError(f"expected {int(np.prod(dims))} voxel IDs, found {len(voxels)}")
    gid = np.array(voxels, dtype=np.int64).reshape(dims, order="F")
    grains = [None] * n_grains
    for parts in grain_lines:
        g = int(parts[0])
        grains[g] = GrainRecord(tuple(float(v) for v in parts[2:5]), Phase(parts[1]))
    if any(g is None for g in grains):
        raise FormatError("missing grain records")
    return VoxelRve(gid, n_grains, seed), grains
