"""Periodic voxel finite elements and EHM coefficient tensors.

One trilinear hexahedron per voxel, 2x2x2 Gauss quadrature, periodic
fluctuation displacements with node 0 pinned. The three linear influence
problems (unit macro strain, unit part eigenstrain, unit temperature rise)
share one stiffness factorization per temperature.

Conventions: Voigt order (11, 22, 33, 23, 13, 12); strains engineering,
stresses tensorial; RVE volume 1, so a part average is an integral divided by
the part volume fraction.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FormatError, OutOfRangeTemperature, SingularSystem
from .material import stiffness_at
from .microstructure import Phase
from .voigt import rotate_stiffness, rotate_tensor2, tensor_to_strain

BASE_TEMPERATURES = (295.0, 373.0, 473.0, 589.0, 700.0, 811.0, 873.0, 923.0)

CACHE_MAGIC = b"EHMC"
CACHE_VERSION = 1

# hex8 corner offsets in the usual counter-clockwise bottom/top ordering
_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])


def hex8_gradient_matrices(h):
    """Strain-displacement matrices of a cube of edge ``h``.

    Returns ``(B, w)`` with ``B`` of shape (8, 6, 24), one per Gauss point, and
    the quadrature weights ``w`` (8,) including the Jacobian, summing to h^3.
    """
    g = 1.0 / np.sqrt(3.0)
    signs = 2.0 * _CORNERS - 1.0
    B = np.zeros((8, 6, 24))
    for q, gp in enumerate(signs * g):
        # dN_a/dx_i = s_ai/8 * prod_{j != i} (1 + s_aj xi_j) * 2/h
        terms = 1.0 + signs * gp
        dN = np.empty((8, 3))
        for i in range(3):
            others = [j for j in range(3) if j != i]
            dN[:, i] = signs[:, i] / 8.0 * terms[:, others[0]] * terms[:, others[1]] * 2.0 / h
        for a in range(8):
            c = 3 * a
            B[q, 0, c] = dN[a, 0]
            B[q, 1, c + 1] = dN[a, 1]
            B[q, 2, c + 2] = dN[a, 2]
            B[q, 3, c + 1], B[q, 3, c + 2] = dN[a, 2], dN[a, 1]
            B[q, 4, c], B[q, 4, c + 2] = dN[a, 2], dN[a, 0]
            B[q, 5, c], B[q, 5, c + 1] = dN[a, 1], dN[a, 0]
    w = np.full(8, (h / 2.0) ** 3)
    return B, w


class PeriodicMesh:
    """Voxel mesh with periodic node numbering and one pinned node.

    Periodic master-slave elimination is realised by numbering nodes modulo the
    grid size, so image nodes share DOFs. The three DOFs of node 0 are removed.
    """

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        nx, ny, nz = self.dims
        self.n_elements = nx * ny * nz
        self.h = self.n_elements ** (-1.0 / 3.0)
        self.B, self.w = hex8_gradient_matrices(self.h)
        self.Bint = np.einsum("q,qia->ia", self.w, self.B)  # element integral of B

        # element (ix, iy, iz) in x-fastest order matches grain_id.ravel(order="F")
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        ix, iy, iz = (a.ravel(order="F") for a in (ix, iy, iz))
        nodes = (((ix[:, None] + _CORNERS[:, 0]) % nx)
                 + nx * (((iy[:, None] + _CORNERS[:, 1]) % ny)
                         + ny * ((iz[:, None] + _CORNERS[:, 2]) % nz)))
        self.elem_nodes = nodes
        self.n_dofs = 3 * self.n_elements
        self.elem_dofs = (3 * nodes[:, :, None] + np.arange(3)).reshape(-1, 24)

        free = np.ones(self.n_dofs, dtype=bool)
        free[:3] = False
        self.free_index = np.full(self.n_dofs, -1, dtype=np.int64)
        self.free_index[free] = np.arange(free.sum())
        self.n_free = int(free.sum())

        # element-local to free-DOF scatter, pinned DOFs dropped
        loc = self.free_index[self.elem_dofs].ravel()
        keep = loc >= 0
        self.scatter = sp.csr_matrix(
            (np.ones(keep.sum()), (loc[keep], np.flatnonzero(keep))),
            shape=(self.n_free, self.n_elements * 24))

        # sparsity pattern of the stiffness; repeated periodic images are summed
        r = np.repeat(loc.reshape(-1, 24), 24, axis=1).ravel()
        c = np.tile(loc.reshape(-1, 24), (1, 24)).ravel()
        keep = (r >= 0) & (c >= 0)
        key = r[keep] * max(self.n_free, 1) + c[keep]
        uniq, self._inverse = np.unique(key, return_inverse=True)
        self._keep = keep
        self._rows = uniq // max(self.n_free, 1)
        self._cols = uniq % max(self.n_free, 1)

    def element_stiffness(self, C):
        """Element stiffness for a per-element (ne, 6, 6) or per-point (ne, 8, 6, 6) tangent."""
        C = np.asarray(C, dtype=float)
        if C.ndim == 3:
            return np.einsum("qia,eij,qjb,q->eab", self.B, C, self.B, self.w, optimize=True)
        return np.einsum("qia,eqij,qjb,q->eab", self.B, C, self.B, self.w, optimize=True)

    def assemble(self, Ke):
        """Global stiffness on free DOFs from element matrices (ne, 24, 24)."""
        data = np.bincount(self._inverse, weights=np.asarray(Ke).ravel()[self._keep],
                           minlength=self._rows.size)
        return sp.csc_matrix((data, (self._rows, self._cols)), shape=(self.n_free, self.n_free))

    def gather(self, u):
        """Element DOF vectors (ne, 24) from a free-DOF vector."""
        return np.asarray(self.scatter.T @ u).reshape(self.n_elements, 24)

    def element_forces(self, fe):
        """Assemble element vectors (ne, 24[, k]) onto free DOFs."""
        fe = np.asarray(fe)
        return self.scatter @ fe.reshape(self.n_elements * 24, -1) if fe.ndim == 3 \
            else self.scatter @ fe.ravel()


def factorize(K):
    """Sparse LU of an SPD stiffness; raises SingularSystem on failure."""
    if K.shape[0] == 0:
        return None
    try:
        return spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A",
                         options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc


def solve(lu, F):
    if lu is None:
        return np.zeros_like(F)
    x = lu.solve(np.asarray(F, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite solution of the influence system")
    return x


# ---------------------------------------------------------------- problems

@dataclass
class PeriodicFeProblem:
    """Assembled influence system at one temperature.

    ``C_part`` holds sample-frame stiffness per part, ``alpha_part`` the
    engineering-Voigt thermal expansion per part.
    """
    mesh: PeriodicMesh
    part: np.ndarray       # per-element part index
    n_parts: int
    C_part: np.ndarray     # (n, 6, 6)
    alpha_part: np.ndarray  # (n, 6)
    K: sp.csc_matrix
    lu: object

    @property
    def fractions(self):
        return np.bincount(self.part, minlength=self.n_parts) / self.mesh.n_elements

    def eigen_loads(self):
        """Loads of unit eigenstrains per part: (n_free, 6n), column 6*alpha + k."""
        m = self.mesh
        blocks = np.einsum("ia,eij->eaj", m.Bint, self.C_part[self.part])  # (ne, 24, 6)
        rows = np.repeat(np.arange(m.n_elements * 24), 6)
        cols = (6 * np.repeat(self.part, 24 * 6) + np.tile(np.arange(6), m.n_elements * 24))
        G = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(m.n_elements * 24, 6 * self.n_parts))
        return (m.scatter @ G).toarray()

    def part_average_operator(self):
        """Sparse (6n, n_free) map from displacement to part-average strain."""
        m = self.mesh
        frac = self.fractions
        loc = m.free_index[m.elem_dofs]  # (ne, 24)
        vals = m.Bint[None, :, :] / frac[self.part][:, None, None]  # (ne, 6, 24)
        rows = (6 * self.part[:, None, None] + np.arange(6)[None, :, None]) * np.ones((1, 1, 24), int)
        cols = np.broadcast_to(loc[:, None, :], vals.shape)
        keep = (cols >= 0) & (vals != 0.0)
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])),
                             shape=(6 * self.n_parts, m.n_free))


def part_thermal_expansion(grains, material):
    """Sample-frame thermal expansion per grain as engineering Voigt vectors (n, 6)."""
    return np.array([tensor_to_strain(rotate_tensor2(material.thermal[Phase(rec.phase)].alpha,
                                                     rec.rotation)) for rec in grains])


def part_stiffness(grains, material, T):
    """Sample-frame stiffness per grain (n, 6, 6) at temperature ``T``."""
    C = np.array([rotate_stiffness(stiffness_at(material.elastic[Phase(rec.phase)], T), rec.rotation)
                  for rec in grains])
    return 0.5 * (C + np.swapaxes(C, 1, 2))


def part_properties(rve, grains, material, T):
    """Sample-frame stiffness (n, 6, 6) and engineering thermal expansion (n, 6)."""
    if len(grains) != rve.n_grains:
        raise ValueError("one grain record per grain ID is required")
    return part_stiffness(grains, material, T), part_thermal_expansion(grains, material)


def build_problem(rve, grains, material, T, mesh=None):
    mesh = mesh or PeriodicMesh(rve.dims)
    part = rve.grain_id.ravel(order="F")
    C, alpha = part_properties(rve, grains, material, T)
    K = mesh.assemble(mesh.element_stiffness(C[part]))
    return PeriodicFeProblem(mesh, part, rve.n_grains, C, alpha, K, factorize(K))


def solve_elastic_influence(problem):
    """Per-part average fluctuation strains (n, 6, 6) for the six unit macro strains."""
    S = problem.part_average_operator()
    F = -problem.eigen_loads().reshape(problem.mesh.n_free, problem.n_parts, 6).sum(axis=1)
    U = solve(problem.lu, F)
    return np.asarray(S @ U).reshape(problem.n_parts, 6, 6)


def solve_inelastic_influence(problem):
    """Interaction tensors P (n, n, 6, 6) indexed ``P[beta, alpha]``."""
    S = problem.part_average_operator()
    U = solve(problem.lu, problem.eigen_loads())
    n = problem.n_parts
    return np.asarray(S @ U).reshape(n, 6, n, 6).transpose(0, 2, 1, 3)


def solve_thermal_influence(problem, alphas=None):
    """Thermal strain tensors (n, 6) for a unit temperature rise."""
    alphas = problem.alpha_part if alphas is None else np.asarray(alphas, dtype=float)
    S = problem.part_average_operator()
    F = problem.eigen_loads() @ alphas.ravel()
    U = solve(problem.lu, F[:, None])
    return np.asarray(S @ U).reshape(problem.n_parts, 6)


def _solve_all(problem):
    """All 6n+7 influence solves as one block against the shared factorization."""
    n = problem.n_parts
    S = problem.part_average_operator()
    E = problem.eigen_loads()
    F = np.empty((problem.mesh.n_free, 6 * n + 7))
    F[:, :6] = -E.reshape(-1, n, 6).sum(axis=1)
    F[:, 6:6 + 6 * n] = E
    F[:, -1] = E @ problem.alpha_part.ravel()
    avg = np.asarray(S @ solve(problem.lu, F))
    A = np.eye(6)[None] + avg[:, :6].reshape(n, 6, 6)
    P = avg[:, 6:6 + 6 * n].reshape(n, 6, n, 6).transpose(0, 2, 1, 3)
    Ath = avg[:, -1].reshape(n, 6)
    return A, P, Ath


# ---------------------------------------------------------------- tensor sets

@dataclass(frozen=True)
class CoefficientTensors:
    """Coefficient tensors at a single temperature."""
    T: float
    A: np.ndarray     # (n, 6, 6)
    P: np.ndarray     # (n, n, 6, 6), P[beta, alpha]
    M: np.ndarray     # (n, 6, 6) compliance
    Ath: np.ndarray   # (n, 6)
    C: np.ndarray     # (n,)

    @property
    def n_parts(self):
        return self.C.size

    @property
    def P_matrix(self):
        """Dense (6n, 6n) block matrix with row block beta, column block alpha."""
        n = self.n_parts
        return self.P.transpose(0, 2, 1, 3).reshape(6 * n, 6 * n)

    @property
    def L(self):
        """Part stiffnesses (inverse compliances)."""
        return np.linalg.inv(self.M)

    def homogenized_stiffness(self):
        return np.einsum("b,bij,bjk->ik", self.C, self.L, self.A)


@dataclass(frozen=True)
class CoefficientTensorSet:
    T_base: np.ndarray  # (nT,)
    A: np.ndarray       # (nT, n, 6, 6)
    P: np.ndarray       # (nT, n, n, 6, 6)
    M: np.ndarray       # (nT, n, 6, 6)
    Ath: np.ndarray     # (nT, n, 6)
    C: np.ndarray       # (n,)

    def __post_init__(self):
        for name in ("T_base", "A", "P", "M", "Ath", "C"):
            arr = np.ascontiguousarray(getattr(self, name), dtype="<f8")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.T_base) <= 0):
            raise ValueError("base temperatures must be strictly increasing")

    @property
    def n_parts(self):
        return self.C.size

    def slab(self, k):
        return CoefficientTensors(float(self.T_base[k]), self.A[k], self.P[k], self.M[k],
                                  self.Ath[k], self.C)

    def consistency_residuals(self):
        """Max-abs residuals of the three consistency sums, per base temperature."""
        eye = np.eye(6)
        rA = np.abs(np.einsum("b,tbij->tij", self.C, self.A) - eye).max(axis=(1, 2))
        rP = np.abs(np.einsum("b,tbaij->taij", self.C, self.P)).max(axis=(1, 2, 3))
        rT = np.abs(np.einsum("b,tbi->ti", self.C, self.Ath)).max(axis=1)
        return rA, rP, rT


def assemble_set(rve, grains, material, T_base=BASE_TEMPERATURES, progress=None):
    """Coefficient tensors of every part at each base temperature."""
    T_base = np.asarray(T_base, dtype=float)
    if np.any(np.diff(T_base) <= 0):
        raise ValueError("base temperatures must be strictly increasing")
    mesh = PeriodicMesh(rve.dims)
    n = rve.n_grains
    out = {k: [] for k in ("A", "P", "M", "Ath")}
    for T in T_base:
        prob = build_problem(rve, grains, material, T, mesh)
        A, P, Ath = _solve_all(prob)
        out["A"].append(A)
        out["P"].append(P)
        out["M"].append(np.linalg.inv(prob.C_part))
        out["Ath"].append(Ath)
        if progress:
            progress(T)
    frac = np.bincount(rve.grain_id.ravel(), minlength=n) / rve.n_voxels
    return CoefficientTensorSet(T_base, *(np.stack(out[k]) for k in ("A", "P", "M", "Ath")), frac)


def interpolate(tset, T):
    """Piecewise-linear interpolation of every coefficient in temperature."""
    Tb = tset.T_base
    T = float(T)
    if not Tb[0] <= T <= Tb[-1]:
        raise OutOfRangeTemperature(f"T={T} K outside cached range [{Tb[0]}, {Tb[-1]}]")
    k = int(np.searchsorted(Tb, T, side="right")) - 1
    if k >= Tb.size - 1 or T == Tb[k]:
        return tset.slab(min(k, Tb.size - 1))
    t = (T - Tb[k]) / (Tb[k + 1] - Tb[k])

    def mix(a):
        return (1.0 - t) * a[k] + t * a[k + 1]

    return CoefficientTensors(T, mix(tset.A), mix(tset.P), mix(tset.M), mix(tset.Ath), tset.C)


# ---------------------------------------------------------------- binary cache

def write_cache(path, tset):
    """Little-endian binary cache; see ``read_cache`` for the layout."""
    n, nT = tset.n_parts, tset.T_base.size
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", CACHE_MAGIC, CACHE_VERSION, n, nT))
        fh.write(tset.T_base.astype("<f8").tobytes())
        for k in range(nT):
            for arr in (tset.A[k], tset.P[k], tset.M[k], tset.Ath[k]):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(tset.C.astype("<f8").tobytes())


def read_cache(path):
    """Read a cache written by ``write_cache``.

    Layout: magic ``EHMC``, u32 version, u32 n_parts, u32 n_temps, f64
    temperatures, then per temperature the row-major f64 slabs A (n,6,6),
    P (n,n,6,6), M (n,6,6), thermal (n,6); finally the n volume fractions.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a coefficient cache")
    _, version, n, nT = struct.unpack_from("<4sIII", raw, 0)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    sizes = (36 * n, 36 * n * n, 36 * n, 6 * n)
    expected = 16 + 8 * (nT + nT * sum(sizes) + n)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=16)
    T_base, pos = data[:nT], nT
    slabs = {k: [] for k in range(4)}
    for _ in range(nT):
        for j, size in enumerate(sizes):
            slabs[j].append(data[pos:pos + size])
            pos += size
    A = np.stack(slabs[0]).reshape(nT, n, 6, 6)
    P = np.stack(slabs[1]).reshape(nT, n, n, 6, 6)
    M = np.stack(slabs[2]).reshape(nT, n, 6, 6)
    Ath = np.stack(slabs[3]).reshape(nT, n, 6)
    return CoefficientTensorSet(T_base.copy(), A, P, M, Ath, data[pos:pos + n].copy())
