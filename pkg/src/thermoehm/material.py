"""Elastic laws, thermal expansion, slip geometry and slip-family parameters.

Units: stress and moduli in MPa, temperature in K, Burgers vector in
micrometres as stored in parameter files (``SlipFamilyParams.b_m`` gives
metres), dislocation densities in m^-2.
"""
from __future__ import annotations

import configparser
import enum
import itertools
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, OutOfRangeTemperature
from .microstructure import Phase
from .voigt import schmid_vector

T_REF_ELASTIC = 298.0
HCP_C_OVER_A = 1.587


class SlipFamily(str, enum.Enum):
    Basal = "Basal"
    Prismatic = "Prismatic"
    PyramidalA = "PyramidalA"
    PyramidalCA = "PyramidalCA"
    BCC110 = "BCC110"
    BCC112 = "BCC112"
    BCC123 = "BCC123"


# parameter-file section holding each family's parameters
FAMILY_SECTION = {
    SlipFamily.Basal: "basal",
    SlipFamily.Prismatic: "prismatic",
    SlipFamily.PyramidalA: "pyramidal_a",
    SlipFamily.PyramidalCA: "pyramidal_ca",
    SlipFamily.BCC110: "bcc",
    SlipFamily.BCC112: "bcc",
    SlipFamily.BCC123: "bcc",
}
HCP_FAMILIES = (SlipFamily.Basal, SlipFamily.Prismatic, SlipFamily.PyramidalA, SlipFamily.PyramidalCA)
BCC_FAMILIES = (SlipFamily.BCC110, SlipFamily.BCC112, SlipFamily.BCC123)


@dataclass(frozen=True)
class SlipSystem:
    family: SlipFamily
    n: np.ndarray  # unit slip direction
    m: np.ndarray  # unit slip-plane normal

    @property
    def Z(self):
        return np.outer(self.n, self.m)


@dataclass(frozen=True)
class SlipFamilyParams:
    dF: float          # activation energy (J)
    dV: float          # activation volume (m^3)
    rho_m: float       # mobile dislocation density (m^-2)
    nu_id: float       # attempt frequency (Hz)
    b: float           # Burgers vector magnitude (um)
    s0_ini: float      # strength parameter s_hat (MPa)
    s_298K: float      # slip resistance at 298 K (MPa)
    k1: float          # generation coefficient (m^-1)
    D: float           # drag stress (MPa)
    T_ref_s: float = 298.0
    T_hat: float = 300.0
    q: float = 4.0
    p: float = 0.8
    m_hat: float = 0.4
    chi: float = 0.9
    k_deb: float = 0.086
    k_B: float = 1.38e-23
    rho_for0: float = 1.0e12
    rho_deb0: float = 1.0e10
    g: float = 0.002        # normalised activation energy of the k2 closure
    eps0_dot: float = 1.0e7  # reference rate of the k2 closure (1/s)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if not 0.0 < self.m_hat <= 1.0:
            raise ValueError("m_hat must lie in (0, 1]")
        for name in ("dF", "dV", "rho_m", "nu_id", "b", "s0_ini", "s_298K", "k1", "D",
                     "T_hat", "q", "chi", "k_deb", "k_B", "rho_for0", "rho_deb0", "g", "eps0_dot"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def b_m(self):
        return self.b * 1.0e-6


@dataclass(frozen=True)
class ElasticLaw:
    C_ref: np.ndarray   # 6x6 at 298 K, crystal frame (MPa)
    dC_dT: np.ndarray   # 6x6 slope (MPa/K)
    valid_range: tuple = (200.0, 1000.0)

    def __post_init__(self):
        C = np.array(self.C_ref, dtype=float)
        dC = np.array(self.dC_dT, dtype=float)
        if not (np.allclose(C, C.T, atol=0.0) and np.allclose(dC, dC.T, atol=0.0)):
            raise ValueError("elastic tensors must be symmetric")
        for T in self.valid_range:
            np.linalg.cholesky(C + dC * (T - T_REF_ELASTIC))
        C.setflags(write=False)
        dC.setflags(write=False)
        object.__setattr__(self, "C_ref", C)
        object.__setattr__(self, "dC_dT", dC)


@dataclass(frozen=True)
class ThermalExpansion:
    alpha: np.ndarray  # symmetric 3x3 (1/K), crystal frame

    @classmethod
    def hexagonal(cls, alpha_a, alpha_c):
        return cls(np.diag([alpha_a, alpha_a, alpha_c]))

    @classmethod
    def cubic(cls, alpha):
        return cls(alpha * np.eye(3))


def stiffness_at(law, T):
    """Stiffness at temperature ``T``: ``C_ref + dC_dT * (T - 298)``."""
    lo, hi = law.valid_range
    if not lo <= T <= hi:
        raise OutOfRangeTemperature(f"T={T} K outside elastic range [{lo}, {hi}]")
    C = law.C_ref + law.dC_dT * (T - T_REF_ELASTIC)
    return 0.5 * (C + C.T)


def voigt_shear_modulus(C):
    """Voigt-average isotropic shear modulus of a 6x6 stiffness."""
    C = np.asarray(C)
    a = C[0, 0] + C[1, 1] + C[2, 2]
    b = C[0, 1] + C[0, 2] + C[1, 2]
    c = C[3, 3] + C[4, 4] + C[5, 5]
    return (a - b + 3.0 * c) / 15.0


def hexagonal_stiffness(C11, C12, C13, C33, C44):
    C = np.zeros((6, 6))
    C[0, 0] = C[1, 1] = C11
    C[2, 2] = C33
    C[0, 1] = C[1, 0] = C12
    C[0, 2] = C[2, 0] = C[1, 2] = C[2, 1] = C13
    C[3, 3] = C[4, 4] = C44
    C[5, 5] = 0.5 * (C11 - C12)
    return C


def cubic_stiffness(C11, C12, C44):
    C = np.full((3, 3), C12) + np.eye(3) * (C11 - C12)
    out = np.zeros((6, 6))
    out[:3, :3] = C
    out[3:, 3:] = np.eye(3) * C44
    return out


# ---------------------------------------------------------------- slip geometry

def _signed_permutations(idx, positions):
    """All index sign/permutation variants, permuting only ``positions``."""
    out = set()
    base = list(idx)
    for perm in itertools.permutations([base[p] for p in positions]):
        v = list(base)
        for p, val in zip(positions, perm):
            v[p] = val
        for signs in itertools.product((1, -1), repeat=len(v)):
            out.add(tuple(s * x for s, x in zip(signs, v)))
    return out


def _canonical(v):
    """Representative of ``{v, -v}``: first nonzero entry positive."""
    for x in v:
        if x != 0:
            return tuple(v) if x > 0 else tuple(-y for y in v)
    return tuple(v)


def _hcp_family(plane, direction):
    # Miller-Bravais (h k i l) / [u v t w]; permute the three basal indices only
    planes = {_canonical(p) for p in _signed_permutations(plane, (0, 1, 2)) if p[0] + p[1] + p[2] == 0}
    dirs = {_canonical(d) for d in _signed_permutations(direction, (0, 1, 2)) if d[0] + d[1] + d[2] == 0}
    pairs = [(p, d) for p in sorted(planes) for d in sorted(dirs)
             if p[0] * d[0] + p[1] * d[1] + p[2] * d[2] + p[3] * d[3] == 0]
    return pairs


def _hcp_vectors(plane, direction, c_over_a):
    a1 = np.array([1.0, 0.0, 0.0])
    a2 = np.array([-0.5, np.sqrt(3.0) / 2.0, 0.0])
    a3 = -(a1 + a2)
    c = np.array([0.0, 0.0, c_over_a])
    u, v, t, w = direction
    n = u * a1 + v * a2 + t * a3 + w * c
    # plane normal from the reciprocal basis of (a1, a2, c)
    basis = np.column_stack([a1, a2, c])
    recip = np.linalg.inv(basis).T
    h, k, _, l = plane
    m = recip @ np.array([h, k, l], dtype=float)
    return n / np.linalg.norm(n), m / np.linalg.norm(m)


def _bcc_family(plane):
    planes = {_canonical(p) for p in _signed_permutations(plane, (0, 1, 2))}
    dirs = {_canonical(d) for d in _signed_permutations((1, 1, 1), (0, 1, 2))}
    return [(p, d) for p in sorted(planes) for d in sorted(dirs)
            if sum(a * b for a, b in zip(p, d)) == 0]


def build_slip_systems(phase, c_over_a=HCP_C_OVER_A):
    """Slip systems in the crystal frame: 24 for HCP, 48 for BCC."""
    phase = Phase(phase)
    systems = []
    if phase is Phase.HCP_alpha:
        table = [
            (SlipFamily.Basal, (0, 0, 0, 1), (2, -1, -1, 0)),
            (SlipFamily.Prismatic, (1, 0, -1, 0), (2, -1, -1, 0)),
            (SlipFamily.PyramidalA, (1, 0, -1, 1), (2, -1, -1, 0)),
            (SlipFamily.PyramidalCA, (1, 0, -1, 1), (1, 1, -2, 3)),
        ]
        for fam, plane, direction in table:
            for p, d in _hcp_family(plane, direction):
                n, m = _hcp_vectors(p, d, c_over_a)
                systems.append(SlipSystem(fam, n, m))
    else:
        for fam, plane in ((SlipFamily.BCC110, (1, 1, 0)), (SlipFamily.BCC112, (1, 1, 2)),
                           (SlipFamily.BCC123, (1, 2, 3))):
            for p, d in _bcc_family(plane):
                n = np.array(d, dtype=float) / np.linalg.norm(d)
                m = np.array(p, dtype=float) / np.linalg.norm(p)
                systems.append(SlipSystem(fam, n, m))
    return systems


def resolved_shear(Z, sigma):
    """Resolved shear ``sigma_ij Z_ij``; ``sigma`` is a 3x3 tensor or Voigt 6-vector."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape == (6,):
        return float(schmid_vector(Z) @ sigma)
    return float(np.einsum("ij,ij->", sigma, Z))


# ---------------------------------------------------------------- database

@dataclass(frozen=True)
class MaterialDB:
    elastic: dict          # Phase -> ElasticLaw
    thermal: dict          # Phase -> ThermalExpansion
    slip: dict             # section name -> SlipFamilyParams
    c_over_a: float = HCP_C_OVER_A
    T0: float = 298.0      # stress-free reference temperature (K)
    source: str = field(default="", compare=False)

    def family_params(self, family):
        return self.slip[FAMILY_SECTION[SlipFamily(family)]]

    def shear_modulus(self, phase, T):
        return voigt_shear_modulus(stiffness_at(self.elastic[Phase(phase)], T))

    def with_params(self, updates):
        """Copy with slip parameters replaced; keys look like ``'k1.basal'``."""
        slip = dict(self.slip)
        for key, value in updates.items():
            name, _, section = key.partition(".")
            section = section.lower()
            if section not in slip:
                raise KeyError(f"unknown slip family section {section!r}")
            slip[section] = replace(slip[section], **{name: float(value)})
        return replace(self, slip=slip)

    def get_param(self, key):
        name, _, section = key.partition(".")
        return float(getattr(self.slip[section.lower()], name))


_GENERAL_KEYS = ("T_ref_s", "T_hat", "q", "p", "m_hat", "chi", "k_deb", "k_B",
                 "rho_for0", "rho_deb0", "g", "eps0_dot")
_FAMILY_KEYS = ("dF", "dV", "rho_m", "nu_id", "b", "s0_ini", "s_298K", "k1", "D")
_SLIP_SECTIONS = ("basal", "prismatic", "pyramidal_a", "pyramidal_ca", "bcc")


def _floats(section, keys):
    try:
        return {k: float(section[k]) for k in keys}
    except KeyError as exc:
        raise FormatError(f"missing key {exc} in section [{section.name}]") from exc


BUILTIN_SETS = {"table1": "ti6242s_table1.cfg", "demo": "ti6242s_demo.cfg"}


def load_material(path=None):
    """Read a parameter file.

    ``None`` loads the shipped ``table1`` defaults; the names ``"table1"`` and
    ``"demo"`` select a shipped set unless a file of that name exists.
    """
    if path is None:
        path = "table1"
    if str(path) in BUILTIN_SETS and not Path(path).exists():
        source = BUILTIN_SETS[str(path)]
        text = resources.files("thermoehm.data").joinpath(source).read_text()
    else:
        text = Path(path).read_text()
        source = str(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)

    general = cp["general"] if cp.has_section("general") else {}
    defaults = {k: float(general[k]) for k in _GENERAL_KEYS if k in general}
    slip = {}
    for name in _SLIP_SECTIONS:
        sec = f"slip.{name}"
        if not cp.has_section(sec):
            raise FormatError(f"missing section [{sec}]")
        vals = dict(defaults)
        vals.update(_floats(cp[sec], _FAMILY_KEYS))
        vals.update({k: float(cp[sec][k]) for k in _GENERAL_KEYS if k in cp[sec]})
        slip[name] = SlipFamilyParams(**vals)

    elastic = {}
    for phase in Phase:
        sec = cp[f"elastic.{phase.value}"]
        sym = sec.get("symmetry", "hexagonal").strip()
        lo, hi = float(sec.get("T_min", "200")), float(sec.get("T_max", "1000"))
        if sym == "hexagonal":
            keys = ("C11", "C12", "C13", "C33", "C44")
            build = hexagonal_stiffness
        elif sym == "cubic":
            keys = ("C11", "C12", "C44")
            build = cubic_stiffness
        else:
            raise FormatError(f"unknown elastic symmetry {sym!r}")
        C = build(**_floats(sec, keys))
        dC = build(**{k: float(sec[f"d{k}_dT"]) for k in keys})
        elastic[phase] = ElasticLaw(C, dC, (lo, hi))

    th_a = cp["thermal.HCP_alpha"]
    th_b = cp["thermal.BCC_beta"]
    thermal = {
        Phase.HCP_alpha: ThermalExpansion.hexagonal(float(th_a["alpha_a"]), float(th_a["alpha_c"])),
        Phase.BCC_beta: ThermalExpansion.cubic(float(th_b["alpha"])),
    }
    c_over_a = float(general.get("c_over_a", HCP_C_OVER_A)) if general else HCP_C_OVER_A
    T0 = float(general.get("T0", 298.0)) if general else 298.0
    return MaterialDB(elastic, thermal, slip, c_over_a, T0, source)


def demo_material():
    """Well-posed demonstration parameter set (see the README)."""
    return load_material("demo")
