"""Dislocation-density crystal plasticity kernel.

Thermally activated slip with strengths from lattice friction, forest and
debris densities; forest density split into forward and two reversible
buckets. All functions are vectorised over leading axes: slip arrays have
shape ``(..., S)`` where ``S`` is the padded slip-system count, stresses are
Voigt vectors ``(..., 6)`` in MPa.

The same ``plastic_update`` routine drives the reduced-order solver, the
full-field oracle and the Taylor model.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ClampHit, NonPhysicalDensity
from .material import build_slip_systems, FAMILY_SECTION
from .microstructure import Phase
from .voigt import rotate_tensor2, schmid_vector

EXP_CLAMP = 50.0
MAX_SUBSTEP = 1.0e-4   # largest |dgamma| per explicit density substep
MPA = 1.0e6

PARAM_NAMES = ("dF", "dV", "rho_m", "nu_id", "b", "s0_ini", "s_298K", "k1", "D",
               "T_ref_s", "T_hat", "q", "p", "m_hat", "chi", "k_deb", "k_B",
               "rho_for0", "rho_deb0", "g", "eps0_dot")


@dataclass(frozen=True)
class SlipTable:
    """Per-part slip geometry (sample frame) and parameters, padded to a common count.

    ``z`` holds Voigt Schmid vectors (n, S, 6); ``active`` masks the padding;
    ``params`` maps each parameter name to an (n, S) array.
    """
    z: np.ndarray
    active: np.ndarray
    params: dict
    phases: tuple
    family: np.ndarray   # (n, S) family labels, '' on padding

    @property
    def n_parts(self):
        return self.z.shape[0]

    @property
    def n_slip(self):
        return self.z.shape[1]

    def take(self, idx):
        """Table for the parts listed in ``idx`` (e.g. one row per quadrature point)."""
        idx = np.asarray(idx)
        return SlipTable(self.z[idx], self.active[idx],
                         {k: v[idx] for k, v in self.params.items()},
                         tuple(self.phases[i] for i in idx), self.family[idx])


def build_slip_table(grains, material):
    """Sample-frame slip systems and parameters for every grain."""
    per_phase = {ph: build_slip_systems(ph, material.c_over_a) for ph in Phase}
    S = max(len(per_phase[Phase(g.phase)]) for g in grains)
    n = len(grains)
    z = np.zeros((n, S, 6))
    active = np.zeros((n, S), dtype=bool)
    family = np.full((n, S), "", dtype=object)
    params = {k: np.zeros((n, S)) for k in PARAM_NAMES}
    for a, rec in enumerate(grains):
        systems = per_phase[Phase(rec.phase)]
        R = rec.rotation
        for s, sys in enumerate(systems):
            z[a, s] = schmid_vector(rotate_tensor2(sys.Z, R))
            active[a, s] = True
            family[a, s] = sys.family.value
            fp = material.slip[FAMILY_SECTION[sys.family]]
            for k in PARAM_NAMES:
                params[k][a, s] = getattr(fp, k)
        # padding copies the first system's values so every formula stays finite
        for k in PARAM_NAMES:
            params[k][a, len(systems):] = params[k][a, 0]
    for arr in (z, active, *params.values()):
        arr.setflags(write=False)
    return SlipTable(z, active, params, tuple(Phase(g.phase) for g in grains), family)


@dataclass(frozen=True)
class SlipState:
    """Dislocation state; slip arrays (..., S), debris per part (...)."""
    rho_fwd: np.ndarray
    rho_rev_plus: np.ndarray
    rho_rev_minus: np.ndarray
    gamma_acc: np.ndarray
    rho0: np.ndarray          # total forest density at the latest reversal
    last_sign: np.ndarray     # sign of tau at the latest slip, -1/0/+1
    rho_deb: np.ndarray

    @property
    def rho_for(self):
        return self.rho_fwd + self.rho_rev_plus + self.rho_rev_minus

    def take(self, idx):
        return SlipState(*(getattr(self, f)[idx] for f in _STATE_FIELDS))

    def copy(self):
        return SlipState(*(np.array(getattr(self, f)) for f in _STATE_FIELDS))


_STATE_FIELDS = ("rho_fwd", "rho_rev_plus", "rho_rev_minus", "gamma_acc", "rho0",
                 "last_sign", "rho_deb")


def initial_state(table):
    """Virgin state: all forest density forward, no reversible density."""
    p = table.params
    act = table.active
    rho_for0 = np.where(act, p["rho_for0"], 0.0)
    zeros = np.zeros_like(rho_for0)
    return SlipState(rho_for0.copy(), zeros.copy(), zeros.copy(), zeros.copy(),
                     np.array(p["rho_for0"], dtype=float), np.zeros(act.shape),
                     np.array(p["rho_deb0"][..., 0], dtype=float))


def _check(state):
    for f in _STATE_FIELDS:
        v = getattr(state, f)
        if np.any(np.isnan(v)):
            raise NonPhysicalDensity(f"{f} contains NaN")
    for f in ("rho_fwd", "rho_rev_plus", "rho_rev_minus", "rho_deb"):
        if np.any(getattr(state, f) < 0.0):
            raise NonPhysicalDensity(f"{f} is negative")


# ---------------------------------------------------------------- strength

def lattice_strength(params, T):
    """Temperature-dependent friction part ``s0(T)`` (MPa)."""
    return params["s_298K"] - params["s0_ini"] * (1.0 - np.exp((T - params["T_ref_s"]) / params["T_hat"]))


def slip_strength(state, params, T, mu):
    """Slip resistance (MPa) from friction, forest and debris densities.

    ``mu`` is the shear modulus (MPa), scalar or one value per part.
    """
    if T <= 0.0:
        raise ValueError("temperature must be positive")
    _check(state)
    b = params["b"] * 1.0e-6
    mu = np.asarray(mu, dtype=float)[..., None]
    s_for = mu * params["chi"] * b * np.sqrt(state.rho_for)
    x = b * np.sqrt(state.rho_deb)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_deb = np.where(x > 0.0, mu * params["k_deb"] * x * np.log(1.0 / x), 0.0)
    return lattice_strength(params, T) + s_for + s_deb


# ---------------------------------------------------------------- kinetics

def reference_rate(params):
    """Prefactor ``rho_m nu b^2 / 2`` (1/s)."""
    b = params["b"] * 1.0e-6
    return 0.5 * params["rho_m"] * params["nu_id"] * b * b


def slip_rate(tau, s, params, T, active=None, derivative=False):
    """Slip rate (1/s), optionally with its derivative with respect to ``tau`` (1/s/MPa).

    The activation term uses ``|tau|`` and the sign is applied outside, so the
    rate is odd in ``tau``. Exponents above ``EXP_CLAMP`` are clamped and
    reported with a ``ClampHit`` warning; the derivative is zero there.
    """
    tau = np.asarray(tau, dtype=float)
    kT = params["k_B"] * T
    expo = ((np.abs(tau) - s) * MPA * params["dV"] - params["dF"]) / kT
    clamped = expo > EXP_CLAMP
    if active is not None:
        clamped &= active
    if np.any(clamped):
        warnings.warn(f"slip-rate exponent clamped on {int(clamped.sum())} systems", ClampHit,
                      stacklevel=2)
    mag = reference_rate(params) * np.exp(np.minimum(expo, EXP_CLAMP))
    if active is not None:
        mag = np.where(active, mag, 0.0)
    rate = mag * np.sign(tau)
    if not derivative:
        return rate
    dmag = np.where(clamped | (tau == 0.0), 0.0, mag * params["dV"] * MPA / kT)
    return rate, dmag


def plastic_update(sigma, s, z, params, T, dt, active=None):
    """Inelastic strain increment and its stress derivative at given stresses.

    Parameters
    ----------
    sigma : (..., 6) stresses (MPa).
    s : (..., S) frozen strengths (MPa).
    z : (..., S, 6) Schmid vectors.
    params : dict of (..., S) parameter arrays.
    T, dt : temperature (K) and time increment (s).

    Returns
    -------
    dmu : (..., 6) engineering inelastic strain increment ``dt * sum(rate * z)``.
    G : (..., 6, 6) derivative of ``dmu`` with respect to ``sigma``.
    tau, rate : (..., S) resolved shears and slip rates.
    """
    tau = np.einsum("...si,...i->...s", z, sigma)
    rate, drate = slip_rate(tau, s, params, T, active=active, derivative=True)
    dmu = dt * np.einsum("...s,...si->...i", rate, z)
    G = dt * np.einsum("...s,...si,...sj->...ij", drate, z, z)
    return dmu, G, tau, rate


def k2_of(params, gamma_dot, T):
    """Dynamic-recovery coefficient from the drag-stress closure, floored at 0.

    ``k2 = k1 chi b / g * (1 - kT / (D b^3) * ln(|rate| / eps0_dot))``; a zero
    rate uses the reference-rate value ``k1 chi b / g``.
    """
    b = params["b"] * 1.0e-6
    base = params["k1"] * params["chi"] * b / params["g"]
    rate = np.abs(np.asarray(gamma_dot, dtype=float))
    with np.errstate(divide="ignore"):
        log_term = np.where(rate > 0.0, np.log(np.where(rate > 0.0, rate, 1.0) / params["eps0_dot"]), 0.0)
    factor = 1.0 - params["k_B"] * T / (params["D"] * MPA * b ** 3) * log_term
    return np.maximum(base * factor, 0.0)


# ---------------------------------------------------------------- evolution

def evolve_dislocations(state, dgamma, tau_sign, params, T, dt=None, max_substep=MAX_SUBSTEP):
    """Advance densities over slip increments ``dgamma`` (..., S).

    The recovery coefficient uses the rate ``|dgamma| / dt`` (reference rate
    when ``dt`` is None). Densities are integrated by explicit substeps with at
    most ``max_substep`` slip each and floored at zero. A change in the sign of
    slip relative to the stored sign snapshots the total forest density.
    """
    dgamma = np.asarray(dgamma, dtype=float)
    sign = np.asarray(tau_sign, dtype=float)
    if np.any(~np.isfinite(dgamma)):
        raise NonPhysicalDensity("non-finite slip increment")
    moving = (dgamma != 0.0) & (sign != 0.0)
    if not np.any(moving):
        return state
    rate = 0.0 if dt is None else np.abs(dgamma) / dt
    k2 = k2_of(params, rate, T)
    k1, p, m_hat = params["k1"], params["p"], params["m_hat"]
    qb = params["q"] * params["b"] * 1.0e-6

    fwd = np.array(state.rho_fwd, dtype=float)
    rp = np.array(state.rho_rev_plus, dtype=float)
    rm = np.array(state.rho_rev_minus, dtype=float)
    deb = np.array(state.rho_deb, dtype=float)
    reversal = moving & (state.last_sign != 0.0) & (sign != state.last_sign)
    rho0 = np.where(reversal, fwd + rp + rm, state.rho0)
    last_sign = np.where(moving, sign, state.last_sign)

    dg_abs = np.where(moving, np.abs(dgamma), 0.0)
    nsub = max(1, int(np.ceil(dg_abs.max() / max_substep)))
    h = dg_abs / nsub
    pos, neg = moving & (sign > 0.0), moving & (sign < 0.0)
    safe_rho0 = np.where(rho0 > 0.0, rho0, 1.0)
    for _ in range(nsub):
        rf = fwd + rp + rm
        sq = np.sqrt(rf)
        gen = k1 * sq
        d_fwd = (1.0 - p) * gen - k2 * rf
        d_rp = np.where(pos, p * gen - k2 * rp, -gen * (rp / safe_rho0) ** m_hat)
        d_rm = np.where(neg, p * gen - k2 * rm, -gen * (rm / safe_rho0) ** m_hat)
        d_deb = np.sum(qb * k2 * rf * h, axis=-1) * np.sqrt(deb)
        fwd = np.maximum(fwd + d_fwd * h, 0.0)
        rp = np.maximum(rp + d_rp * h, 0.0)
        rm = np.maximum(rm + d_rm * h, 0.0)
        deb = np.maximum(deb + d_deb, 0.0)
    out = SlipState(fwd, rp, rm, state.gamma_acc + dg_abs, rho0, last_sign, deb)
    _check(out)
    return out
