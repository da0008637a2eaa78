"""Reduced-order microscale solver at one macroscale material point.

Part strains follow ``eps = eps_n + A d_eps_bar + Ath dT + P d_mu``; part
stresses are recovered algebraically as
``sigma = L (eps - mu - alpha (T - T_free))`` with ``L`` the inverse part
compliance. Each increment is backward Euler in the inelastic strains with
slip strengths frozen at the start of the increment; dislocation densities are
advanced once the increment has converged.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from . import constitutive as cm
from .errors import ClampHit, NoConvergence
from .influence import (CoefficientTensorSet, interpolate, part_stiffness,
                        part_thermal_expansion)
from .voigt import equivalent_strain

NEWTON_MAX_ITER = 50
MAX_BISECTIONS = 4
REL_TOL = 1.0e-8
ABS_TOL = 1.0e-10          # MPa
MIXED_TOL = 1.0e-9         # relative to max(1 MPa, |sigma_bar|)
MIXED_MAX_ITER = 30


class EhmModel:
    """Coefficient tensors, slip table and thermal expansion of one RVE."""

    def __init__(self, tset, table, material, alpha):
        self.tset = tset
        self.table = table
        self.material = material
        self.alpha = np.asarray(alpha, dtype=float)
        self._at = lru_cache(maxsize=8)(self._tensors)

    @property
    def n_parts(self):
        return self.tset.n_parts

    @property
    def fractions(self):
        return self.tset.C

    def _tensors(self, T):
        ct = interpolate(self.tset, T)
        L = np.linalg.inv(ct.M)
        L = 0.5 * (L + np.swapaxes(L, 1, 2))
        mu = np.array([self.material.shear_modulus(ph, T) for ph in self.table.phases])
        return ct, L, ct.P_matrix, mu

    def tensors(self, T):
        """(coefficients, part stiffness, dense P, part shear moduli) at ``T``."""
        return self._at(float(T))


def build_model(grains, material, tset):
    table = cm.build_slip_table(grains, material)
    return EhmModel(tset, table, material, part_thermal_expansion(grains, material))


def taylor_tensor_set(grains, material, fractions, T_base):
    """Uniform-strain coefficient set: A = I, P = 0, no thermal fluctuation."""
    T_base = np.asarray(T_base, dtype=float)
    n = len(grains)
    M = np.stack([np.linalg.inv(part_stiffness(grains, material, T)) for T in T_base])
    A = np.broadcast_to(np.eye(6), (T_base.size, n, 6, 6))
    return CoefficientTensorSet(T_base, A, np.zeros((T_base.size, n, n, 6, 6)), M,
                                np.zeros((T_base.size, n, 6)), np.asarray(fractions, dtype=float))


@dataclass(frozen=True)
class PointState:
    """Converged state of one material point."""
    eps: np.ndarray         # (n, 6) part total strain
    mu: np.ndarray          # (n, 6) part inelastic strain
    sigma: np.ndarray       # (n, 6) part stress (MPa)
    slip: cm.SlipState
    eps_bar: np.ndarray     # (6,)
    sigma_bar: np.ndarray   # (6,)
    T: float
    time: float
    C: np.ndarray           # part volume fractions
    T_free: float = 298.0   # stress-free temperature of the thermal eigenstrain
    mu_rate: np.ndarray = None     # last inelastic strain rate, Newton predictor
    tangent: np.ndarray = None     # last consistent macro tangent (6, 6)
    iterations: int = 0
    info: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class IncrementControl:
    """One load increment.

    ``d_eps`` gives strain increments of strain-controlled components;
    ``stress_mask`` flags stress-controlled components whose end-of-increment
    values are ``stress_target``.
    """
    dt: float
    d_eps: np.ndarray = field(default_factory=lambda: np.zeros(6))
    stress_mask: np.ndarray = field(default_factory=lambda: np.zeros(6, dtype=bool))
    stress_target: np.ndarray = field(default_factory=lambda: np.zeros(6))
    dT: float = 0.0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        for name in ("d_eps", "stress_target"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(6))
        object.__setattr__(self, "stress_mask", np.asarray(self.stress_mask, dtype=bool).reshape(6))

    def split(self, sigma_bar_now):
        """Two half increments; stress targets are interpolated from the current stress."""
        mid = np.where(self.stress_mask, 0.5 * (sigma_bar_now + self.stress_target), 0.0)
        half = replace(self, dt=0.5 * self.dt, d_eps=0.5 * self.d_eps, dT=0.5 * self.dT)
        return replace(half, stress_target=mid), half


def initial_point_state(model, T, T_free=None):
    """Virgin state at temperature ``T``.

    With ``T_free`` equal to ``T`` (the default) the RVE starts stress free;
    otherwise the thermal mismatch from ``T_free`` is applied elastically at
    zero macro strain.
    """
    T = float(T)
    T_free = T if T_free is None else float(T_free)
    ct, L, _, _ = model.tensors(T)
    n = model.n_parts
    eps = ct.Ath * (T - T_free)
    sigma = np.einsum("aij,aj->ai", L, eps - model.alpha * (T - T_free))
    zeros = np.zeros((n, 6))
    return PointState(eps, zeros.copy(), sigma, cm.initial_state(model.table), np.zeros(6),
                      model.fractions @ sigma, T, 0.0, model.fractions, T_free, zeros.copy(),
                      None, 0)


# ---------------------------------------------------------------- inner solve

class _Increment:
    """Residual and Jacobian of the part inelastic strain increments."""

    def __init__(self, state, model, d_eps_bar, dT, dt):
        T = state.T + dT
        ct, L, Pm, mu = model.tensors(T)
        tb = model.table
        self.n = model.n_parts
        self.L, self.Pm, self.A, self.T, self.dt = L, Pm, ct.A, T, dt
        self.s = cm.slip_strength(state.slip, tb.params, T, mu)
        self.table = tb
        self.eps_trial = state.eps + np.einsum("aij,j->ai", ct.A, d_eps_bar) + ct.Ath * dT
        self.base = self.eps_trial - state.mu - model.alpha * (T - state.T_free)

    def stress(self, x):
        X = x.reshape(self.n, 6)
        return np.einsum("aij,aj->ai", self.L, self.base + (self.Pm @ x).reshape(self.n, 6) - X)

    def evaluate(self, x, jacobian=True):
        sigma = self.stress(x)
        tb = self.table
        dmu, G, tau, rate = cm.plastic_update(sigma, self.s, tb.z, tb.params, self.T, self.dt,
                                              active=tb.active)
        X = x.reshape(self.n, 6)
        r = np.einsum("aij,aj->ai", self.L, X - dmu).ravel()
        if not jacobian:
            return r, None, sigma, G, tau, rate
        n = self.n
        GL = np.einsum("aij,ajk->aik", G, self.L)
        Pm = self.Pm - np.eye(6 * n)
        inner = np.eye(6 * n) - np.einsum("aij,ajb->aib", GL, Pm.reshape(n, 6, 6 * n)).reshape(6 * n, 6 * n)
        J = np.einsum("aij,ajb->aib", self.L, inner.reshape(n, 6, 6 * n)).reshape(6 * n, 6 * n)
        return r, J, sigma, G, tau, rate

    def macro_tangent(self, J, G, C):
        """Consistent d(sigma_bar)/d(eps_bar) at the converged point."""
        n = self.n
        LGLA = np.einsum("aij,ajk,akl,alm->aim", self.L, G, self.L, self.A).reshape(6 * n, 6)
        X = np.linalg.solve(J, LGLA)
        Pm = self.Pm - np.eye(6 * n)
        inner = self.A + (Pm @ X).reshape(n, 6, 6)
        return np.einsum("a,aij,ajk->ik", C, self.L, inner)


def _newton(inc, x0, max_iter=NEWTON_MAX_ITER):
    """Damped Newton on the stacked part residual; returns (x, iterations, last eval)."""
    x = x0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampHit)
        ev = inc.evaluate(x)
        scale = max(np.linalg.norm(inc.stress(np.zeros_like(x))), 1.0)
        tol = max(REL_TOL * scale, ABS_TOL)
        for it in range(max_iter + 1):
            r, J = ev[0], ev[1]
            rn = np.linalg.norm(r)
            if not np.isfinite(rn):
                raise NoConvergence("non-finite residual")
            if rn <= tol:
                return x, it, ev
            if it == max_iter:
                break
            try:
                dx = -sla.solve(J, r, check_finite=False)
            except (sla.LinAlgError, ValueError) as exc:
                raise NoConvergence(f"singular Newton matrix: {exc}") from exc
            lam = 1.0
            for _ in range(30):
                trial = inc.evaluate(x + lam * dx)
                tn = np.linalg.norm(trial[0])
                if np.isfinite(tn) and tn < (1.0 - 1.0e-4 * lam) * rn:
                    break
                lam *= 0.5
            else:
                raise NoConvergence("line search failed")
            x = x + lam * dx
            ev = trial
    raise NoConvergence(f"Newton did not converge in {max_iter} iterations (|r| = {rn:.3e})")


def _solve_strain_increment(state, model, d_eps_bar, dT, dt):
    inc = _Increment(state, model, d_eps_bar, dT, dt)
    zero = np.zeros(6 * model.n_parts)
    x0 = zero
    if state.mu_rate is not None and np.any(state.mu_rate):
        guess = (state.mu_rate * dt).ravel()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ClampHit)
            if np.linalg.norm(inc.evaluate(guess, False)[0]) < np.linalg.norm(inc.evaluate(zero, False)[0]):
                x0 = guess
    x, iters, ev = _newton(inc, x0)
    return inc, x, iters, ev


def _finish(state, model, inc, x, ev, d_eps_bar, dt, dT, iters):
    r, J, sigma, G, tau, rate = ev
    n = model.n_parts
    X = x.reshape(n, 6)
    eps = inc.eps_trial + (inc.Pm @ x).reshape(n, 6)
    # report clamped exponents at the converged state only
    cm.slip_rate(tau, inc.s, model.table.params, inc.T, active=model.table.active)
    slip = cm.evolve_dislocations(state.slip, rate * dt, np.sign(tau), model.table.params, inc.T, dt)
    C = model.fractions
    return PointState(eps, state.mu + X, sigma, slip, state.eps_bar + d_eps_bar, C @ sigma,
                      inc.T, state.time + dt, C, state.T_free, X / dt,
                      inc.macro_tangent(J, G, C), iters)


def residual_and_jacobian(state, model, d_eps_bar, dT, dt, x):
    """Stacked residual (MPa) and analytical Jacobian at trial increments ``x``."""
    inc = _Increment(state, model, np.asarray(d_eps_bar, dtype=float), dT, dt)
    r, J = inc.evaluate(np.asarray(x, dtype=float))[:2]
    return r, J


def _elastic_tangent(state, model, T):
    ct, L, _, _ = model.tensors(T)
    return np.einsum("a,aij,ajk->ik", model.fractions, L, ct.A)


def solve_mixed_control(state, control, model):
    """One increment under mixed strain/stress control, without bisection.

    Stress-controlled components of the macro strain increment are found by an
    outer Newton iteration using the consistent macro tangent.
    """
    mask = control.stress_mask
    d_eps = np.where(mask, 0.0, control.d_eps)
    total_iters = 0
    if not mask.any():
        inc, x, iters, ev = _solve_strain_increment(state, model, d_eps, control.dT, control.dt)
        return _finish(state, model, inc, x, ev, d_eps, control.dt, control.dT, iters)

    D = state.tangent if state.tangent is not None else _elastic_tangent(state, model, state.T + control.dT)
    s_idx, e_idx = np.flatnonzero(mask), np.flatnonzero(~mask)
    # predictor from the last tangent
    rhs = control.stress_target[s_idx] - state.sigma_bar[s_idx] - D[np.ix_(s_idx, e_idx)] @ d_eps[e_idx]
    d_eps[s_idx] = np.linalg.solve(D[np.ix_(s_idx, s_idx)], rhs)
    for _ in range(MIXED_MAX_ITER):
        inc, x, iters, ev = _solve_strain_increment(state, model, d_eps, control.dT, control.dt)
        total_iters += iters
        new = _finish(state, model, inc, x, ev, d_eps, control.dt, control.dT, total_iters)
        err = new.sigma_bar[s_idx] - control.stress_target[s_idx]
        if np.max(np.abs(err)) <= MIXED_TOL * max(1.0, np.linalg.norm(new.sigma_bar)):
            return new
        Dt = new.tangent
        d_eps[s_idx] -= np.linalg.solve(Dt[np.ix_(s_idx, s_idx)], err)
    raise NoConvergence("mixed stress/strain control did not converge")


def step(state, control, model, max_bisections=MAX_BISECTIONS):
    """Advance one increment, halving it up to ``max_bisections`` times on failure."""
    try:
        return solve_mixed_control(state, control, model)
    except NoConvergence:
        if max_bisections <= 0:
            raise
    first, second = control.split(state.sigma_bar)
    mid = step(state, first, model, max_bisections - 1)
    return step(mid, second, model, max_bisections - 1)


def homogenize(state):
    """Macro stress, average plastic strain and equivalent plastic strain."""
    eps_p = state.C @ state.mu
    return state.sigma_bar.copy(), eps_p, float(equivalent_strain(eps_p))


LOG_COLUMNS = (["time", "T"] + [f"eps_bar_{k}" for k in ("11", "22", "33", "23", "13", "12")]
               + [f"sigma_bar_{k}" for k in ("11", "22", "33", "23", "13", "12")]
               + ["eps_eqp", "newton_iterations"])


def log_row(state):
    _, _, eqp = homogenize(state)
    return [state.time, state.T, *state.eps_bar, *state.sigma_bar, eqp, state.iterations]
