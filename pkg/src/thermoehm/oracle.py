"""Reference solvers for verification.

``FullFieldSolver`` resolves the periodic voxel boundary value problem with
crystal plasticity at every Gauss point, reusing the mesh code of the
influence module and the constitutive kernel of the reduced-order solver.
The Taylor model imposes the macro strain on every grain.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from . import constitutive as cm
from . import ehm_core
from .errors import ClampHit, NoConvergence
from .voigt import equivalent_strain
from .influence import _CORNERS, PeriodicMesh, factorize, part_stiffness, part_thermal_expansion

MAX_ELEMENTS = 4096
GLOBAL_MAX_ITER = 40
LOCAL_MAX_ITER = 60
GLOBAL_TOL = 1.0e-8
MIXED_TOL = 1.0e-9


@dataclass(frozen=True)
class FullFieldState:
    u: np.ndarray          # fluctuation displacement on free DOFs
    eps_bar: np.ndarray
    sigma_bar: np.ndarray
    eps: np.ndarray        # (npts, 6) Gauss-point strain
    mu: np.ndarray         # (npts, 6)
    sigma: np.ndarray      # (npts, 6)
    slip: cm.SlipState     # (npts, S)
    T: float
    time: float
    T_free: float
    mu_rate: np.ndarray
    iterations: int = 0


def _local_update(L, e, s, table, T, dt, x0):
    """Per-point backward Euler: solve ``x = dmu(L (e - x))`` for all points.

    Returns ``(x, sigma, D, tau, rate)`` with ``D = L (I + G L)^-1`` the
    consistent tangent.
    """
    eye = np.eye(6)

    def resid(x):
        sigma = np.einsum("pij,pj->pi", L, e - x)
        dmu, G, tau, rate = cm.plastic_update(sigma, s, table.z, table.params, T, dt,
                                              active=table.active)
        return x - dmu, sigma, G, tau, rate

    x = x0
    r, sigma, G, tau, rate = resid(x)
    scale = np.maximum(np.abs(e).max(axis=1), 1.0e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampHit)
        for _ in range(LOCAL_MAX_ITER):
            rn = np.abs(r).max(axis=1)
            todo = rn > 1.0e-13 * np.maximum(scale, 1.0e-3)
            if not todo.any():
                break
            J = eye + np.einsum("pij,pjk->pik", G, L)
            dx = -np.linalg.solve(J, r[..., None])[..., 0]
            dx[~todo] = 0.0
            lam = np.ones(len(x))
            for _ in range(40):
                xt = x + lam[:, None] * dx
                rt, st, Gt, taut, ratet = resid(xt)
                bad = ~(np.abs(rt).max(axis=1) < np.maximum(rn, 1e-300) * (1.0 - 1.0e-4 * lam)) & todo
                if not bad.any():
                    break
                lam = np.where(bad, 0.5 * lam, lam)
            else:
                raise NoConvergence("local line search failed")
            x, r, sigma, G, tau, rate = xt, rt, st, Gt, taut, ratet
        else:
            raise NoConvergence("local update did not converge")
    M = eye + np.einsum("pij,pjk->pik", G, L)
    D = np.swapaxes(np.linalg.solve(np.swapaxes(M, 1, 2), L), 1, 2)
    D = 0.5 * (D + np.swapaxes(D, 1, 2))
    return x, sigma, D, tau, rate


class FullFieldSolver:
    """Periodic voxel crystal-plasticity FE model of an RVE."""

    def __init__(self, rve, grains, material):
        if rve.n_voxels > MAX_ELEMENTS:
            raise ValueError(f"full-field oracle limited to {MAX_ELEMENTS} elements")
        self.rve, self.grains, self.material = rve, grains, material
        self.mesh = PeriodicMesh(rve.dims)
        self.part = rve.grain_id.ravel(order="F")
        self.point_part = np.repeat(self.part, 8)
        self.table = cm.build_slip_table(grains, material).take(self.point_part)
        self.alpha = part_thermal_expansion(grains, material)[self.point_part]
        self.weights = np.tile(self.mesh.w, self.mesh.n_elements)  # sums to 1
        self._cache = {}

    @property
    def n_points(self):
        return self.point_part.size

    def _props(self, T):
        if T not in self._cache:
            C = part_stiffness(self.grains, self.material, T)
            mu = np.array([self.material.shear_modulus(g.phase, T) for g in self.grains])
            self._cache = {T: (C[self.point_part], mu[self.point_part])}
        return self._cache[T]

    def initial_state(self, T, T_free=None):
        T = float(T)
        T_free = T if T_free is None else float(T_free)
        npts = self.n_points
        zeros = np.zeros((npts, 6))
        state = FullFieldState(np.zeros(self.mesh.n_free), np.zeros(6), np.zeros(6), zeros, zeros,
                               zeros, cm.initial_state(self.table), T, 0.0, T_free, zeros)
        if T != T_free:
            # elastic thermal mismatch at zero macro strain
            state = self.step(state, ehm_core.IncrementControl(1.0e-12), elastic=True)
            state = replace(state, time=0.0)
        return state

    def _strain(self, u, eps_bar):
        ue = self.mesh.gather(u)
        return (eps_bar[None, None, :] + np.einsum("qia,ea->eqi", self.mesh.B, ue)).reshape(-1, 6)

    def _internal(self, sigma):
        m = self.mesh
        fe = np.einsum("qia,eqi,q->ea", m.B, sigma.reshape(-1, 8, 6), m.w)
        return m.element_forces(fe)

    def step(self, state, control, elastic=False):
        """One implicit increment of the periodic boundary value problem."""
        T = state.T + control.dT
        dt = control.dt
        L, mu = self._props(T)
        tb = self.table
        s = cm.slip_strength(state.slip, tb.params, T, mu)
        if elastic:
            s = np.full_like(s, 1.0e12)
        base = -state.mu - self.alpha * (T - state.T_free)
        mask = control.stress_mask
        si = np.flatnonzero(mask)
        eps_bar = state.eps_bar + np.where(mask, 0.0, control.d_eps)
        if si.size:
            # stress-controlled components start from their previous values
            eps_bar[si] = state.eps_bar[si]
        u = state.u.copy()
        x_prev = state.mu_rate * dt
        m = self.mesh
        w = self.weights

        def evaluate(u, eps_bar, x_guess):
            eps = self._strain(u, eps_bar)
            e = eps + base
            x, sigma, D, tau, rate = _local_update(L, e, s, tb, T, dt, x_guess)
            Ru = self._internal(sigma)
            sig_bar = w @ sigma
            Rs = sig_bar[si] - control.stress_target[si]
            return eps, x, sigma, D, tau, rate, Ru, Rs, sig_bar

        ev = evaluate(u, eps_bar, x_prev)
        iters = 0
        for iters in range(GLOBAL_MAX_ITER + 1):
            eps, x, sigma, D, tau, rate, Ru, Rs, sig_bar = ev
            f_ref = m.h ** 2 * max(1.0, np.abs(sigma).max())
            conv_u = np.abs(Ru).max(initial=0.0) <= GLOBAL_TOL * f_ref
            conv_s = np.abs(Rs).max(initial=0.0) <= MIXED_TOL * max(1.0, np.linalg.norm(sig_bar))
            if conv_u and conv_s:
                break
            if iters == GLOBAL_MAX_ITER:
                raise NoConvergence("full-field Newton did not converge")
            Dq = D.reshape(-1, 8, 6, 6)
            K = m.assemble(m.element_stiffness(Dq))
            lu = factorize(K)
            du_r = lu.solve(-Ru) if lu is not None else np.zeros_like(Ru)
            de = np.zeros(6)
            if si.size:
                # Schur complement on the stress-controlled macro strains
                Kue = m.element_forces(np.einsum("qia,eqij,q->eaj", m.B, Dq, m.w)[:, :, si])
                Kue = np.asarray(Kue).reshape(m.n_free, si.size)
                Kss = np.einsum("p,pij->ij", w, D)[np.ix_(si, si)]
                Y = lu.solve(Kue) if lu is not None else np.zeros_like(Kue)
                S = Kss - Kue.T @ Y
                de[si] = sla.solve(S, -Rs - Kue.T @ du_r)
                du = du_r - Y @ de[si]
            else:
                du = du_r
            rn = np.sqrt(np.sum((Ru / f_ref) ** 2) + np.sum(Rs ** 2))
            lam = 1.0
            for _ in range(20):
                try:
                    trial = evaluate(u + lam * du, eps_bar + lam * de, x)
                except NoConvergence:
                    trial = None
                if trial is not None:
                    tn = np.sqrt(np.sum((trial[6] / f_ref) ** 2) + np.sum(trial[7] ** 2))
                    if tn < (1.0 - 1.0e-4 * lam) * rn or lam < 1.0e-3:
                        break
                lam *= 0.5
            if trial is None:
                raise NoConvergence("full-field line search failed")
            u, eps_bar = u + lam * du, eps_bar + lam * de
            ev = trial
        eps, x, sigma, D, tau, rate, Ru, Rs, sig_bar = ev
        slip = state.slip if elastic else cm.evolve_dislocations(
            state.slip, rate * dt, np.sign(tau), tb.params, T, dt)
        return FullFieldState(u, eps_bar, sig_bar, eps, state.mu + x, sigma, slip, T,
                              state.time + dt, state.T_free, x / dt, iters)

    def advance(self, state, control, max_bisections=ehm_core.MAX_BISECTIONS):
        try:
            return self.step(state, control)
        except NoConvergence:
            if max_bisections <= 0:
                raise
        first, second = control.split(state.sigma_bar)
        mid = self.advance(state, first, max_bisections - 1)
        return self.advance(mid, second, max_bisections - 1)

    def reaction_stress(self, state):
        """Macro stress from boundary reactions of the unwrapped mesh.

        Internal forces are assembled on the non-periodic grid of nodes; the
        first moment of the forces on boundary nodes equals the volume-average
        stress when the interior is in equilibrium.
        """
        m = self.mesh
        nx, ny, nz = m.dims
        fe = np.einsum("qia,eqi,q->ea", m.B, state.sigma.reshape(-1, 8, 6), m.w).reshape(-1, 8, 3)
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        origin = np.stack([a.ravel(order="F") for a in (ix, iy, iz)], axis=1)
        grid = origin[:, None, :] + _CORNERS[None]                      # (ne, 8, 3)
        node = grid[..., 0] + (nx + 1) * (grid[..., 1] + (ny + 1) * grid[..., 2])
        nn = (nx + 1) * (ny + 1) * (nz + 1)
        f = np.zeros((nn, 3))
        np.add.at(f, node.ravel(), fe.reshape(-1, 3))
        coords = np.stack(np.unravel_index(np.arange(nn), (nx + 1, ny + 1, nz + 1), order="F"), axis=1)
        on_boundary = np.any((coords == 0) | (coords == np.array([nx, ny, nz])), axis=1)
        x = coords * m.h
        sig = np.einsum("ni,nj->ij", x[on_boundary], f[on_boundary])
        sig = 0.5 * (sig + sig.T)
        return np.array([sig[0, 0], sig[1, 1], sig[2, 2], sig[1, 2], sig[0, 2], sig[0, 1]])


def eqp(state, weights):
    """Equivalent plastic strain of the volume-averaged inelastic strain."""
    return float(equivalent_strain(weights @ state.mu))


def build_taylor_model(grains, material, fractions, T_base):
    """Reduced-order model with uniform grain strains (A = I, P = 0)."""
    tset = ehm_core.taylor_tensor_set(grains, material, fractions, T_base)
    return ehm_core.build_model(grains, material, tset)


def taylor_step(state, control, taylor_model):
    """One Taylor-model increment; every grain carries the macro strain."""
    return ehm_core.step(state, control, taylor_model)


def log_row(state, weights):
    """History row in the same column layout as the reduced-order log."""
    return [state.time, state.T, *state.eps_bar, *state.sigma_bar, eqp(state, weights), state.iterations]


def run_program(program, solver):
    """Integrate a load program with the full-field solver; returns ``(history, state)``."""
    from .driver import increments

    state = solver.initial_state(program.T_initial, program.T_free)
    history = [log_row(state, solver.weights)]
    for _, _, control in increments(program, lambda: state.sigma_bar):
        state = solver.advance(state, control)
        history.append(log_row(state, solver.weights))
    return history, state
