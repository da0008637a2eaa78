"""Grain-level fatigue indicators from converged point states."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoPairs
from .voigt import equivalent_strain


@dataclass(frozen=True)
class FipReport:
    rho_tot: np.ndarray        # per-grain maximum total sessile density (m^-2)
    delta_rho_tot_max: float   # (m^-2)
    pair: tuple                # (i, j) with i < j
    eps_eqp: float


def system_rho_tot(slip, active=None):
    """Per-system sessile density: forward + both reversible buckets + part debris."""
    tot = slip.rho_fwd + slip.rho_rev_plus + slip.rho_rev_minus + slip.rho_deb[..., None]
    if active is not None:
        tot = np.where(active, tot, -np.inf)
    return tot


def grain_rho_tot(slip, active=None):
    """Largest per-system total sessile density in each grain."""
    return system_rho_tot(slip, active).max(axis=-1)


def delta_rho_max(values, graph):
    """Largest absolute difference of ``values`` across adjacent grains.

    Ties resolve to the lexicographically smallest ``(i, j)`` with ``i < j``.
    Returns ``(delta, (i, j))``.
    """
    values = np.asarray(values, dtype=float)
    edges = graph.edges()
    if values.size < 2 or not edges:
        raise NoPairs("at least two adjacent grains are required")
    e = np.array(sorted(edges))
    diff = np.abs(values[e[:, 0]] - values[e[:, 1]])
    k = int(np.argmax(diff))  # first maximum in sorted order
    return float(diff[k]), (int(e[k, 0]), int(e[k, 1]))


def eqp(state):
    """Equivalent plastic strain of the volume-averaged inelastic strain."""
    return float(equivalent_strain(state.C @ state.mu))


def report(state, graph, active=None):
    rho = grain_rho_tot(state.slip, active)
    delta, pair = delta_rho_max(rho, graph)
    return FipReport(rho, delta, pair, eqp(state))
