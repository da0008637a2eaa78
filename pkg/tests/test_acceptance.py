"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the collected verdicts are
repeated in the terminal summary.
"""
import filecmp
import time

import numpy as np
import pytest

from thermoehm import constitutive as cm
from thermoehm import driver as dr
from thermoehm import ehm_core as ec
from thermoehm import fip
from thermoehm import influence as inf
from thermoehm import microstructure as ms
from thermoehm import oracle
from thermoehm.errors import EhmError

QS, HS = dr.QS_RATE, dr.HS_RATE
VERDICTS = []


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def _tension(rate, strain, increments):
    dt = strain / rate / increments
    return ec.IncrementControl(dt, np.array([rate * dt, 0, 0, 0, 0, 0]),
                               np.array([False, True, True, True, True, True]), np.zeros(6))


def _curve(model, T, rate, strain, increments):
    """Macro (eps11, sig11) after each increment of uniaxial tension."""
    st = ec.initial_point_state(model, T)
    ctl = _tension(rate, strain, increments)
    out = []
    for _ in range(increments):
        st = ec.step(st, ctl, model)
        out.append((st.eps_bar[0], st.sigma_bar[0]))
    return np.array(out)


@pytest.fixture(scope="module")
def rve145():
    return ms.build_synthetic_rve((16, 16, 16), 145, 1)


@pytest.fixture(scope="module")
def tset145(rve145, table1):
    t0 = time.perf_counter()
    ts = inf.assemble_set(*rve145, table1, T_base=inf.BASE_TEMPERATURES)
    return ts, time.perf_counter() - t0


def test_criterion_1_consistency_sums(tset145):
    ts, elapsed = tset145
    eye = np.eye(6)
    a = p = th = 0.0
    for k in range(ts.T_base.size):
        a = max(a, np.abs(np.einsum("b,bij->ij", ts.C, ts.A[k]) - eye).max())
        p = max(p, np.abs(np.einsum("b,baij->aij", ts.C, ts.P[k])).max())
        th = max(th, np.abs(ts.C @ ts.Ath[k]).max())
    ok = (len(ts.T_base) == 8 and ts.n_parts == 145 and max(a, p, th) < 1e-8 and elapsed < 600)
    assert verdict(1, ok, f"|CA-I| {a:.2e}, |CP| {p:.2e}, |C Ath| {th:.2e} at {len(ts.T_base)} "
                          f"temperatures, {elapsed:.0f} s")


def test_criterion_2_homogeneous_identities(demo):
    g = [ms.GrainRecord((0.3, 1.2, 2.2))]
    rve = ms.VoxelRve(np.zeros((4, 4, 4), dtype=int), 1)
    ts = inf.assemble_set(rve, g, demo, T_base=(295.0, 400.0))
    da = np.abs(ts.A - np.eye(6)).max()
    dp, dth = np.abs(ts.P).max(), np.abs(ts.Ath).max()
    m = ec.build_model(g, demo, ts)
    st = ec.initial_point_state(m, 298.0)
    ctl = ec.IncrementControl(1.0, np.zeros(6), np.ones(6, bool), np.zeros(6), dT=100.0)
    out = ec.step(st, ctl, m)
    alpha = inf.part_thermal_expansion(g, demo)[0]
    ds = np.abs(out.sigma_bar).max()
    de = np.abs(out.eps_bar - alpha * 100.0).max()
    ok = max(da, dp, dth) < 1e-10 and ds < 1e-8 and de <= 1e-15 * np.abs(alpha).max() * 100.0
    assert verdict(2, ok, f"|A-I| {da:.1e}, |P| {dp:.1e}, |Ath| {dth:.1e}, |sig| {ds:.1e} MPa, "
                          f"|eps-alpha dT| {de:.1e}")


def test_criterion_3_oracle_equivalence(demo):
    t0 = time.perf_counter()
    worst, parts = 0.0, []
    for n_grains, seed in ((2, 4), (8, 6)):
        rve, grains = ms.build_synthetic_rve((8, 8, 8), n_grains, seed)
        ts = inf.assemble_set(rve, grains, demo, T_base=(298.0, 700.0))
        model = ec.build_model(grains, demo, ts)
        solver = oracle.FullFieldSolver(rve, grains, demo)
        for T in (298.0, 700.0):
            prog = dr.uniaxial_program(QS, 0.01, T, increments=50)
            ehm = np.array(dr.run_program(prog, model).history)
            ff = np.array(oracle.run_program(prog, solver)[0])
            assert np.allclose(ehm[:, 2], ff[:, 2], rtol=1e-12, atol=1e-15)
            err = np.abs(ehm[1:, 8] - ff[1:, 8]) / np.abs(ff[1:, 8])
            worst = max(worst, err.max())
            parts.append(f"{n_grains}g/{T:.0f}K {100 * err.max():.2f}%")
    elapsed = time.perf_counter() - t0
    ok = worst < 0.05 and elapsed < 1200
    assert verdict(3, ok, f"max stress error {', '.join(parts)}; {elapsed:.0f} s")


def _flow_stress_table(model, temps, rate, strain, increments):
    out = {}
    for T in temps:
        try:
            out[T] = _curve(model, T, rate, strain, increments)[-1, 1]
        except EhmError as exc:
            out[T] = exc
    return out


def test_criterion_4_temperature_softening(rve145, tset145, table1):
    model = ec.build_model(rve145[1], table1, tset145[0])
    temps = (298.0, 473.0, 700.0, 873.0, 923.0)
    s = _flow_stress_table(model, temps, QS, 0.01, 100)
    failed = {T: v for T, v in s.items() if isinstance(v, Exception)}
    if failed:
        T, exc = next(iter(failed.items()))
        ok, detail = False, f"shipped parameters give no QS solution ({len(failed)}/5 temperatures; " \
                            f"{T:.0f} K: {exc})"
    else:
        vals = [s[T] for T in temps]
        ok = bool(np.all(np.diff(vals) < 0))
        detail = "flow stress " + ", ".join(f"{v:.1f}" for v in vals) + " MPa"
    assert verdict(4, ok, detail)


def test_criterion_5_rate_sensitivity_shape(rve145, tset145, table1):
    model = ec.build_model(rve145[1], table1, tset145[0])
    temps = (298.0, 600.0, 650.0, 700.0, 873.0)
    qs = _flow_stress_table(model, temps, QS, 0.0025, 25)
    hs = _flow_stress_table(model, temps, HS, 0.0025, 25)
    bad = [T for T in temps if isinstance(qs[T], Exception) or isinstance(hs[T], Exception)]
    if bad:
        exc = qs[bad[0]] if isinstance(qs[bad[0]], Exception) else hs[bad[0]]
        ok, detail = False, f"shipped parameters give no solution at {len(bad)}/5 temperatures " \
                            f"({bad[0]:.0f} K: {exc})"
    else:
        dev = {T: hs[T] - qs[T] for T in temps}
        T_min = min(dev, key=dev.get)
        ok = 600.0 <= T_min <= 700.0
        detail = "HS-QS " + ", ".join(f"{T:.0f}K {d:.1f}" for T, d in dev.items()) + f"; min at {T_min:.0f} K"
    assert verdict(5, ok, detail)


def test_criterion_6_jacobian(two_part_rve, demo, two_part_tset):
    m = ec.build_model(two_part_rve[1], demo, two_part_tset)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(5):
        T = float(rng.uniform(300.0, 470.0))
        strain = float(rng.uniform(0.004, 0.012))
        st = ec.initial_point_state(m, T)
        ctl = _tension(QS, strain, 12)
        for _ in range(12):
            st = ec.step(st, ctl, m)
        assert np.abs(st.mu_rate).max() > 0
        d = rng.normal(size=6) * 1e-4
        dt = float(rng.uniform(2.0, 20.0))
        x = (st.mu_rate * dt).ravel()
        _, J = ec.residual_and_jacobian(st, m, d, 0.0, dt, x)
        fd = np.empty_like(J)
        h = 1e-9
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            rp, _ = ec.residual_and_jacobian(st, m, d, 0.0, dt, x + e)
            rm, _ = ec.residual_and_jacobian(st, m, d, 0.0, dt, x - e)
            fd[:, k] = (rp - rm) / (2 * h)
        worst = max(worst, np.linalg.norm(J - fd) / np.linalg.norm(fd))
    assert verdict(6, worst < 1e-5, f"max relative Jacobian error {worst:.2e} over 5 states")


def test_criterion_7_dislocation_bookkeeping(table1):
    fp = table1.slip["basal"]
    base = {k: np.full((1, 4), float(getattr(fp, k))) for k in cm.PARAM_NAMES}
    rng = np.random.default_rng(7)
    min_rho, ident = np.inf, 0.0
    for _ in range(10):
        s = cm.SlipState(np.full((1, 4), 1e12), np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)),
                         np.full((1, 4), 1e12), np.zeros((1, 4)), np.array([1e10]))
        T = float(rng.uniform(298.0, 923.0))
        sign = rng.choice([-1.0, 1.0], size=(1, 4))
        for _ in range(200):
            flip = rng.random((1, 4)) < 0.1
            sign = np.where(flip, -sign, sign)
            dg = rng.uniform(0.0, 2e-3, size=(1, 4)) * sign
            s = cm.evolve_dislocations(s, dg, sign, base, T, float(rng.uniform(1.0, 30.0)))
            min_rho = min(min_rho, *(float(getattr(s, f).min())
                                     for f in ("rho_fwd", "rho_rev_plus", "rho_rev_minus", "rho_deb")))
            total = s.rho_fwd + s.rho_rev_plus + s.rho_rev_minus
            ident = max(ident, float(np.abs(s.rho_for - total).max() / total.max()))
    # saturation under monotonic loading with a forward-dominated split
    p = 0.3
    sat = {k: v[:, :1].copy() for k, v in base.items()}
    sat["p"] = np.array([[p]])
    s = cm.SlipState(np.array([[1e12]]), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
                     np.array([[1e12]]), np.zeros((1, 1)), np.array([1e10]))
    dg = 1e-3
    for _ in range(4000):
        s = cm.evolve_dislocations(s, np.full((1, 1), dg), np.ones((1, 1)), sat, 298.0, dg / QS)
    k2 = float(cm.k2_of({k: float(v[0, 0]) for k, v in sat.items()}, QS, 298.0))
    target = ((1 - p) * fp.k1 / k2) ** 2
    rel = abs(s.rho_for[0, 0] / target - 1.0)
    ok = min_rho >= 0.0 and ident <= 1e-12 and rel < 0.01
    assert verdict(7, ok, f"min density {min_rho:.3e}, identity {ident:.1e}, saturation error "
                          f"{100 * rel:.3f}% at p = {p}")


def _brute_force_pair(values, gid):
    best, pair = -1.0, None
    for axis in range(3):
        a = gid.ravel()
        b = np.roll(gid, -1, axis=axis).ravel()
        for i, j in zip(a, b):
            if i == j:
                continue
            i, j = min(i, j), max(i, j)
            d = abs(values[i] - values[j])
            if d > best or (d == best and (i, j) < pair):
                best, pair = d, (int(i), int(j))
    return best, pair


def test_criterion_8_fip():
    mismatches = 0
    for seed in range(20):
        rve, _ = ms.build_synthetic_rve((16, 16, 16), 145, 100 + seed)
        rng = np.random.default_rng(seed)
        rho = 1e12 + rng.random(145) * 1e14
        got = fip.delta_rho_max(rho, ms.adjacency(rve))
        mismatches += got != _brute_force_pair(rho, rve.grain_id)
    p = 0.0123
    st = ec.PointState(np.zeros((145, 6)), np.tile([p, -p / 2, -p / 2, 0, 0, 0], (145, 1)),
                       np.zeros((145, 6)), None, np.zeros(6), np.zeros(6), 298.0, 0.0,
                       np.full(145, 1 / 145))
    rel = abs(fip.eqp(st) - p) / p
    assert verdict(8, mismatches == 0 and rel <= 1e-14,
                   f"{20 - mismatches}/20 states match brute force; eqp relative error {rel:.1e}")


def test_criterion_9_determinism(tmp_path, tset145, small_rve, small_tset):
    ms.write_rve(tmp_path / "r.rve", *small_rve)
    inf.write_cache(tmp_path / "c.ehmc", small_tset)
    (tmp_path / "p.cfg").write_text(
        "[program]\noutput_stride = 10\n[segment.1]\nduration = 120\nincrements = 20\n"
        "control = E S S S S S\nrate = 8.33e-5 0 0 0 0 0\nT_start = 300\n"
        "[segment.2]\nduration = 60\nincrements = 10\ncontrol = E S S S S S\n"
        "rate = -8.33e-5 0 0 0 0 0\n")
    spec = "[batch]\nprogram = p.cfg\nrve = r.rve\ncache = c.ehmc\nmat = demo\n"
    for k, T in enumerate(np.linspace(300.0, 460.0, 16)):
        spec += f"[point.p{k:02d}]\nT = {float(T)!r}\n"
    (tmp_path / "b.cfg").write_text(spec)
    batch = dr.read_batch(tmp_path / "b.cfg")
    dr.run_batch(batch, tmp_path / "j1", jobs=1)
    dr.run_batch(batch, tmp_path / "j8", jobs=8)
    files = sorted(p.relative_to(tmp_path / "j1") for p in (tmp_path / "j1").rglob("*") if p.is_file())
    same = all(filecmp.cmp(tmp_path / "j1" / f, tmp_path / "j8" / f, shallow=False) for f in files)
    ok_points = (tmp_path / "j1" / "summary.csv").read_text().count(",ok,")
    # cache round trip on the 145-part set
    ts = tset145[0]
    inf.write_cache(tmp_path / "a.ehmc", ts)
    back = inf.read_cache(tmp_path / "a.ehmc")
    inf.write_cache(tmp_path / "b.ehmc", back)
    arrays = all(np.array_equal(getattr(ts, f), getattr(back, f)) for f in ("T_base", "A", "P", "M", "Ath", "C"))
    files_equal = filecmp.cmp(tmp_path / "a.ehmc", tmp_path / "b.ehmc", shallow=False)
    ok = same and ok_points == 16 and arrays and files_equal
    assert verdict(9, ok, f"{len(files)} output files identical: {same}; {ok_points}/16 points ok; "
                          f"cache arrays equal: {arrays}, bytes equal: {files_equal}")


def test_criterion_10_calibration(demo):
    rve, grains = ms.build_synthetic_rve((4, 4, 4), 2, 5, {"beta_fraction": 0})
    ts = inf.assemble_set(rve, grains, demo, T_base=(295.0, 473.0))
    strains = np.linspace(0.001, 0.02, 12)
    truth = ec.build_model(grains, demo, ts)
    curve = dr.ExperimentCurve("t450", 450.0, QS, strains, dr.simulate_curve(truth, 450.0, QS, strains))
    free = ["dV.prismatic", "s_298K.pyramidal_a"]
    true_vals = {k: demo.get_param(k) for k in free}
    bounds = {k: (0.5 * v, 1.6 * v) for k, v in true_vals.items()}
    start = demo.with_params({k: 1.3 * v for k, v in true_vals.items()})
    res = dr.calibrate([curve], free, bounds, grains, start, ts, max_evals=200, tol=1e-6)
    scale = np.abs(curve.stress).max()
    ok = res.residual < 1e-6 * scale and res.evaluations <= 200
    err = ", ".join(f"{k} {100 * abs(res.params[k] / true_vals[k] - 1):.3f}%" for k in free)
    assert verdict(10, ok, f"residual {res.residual:.2e} MPa (limit {1e-6 * scale:.2e}) after "
                           f"{res.evaluations} evaluations; parameter error {err}")
