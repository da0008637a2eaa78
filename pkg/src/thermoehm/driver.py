"""Load programs, single-point runs, batches and calibration."""
from __future__ import annotations

import configparser
import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ehm_core as ec
from . import fip
from .errors import EhmError, FormatError, InfeasibleBounds, NoConvergence
from .influence import read_cache
from .material import BUILTIN_SETS, load_material
from .microstructure import adjacency, read_rve
from .voigt import von_mises

VOIGT_LABELS = ("11", "22", "33", "23", "13", "12")
QS_RATE = 8.33e-5
HS_RATE = 1.0e-2


# ---------------------------------------------------------------- programs

@dataclass(frozen=True)
class Segment:
    duration: float
    increments: int
    stress_mask: tuple          # True where the component is stress controlled
    rate: tuple                 # strain rates of strain-controlled components (1/s)
    stress: tuple               # end-of-segment stress of stress-controlled components (MPa)
    T_start: float
    T_end: float

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError("segment duration must be positive")
        if self.increments < 1:
            raise ValueError("segment needs at least one increment")
        if len(self.stress_mask) != 6 or len(self.rate) != 6 or len(self.stress) != 6:
            raise ValueError("segment controls need six components")


@dataclass(frozen=True)
class LoadProgram:
    segments: tuple
    output_stride: int = 0      # snapshot every N increments; 0 keeps only the final state
    T_free: float = None        # stress-free temperature; default is the initial temperature

    def __post_init__(self):
        if not self.segments:
            raise ValueError("a load program needs at least one segment")

    @property
    def T_initial(self):
        return self.segments[0].T_start

    def temperatures(self):
        return [t for s in self.segments for t in (s.T_start, s.T_end)]

    def with_temperature(self, T):
        """Copy with a constant temperature or one value per segment boundary."""
        T = np.atleast_1d(np.asarray(T, dtype=float))
        n = len(self.segments)
        if T.size == 1:
            T = np.full(n + 1, T[0])
        if T.size != n + 1:
            raise ValueError(f"expected 1 or {n + 1} temperatures, got {T.size}")
        segs = tuple(replace(s, T_start=float(T[k]), T_end=float(T[k + 1]))
                     for k, s in enumerate(self.segments))
        return replace(self, segments=segs)


def uniaxial_program(rate, strain, T, increments=100, axis=0, output_stride=0):
    """Strain-controlled tension along ``axis`` with all other stresses zero."""
    mask = [True] * 6
    mask[axis] = False
    rates = [0.0] * 6
    rates[axis] = rate
    seg = Segment(strain / rate, increments, tuple(mask), tuple(rates), (0.0,) * 6, T, T)
    return LoadProgram((seg,), output_stride)


def _vector(text, kind=float):
    vals = [kind(v) for v in text.replace(",", " ").split()]
    if len(vals) != 6:
        raise FormatError(f"expected six values, got {text!r}")
    return tuple(vals)


def read_program(path):
    """Parse a load-program file (see the README for the format)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    if not cp.read(path):
        raise FormatError(f"cannot read {path}")
    general = cp["program"] if cp.has_section("program") else {}
    names = sorted((s for s in cp.sections() if s.startswith("segment.")),
                   key=lambda s: int(s.split(".", 1)[1]))
    segments = []
    T_prev = None
    for name in names:
        sec = cp[name]
        try:
            mask = tuple(c.upper() == "S" for c in sec.get("control", "E E E E E E").split())
            T_start = float(sec["T_start"]) if "T_start" in sec else T_prev
            if T_start is None:
                raise KeyError("T_start")
            T_end = float(sec.get("T_end", T_start))
            segments.append(Segment(float(sec["duration"]), int(sec.get("increments", "100")), mask,
                                    _vector(sec.get("rate", "0 0 0 0 0 0")),
                                    _vector(sec.get("stress", "0 0 0 0 0 0")), T_start, T_end))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"[{name}]: {exc}") from exc
        T_prev = segments[-1].T_end
    T_free = general.get("stress_free_T") if general else None
    return LoadProgram(tuple(segments), int(general.get("output_stride", "0")) if general else 0,
                       float(T_free) if T_free not in (None, "") else None)


def increments(program, sigma_start_fn):
    """Yield ``(segment index, increment index, IncrementControl)``.

    ``sigma_start_fn()`` returns the current macro stress; stress targets ramp
    linearly from the value at the start of each segment.
    """
    for k, seg in enumerate(program.segments):
        dt = seg.duration / seg.increments
        dT = (seg.T_end - seg.T_start) / seg.increments
        mask = np.array(seg.stress_mask)
        d_eps = np.where(mask, 0.0, np.array(seg.rate) * dt)
        sig0 = np.array(sigma_start_fn())
        target = np.array(seg.stress)
        for i in range(seg.increments):
            frac = (i + 1) / seg.increments
            yield k, i, ec.IncrementControl(dt, d_eps, mask, sig0 + frac * (target - sig0), dT)


# ---------------------------------------------------------------- snapshots

SNAPSHOT_COLUMNS = (["part", "C"] + [f"mu_{k}" for k in VOIGT_LABELS]
                    + [f"sigma_{k}" for k in VOIGT_LABELS]
                    + ["system", "active", "rho_fwd", "rho_rev_plus", "rho_rev_minus", "rho_deb",
                       "gamma_acc"])


def write_snapshot(path, state, active, point_id, increment):
    n, S = active.shape
    sl = state.slip
    with open(path, "w", newline="") as fh:
        fh.write(f"# point {point_id}\n# increment {increment}\n# time {state.time!r}\n# T {state.T!r}\n")
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_COLUMNS)
        for a in range(n):
            head = [a, repr(float(state.C[a]))] + [repr(float(v)) for v in state.mu[a]] \
                + [repr(float(v)) for v in state.sigma[a]]
            for s in range(S):
                w.writerow(head + [s, int(active[a, s]), repr(float(sl.rho_fwd[a, s])),
                                   repr(float(sl.rho_rev_plus[a, s])), repr(float(sl.rho_rev_minus[a, s])),
                                   repr(float(sl.rho_deb[a])), repr(float(sl.gamma_acc[a, s]))])


@dataclass(frozen=True)
class Snapshot:
    point_id: str
    increment: int
    time: float
    T: float
    C: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    slip: object
    active: np.ndarray


def read_snapshot(path):
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                meta[key] = val
            else:
                rows.append(line)
    data = list(csv.DictReader(rows))
    if not data:
        raise FormatError(f"{path}: empty snapshot")
    n = max(int(r["part"]) for r in data) + 1
    S = max(int(r["system"]) for r in data) + 1
    arr = {k: np.zeros((n, S)) for k in ("rho_fwd", "rho_rev_plus", "rho_rev_minus", "gamma_acc", "active")}
    C, deb = np.zeros(n), np.zeros(n)
    mu, sigma = np.zeros((n, 6)), np.zeros((n, 6))
    for r in data:
        a, s = int(r["part"]), int(r["system"])
        for k in arr:
            arr[k][a, s] = float(r[k])
        C[a], deb[a] = float(r["C"]), float(r["rho_deb"])
        mu[a] = [float(r[f"mu_{k}"]) for k in VOIGT_LABELS]
        sigma[a] = [float(r[f"sigma_{k}"]) for k in VOIGT_LABELS]
    from .constitutive import SlipState
    slip = SlipState(arr["rho_fwd"], arr["rho_rev_plus"], arr["rho_rev_minus"], arr["gamma_acc"],
                     np.zeros((n, S)), np.zeros((n, S)), deb)
    return Snapshot(meta.get("point", ""), int(meta.get("increment", 0)), float(meta.get("time", 0.0)),
                    float(meta.get("T", 0.0)), C, mu, sigma, slip, arr["active"].astype(bool))


# ---------------------------------------------------------------- single point

@dataclass
class RunResult:
    history: list
    state: ec.PointState
    snapshots: list = field(default_factory=list)


def run_program(program, model, out_dir=None, point_id="point", initial=None):
    """Integrate ``program`` at one material point.

    Writes ``history.csv`` and snapshot CSVs to ``out_dir`` when given.
    ``NoConvergence`` is re-raised with the failing increment index.
    """
    state = initial or ec.initial_point_state(model, program.T_initial, program.T_free)
    history = [ec.log_row(state)]
    snaps = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
    count = 0
    stride = program.output_stride
    try:
        for _, _, control in increments(program, lambda: state.sigma_bar):
            state = ec.step(state, control, model)
            count += 1
            history.append(ec.log_row(state))
            if stride and count % stride == 0:
                snaps.append((count, state))
    except NoConvergence as exc:
        if out is not None:
            write_history(out / "history.csv", history)
        raise NoConvergence(str(exc), increment=count + 1) from exc
    if not snaps or snaps[-1][0] != count:
        snaps.append((count, state))
    if out is not None:
        write_history(out / "history.csv", history)
        for inc, st in snaps:
            write_snapshot(out / "snapshots" / f"{point_id}_{inc:06d}.csv", st, model.table.active,
                           point_id, inc)
    return RunResult(history, state, snaps)


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ec.LOG_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v) for v in r])


def read_history(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def load_model(rve_path, mat_path, cache_path):
    """Model from an RVE file, a parameter file (None for defaults) and a cache."""
    rve, grains = read_rve(rve_path)
    material = load_material(mat_path)
    tset = read_cache(cache_path)
    if tset.n_parts != rve.n_grains:
        raise FormatError("cache and RVE disagree on the number of parts")
    return rve, ec.build_model(grains, material, tset)


# ---------------------------------------------------------------- batches

@dataclass(frozen=True)
class BatchPoint:
    point_id: str
    T: tuple
    program: str
    rve: str
    mat: str
    cache: str


@dataclass(frozen=True)
class BatchSpec:
    points: tuple

    def __post_init__(self):
        ids = [p.point_id for p in self.points]
        if len(set(ids)) != len(ids):
            raise ValueError("point IDs must be unique")


def read_batch(path):
    """Batch file: a ``[batch]`` section with default file paths and one ``[point.ID]`` per point."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    if not cp.read(path):
        raise FormatError(f"cannot read {path}")
    base = cp["batch"] if cp.has_section("batch") else {}

    def resolve(sec, key):
        val = sec.get(key, base.get(key, "")) if hasattr(sec, "get") else base.get(key, "")
        if not val:
            return ""
        p = Path(val)
        if not p.is_absolute():
            p = path.parent / p
        if key == "mat" and val in BUILTIN_SETS and not p.exists():
            return val
        return str(p.resolve())

    points = []
    for name in cp.sections():
        if not name.startswith("point."):
            continue
        sec = cp[name]
        try:
            T = tuple(float(v) for v in sec.get("T", "").replace(",", " ").split())
        except ValueError as exc:
            raise FormatError(f"[{name}]: {exc}") from exc
        points.append(BatchPoint(name.split(".", 1)[1], T, resolve(sec, "program"), resolve(sec, "rve"),
                                 resolve(sec, "mat"), resolve(sec, "cache")))
    return BatchSpec(tuple(points))


SUMMARY_COLUMNS = ("point", "status", "T_final", "sigma_vm", "eps_eqp", "delta_rho_tot_max",
                   "grain_i", "grain_j", "message")

_MODELS = {}


def _model_for(point):
    key = (point.rve, point.mat, point.cache)
    if key not in _MODELS:
        rve, model = load_model(point.rve, point.mat or None, point.cache)
        _MODELS[key] = (rve, model, adjacency(rve))
    return _MODELS[key]


def run_point(point, out_dir):
    """Run one batch point; returns its summary row. Completed points are reused."""
    pdir = Path(out_dir) / "points" / point.point_id
    marker = pdir / "result.csv"
    if marker.exists():
        with open(marker) as fh:
            return next(csv.DictReader(fh))
    pdir.mkdir(parents=True, exist_ok=True)
    row = {k: "" for k in SUMMARY_COLUMNS}
    row["point"] = point.point_id
    try:
        rve, model, graph = _model_for(point)
        program = read_program(point.program)
        if point.T:
            program = program.with_temperature(point.T)
        res = run_program(program, model, pdir, point.point_id)
        st = res.state
        rep = fip.report(st, graph, model.table.active) if rve.n_grains > 1 else None
        row.update(status="ok", T_final=repr(st.T), sigma_vm=repr(float(von_mises(st.sigma_bar))),
                   eps_eqp=repr(fip.eqp(st)))
        if rep is not None:
            row.update(delta_rho_tot_max=repr(rep.delta_rho_tot_max), grain_i=rep.pair[0],
                       grain_j=rep.pair[1])
    except (EhmError, OSError, ValueError) as exc:
        row.update(status="failed", message=str(exc).replace("\n", " "))
    tmp = marker.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        w.writerow(row)
    os.replace(tmp, marker)
    return {k: str(v) for k, v in row.items()}


def _run_point_task(args):
    return run_point(*args)


def run_batch(batch, out_dir, jobs=1):
    """Run every point, in parallel when ``jobs > 1``; writes ``summary.csv``.

    Points already carrying a completion marker are not recomputed. Failures
    are recorded per point and do not stop the batch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = sorted(batch.points, key=lambda p: p.point_id)
    if jobs <= 1:
        rows = [run_point(p, out) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_point_task, [(p, out) for p in points]))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return rows


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class ExperimentCurve:
    name: str
    T: float
    rate: float
    strain: np.ndarray
    stress: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.strain) <= 0.0):
            raise ValueError(f"{self.name}: strain must increase monotonically")


def read_experiment(path):
    """CSV with ``# T = ...`` and ``# rate = ...`` header lines and ``strain,stress`` columns."""
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            meta[key.strip()] = val.strip()
            continue
        rows.append(line)
    data = [r.split(",") for r in rows]
    if data and not _is_number(data[0][0]):
        data = data[1:]
    try:
        arr = np.array([[float(a), float(b)] for a, b, *_ in data])
        return ExperimentCurve(Path(path).stem, float(meta["T"]), float(meta["rate"]), arr[:, 0], arr[:, 1])
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_experiment(path, curve):
    with open(path, "w") as fh:
        fh.write(f"# T = {float(curve.T)!r}\n# rate = {float(curve.rate)!r}\nstrain,stress\n")
        for e, s in zip(curve.strain, curve.stress):
            fh.write(f"{float(e)!r},{float(s)!r}\n")


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def simulate_curve(model, T, rate, strains, increments_per_strain=4000.0, min_increments=20):
    """Uniaxial tension response (macro stress 11) interpolated at ``strains``."""
    e_max = float(np.max(strains))
    n = max(min_increments, int(math.ceil(e_max * increments_per_strain)))
    res = run_program(uniaxial_program(rate, e_max, T, n), model)
    h = np.array(res.history)
    return np.interp(strains, h[:, 2], h[:, 8])


@dataclass
class CalibrationResult:
    params: dict
    residual: float
    max_rel_error: dict
    evaluations: int
    history: list = field(default_factory=list)


def calibration_residual(curves, simulated):
    """Sum over tests of the root-mean-square stress deviation."""
    return float(sum(np.sqrt(np.mean((s - c.stress) ** 2)) for c, s in zip(curves, simulated)))


def _max_rel_errors(curves, simulated):
    out = {}
    for c, s in zip(curves, simulated):
        nz = np.abs(c.stress) > 0.0
        out[c.name] = float(np.max(np.abs(s[nz] - c.stress[nz]) / np.abs(c.stress[nz]))) if nz.any() else 0.0
    return out


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def calibrate(curves, free, bounds, grains, material, tset, max_evals=200, tol=1.0e-6,
              line_tol=1.0e-3, expand=4.0):
    """Fit the ``free`` slip parameters (keys like ``'k1.basal'``) to ``curves``.

    Cyclic coordinate search with a golden-section line search per
    coordinate. The first cycle brackets each coordinate by its bounds; later
    brackets span ``expand`` times the last accepted step around the incumbent
    (clipped to the bounds). Each line search stops once its bracket has
    shrunk by ``line_tol``. Stops when the residual drops below ``tol`` times
    the stress scale or after ``max_evals`` objective evaluations. Failed
    simulations count as an infinite residual.
    """
    free = list(free)
    lo = np.array([bounds[k][0] for k in free], dtype=float)
    hi = np.array([bounds[k][1] for k in free], dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo >= hi):
        raise InfeasibleBounds("every bound needs finite lo < hi")
    scale = max(float(np.max(np.abs(c.stress))) for c in curves)
    evals = 0
    history = []

    def objective(x):
        nonlocal evals
        evals += 1
        mat = material.with_params(dict(zip(free, x)))
        try:
            model = ec.build_model(grains, mat, tset)
            sim = [simulate_curve(model, c.T, c.rate, c.strain) for c in curves]
            f = calibration_residual(curves, sim)
        except (EhmError, ValueError, FloatingPointError):
            sim, f = None, math.inf
        history.append((list(map(float, x)), f))
        return f, sim

    x = np.array([material.get_param(k) for k in free], dtype=float)
    x = np.where((x < lo) | (x > hi), 0.5 * (lo + hi), x)
    fx, sim = objective(x)
    n_line = max(3, int(math.ceil(math.log(line_tol) / math.log(_GOLDEN))))
    half = None  # per-coordinate bracket half-widths after the first cycle
    steps = np.zeros(len(free))
    while free and evals < max_evals and fx > tol * scale:
        for i in range(len(free)):
            if evals + 2 > max_evals:
                break
            if half is None:
                a, b = lo[i], hi[i]
            else:
                a, b = max(lo[i], x[i] - half[i]), min(hi[i], x[i] + half[i])

            def at(v):
                y = x.copy()
                y[i] = v
                return objective(y)

            c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
            (fc, sc), (fd, sd) = at(c), at(d)
            for _ in range(n_line - 2):
                if evals >= max_evals:
                    break
                if fc <= fd:
                    b, d, fd, sd = d, c, fc, sc
                    c = b - _GOLDEN * (b - a)
                    fc, sc = at(c)
                else:
                    a, c, fc, sc = c, d, fd, sd
                    d = a + _GOLDEN * (b - a)
                    fd, sd = at(d)
            v, fv, sv = (c, fc, sc) if fc <= fd else (d, fd, sd)
            steps[i] = 0.0
            if fv < fx:
                steps[i] = v - x[i]
                x[i], fx, sim = v, fv, sv
            if fx <= tol * scale:
                break
        prev = (hi - lo) if half is None else half
        half = np.where(steps != 0.0, expand * np.abs(steps), line_tol * prev)
        half = np.maximum(half, 1.0e-14 * (hi - lo))
    rel = _max_rel_errors(curves, sim) if sim is not None else {c.name: math.inf for c in curves}
    return CalibrationResult(dict(zip(free, map(float, x))), fx, rel, evals, history)


def read_bounds(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    if not cp.read(path):
        raise FormatError(f"cannot read {path}")
    sec = cp["bounds"]
    out = {}
    for k in sec:
        vals = [float(v) for v in sec[k].replace(",", " ").split()]
        if len(vals) != 2:
            raise FormatError(f"bound {k} needs two values")
        out[k] = tuple(vals)
    return out
