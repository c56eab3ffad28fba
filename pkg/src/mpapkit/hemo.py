"""Physics-informed features from main pulmonary artery flow and area waveforms.

Pipeline: area -> pressure through an elastic tube law, a three-element
(Rc-C-Rd) Windkessel fitted to the flow/pressure pair, and a wave-intensity
split of the pressure wave into forward and backward travelling parts.

Units are SI throughout: flow m^3/s, area m^2, pressure Pa, resistance
kg/(m^4 s), compliance m^4 s^2/kg.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares, minimize, minimize_scalar, nnls

from ._backend import kernels

FLOW = "flow"
AREA = "area"
PRESSURE = "pressure"
QUANTITIES = (FLOW, AREA, PRESSURE)

MIN_SAMPLES = 16
BLOOD_DENSITY = 1060.0
STEADY_TOL = 1e-6
MAX_CYCLES = 200
MAX_SUBSTEPS = 100_000


class HemoError(ValueError):
    """Base error; ``stage`` names the pipeline step that failed."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class DomainError(HemoError):
    pass


class ConvergenceError(HemoError):
    def __init__(self, message, mismatch, stage="simulate"):
        super().__init__(message, stage)
        self.mismatch = mismatch


class FitError(HemoError):
    def __init__(self, message, best_residual, stage="fit"):
        super().__init__(message, stage)
        self.best_residual = best_residual


@dataclass(frozen=True)
class Waveform:
    """One uniformly sampled cardiac cycle."""

    samples: np.ndarray
    dt: float
    quantity: str

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.quantity not in QUANTITIES:
            raise DomainError(f"unknown quantity {self.quantity!r}")
        if samples.ndim != 1 or samples.size < MIN_SAMPLES:
            raise DomainError(f"waveform needs at least {MIN_SAMPLES} samples, got {samples.size}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("waveform contains non-finite samples")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DomainError(f"dt must be positive, got {self.dt}")
        if self.quantity == AREA and np.any(samples <= 0):
            raise DomainError("area waveform must be strictly positive")

    def __len__(self):
        return self.samples.size

    @property
    def period(self):
        return self.samples.size * self.dt

    @property
    def times(self):
        return np.arange(self.samples.size) * self.dt

    def mean(self):
        return float(np.mean(self.samples))


@dataclass(frozen=True)
class TubeLaw:
    """Elastic law linear in radius: p = p0 + stiffness * (sqrt(A/A0) - 1)."""

    p0: float
    A0: float
    stiffness: float
    rho: float = BLOOD_DENSITY

    def __post_init__(self):
        if not (self.A0 > 0 and self.stiffness > 0 and self.rho > 0):
            raise DomainError("tube law needs A0 > 0, stiffness > 0, rho > 0")

    def pressure(self, area):
        area = np.asarray(area, dtype=np.float64)
        if np.any(area <= 0):
            raise DomainError("non-positive area sample")
        return self.p0 + self.stiffness * (np.sqrt(area / self.A0) - 1.0)

    def area(self, pressure):
        """Inverse of :meth:`pressure`."""
        ratio = 1.0 + (np.asarray(pressure, dtype=np.float64) - self.p0) / self.stiffness
        if np.any(ratio <= 0):
            raise DomainError("pressure below the collapse point of the tube law")
        return self.A0 * ratio * ratio

    def compliance(self, area):
        """dA/dp evaluated at ``area``."""
        if area <= 0:
            raise DomainError("non-positive area")
        return 2.0 * math.sqrt(area * self.A0) / self.stiffness


@dataclass(frozen=True)
class WindkesselParams:
    Rc: float
    C: float
    Rd: float

    def __post_init__(self):
        for name in ("Rc", "C", "Rd"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be positive and finite, got {value}")

    @property
    def Rtot(self):
        return self.Rc + self.Rd

    @property
    def tau(self):
        return self.Rd * self.C

    def as_dict(self):
        return {"Rc": self.Rc, "C": self.C, "Rd": self.Rd, "Rtot": self.Rtot}


@dataclass(frozen=True)
class WaveDecomposition:
    Wf: float
    Wb: float

    @property
    def ratio(self):
        return self.Wb / (self.Wf + self.Wb)


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 5
    seed: int = 0
    max_iter: int = 600
    polish: bool = True


@dataclass
class WindkesselFit:
    """Fit outcome. Unpacks as ``params, residual``."""

    params: WindkesselParams
    residual: float
    identifiable: bool = True
    n_evaluations: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.params
        yield self.residual


def _check_pair(a, b):
    if len(a) != len(b):
        raise DomainError(f"waveform lengths differ: {len(a)} vs {len(b)}")
    if not math.isclose(a.dt, b.dt, rel_tol=1e-9):
        raise DomainError(f"waveform sampling differs: {a.dt} vs {b.dt}")


def pressure_from_area(area: Waveform, law: TubeLaw) -> Waveform:
    if area.quantity != AREA:
        raise DomainError(f"expected an area waveform, got {area.quantity}")
    return Waveform(law.pressure(area.samples), area.dt, PRESSURE)


def _substeps(dt, tau):
    # keep h <= tau / 2, well inside the RK4 stability interval
    m = dt / (0.5 * tau)
    if not m <= MAX_SUBSTEPS:
        raise DomainError(f"time constant {tau:.3g} s too short for dt={dt:.3g} s", stage="simulate")
    return max(1, math.ceil(m))


def _rk4_gain(z):
    return 1.0 + z + z * z / 2.0 + z ** 3 / 6.0 + z ** 4 / 24.0


def integrate_windkessel(params: WindkesselParams, flow: Waveform, n_cycles: int,
                         pc0: float = 0.0) -> np.ndarray:
    """Transient pressure, shape (n_cycles, len(flow)), starting from p_c(0) = pc0."""
    q = flow.samples
    m = _substeps(flow.dt, params.tau)
    out = np.empty((n_cycles, q.size))
    pc = float(pc0)
    for k in range(n_cycles):
        pc = kernels.rk4_cycle(q, flow.dt, params.Rc, params.C, params.Rd, pc, m, out[k])
    return out


def _periodic_cycle(q, dt, rc, c, rd):
    # The cycle map is affine in p_c(0): run once from zero and superpose the
    # free decay that closes the loop.
    m = _substeps(dt, rd * c)
    out = np.empty(q.size)
    end0 = kernels.rk4_cycle(q, dt, rc, c, rd, 0.0, m, out)
    step_gain = _rk4_gain(-dt / m / (rd * c)) ** m
    loop_gain = step_gain ** q.size
    if not (abs(loop_gain) < 1.0):
        return None, None
    pc_star = end0 / (1.0 - loop_gain)
    out += pc_star * step_gain ** np.arange(q.size)
    return out, pc_star


def simulate_windkessel(params: WindkesselParams, flow: Waveform, n_cycles: int = MAX_CYCLES,
                        tol: float = STEADY_TOL, pc0: float | None = None) -> Waveform:
    """Periodic steady-state pressure for ``flow`` driving the Rc-C-Rd circuit.

    With ``pc0=None`` integration starts from the periodic fixed point of the
    discrete cycle map, so steady state is reached in one or two cycles.
    Cycles are repeated until successive cycles differ by at most
    ``tol * |mean p|`` (sup norm), up to ``n_cycles``.
    """
    if flow.quantity != FLOW:
        raise DomainError(f"expected a flow waveform, got {flow.quantity}")
    if n_cycles < 1:
        raise DomainError("n_cycles must be >= 1")
    q = flow.samples
    m = _substeps(flow.dt, params.tau)
    if pc0 is None:
        _, pc0 = _periodic_cycle(q, flow.dt, params.Rc, params.C, params.Rd)
        if pc0 is None:
            raise ConvergenceError("cycle map is not contracting", mismatch=math.inf)
    prev = None
    pc = float(pc0)
    mismatch = math.inf
    for _ in range(n_cycles):
        start = pc
        cur = np.empty(q.size)
        pc = kernels.rk4_cycle(q, flow.dt, params.Rc, params.C, params.Rd, start, m, cur)
        if prev is None:
            mismatch = abs(pc - start)
        else:
            mismatch = float(np.max(np.abs(cur - prev)))
        scale = abs(float(np.mean(cur)))
        if mismatch <= tol * scale:
            return Waveform(cur, flow.dt, PRESSURE)
        prev = cur
    raise ConvergenceError(
        f"no periodic steady state after {n_cycles} cycles (mismatch {mismatch:.3g} Pa)",
        mismatch=mismatch,
    )


def _diastolic_tau(q, p, dt):
    """Decay time constant from the longest low-flow stretch of the cycle."""
    low = q <= 0.05 * np.max(q)
    if low.all() or not low.any():
        return None
    # rotate so the cycle starts at a high-flow sample; runs then never wrap
    shift = int(np.argmin(low))
    low = np.roll(low, -shift)
    pr = np.roll(p, -shift)
    best, start = (0, 0), None
    for i, flag in enumerate(np.append(low, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    a, b = best
    seg = pr[a:b]
    if seg.size < 4 or np.any(seg <= 0):
        return None
    slope = np.polyfit(np.arange(seg.size) * dt, np.log(seg), 1)[0]
    if slope >= 0:
        return None
    return -1.0 / slope


def _profile_start(q, p, dt):
    """Variable-projection start: for a fixed time constant tau the pressure is
    linear in (Rc, Rd), so scan log(tau) and solve the 2-column least squares."""
    period = q.size * dt
    design = np.empty((q.size, 2))
    design[:, 0] = q

    def solve(log_tau):
        tau = math.exp(log_tau)
        try:
            h, _ = _periodic_cycle(q, dt, 0.0, tau, 1.0)
        except DomainError:
            return math.inf, None
        if h is None:
            return math.inf, None
        design[:, 1] = h
        coef, rnorm = nnls(design, p)
        return rnorm, coef

    grid = np.linspace(math.log(1e-3 * dt), math.log(1e3 * period), 61)
    costs = [solve(g)[0] for g in grid]
    k = int(np.argmin(costs))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(lambda g: solve(g)[0], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    log_tau = res.x if res.fun <= costs[k] else grid[k]
    _, coef = solve(log_tau)
    if coef is None:
        return None
    rc, rd = coef
    rtot = float(np.mean(p) / np.mean(q))
    # nnls may zero a branch; keep the start strictly inside the domain
    rc = max(rc, 1e-4 * rtot)
    rd = max(rd, 1e-4 * rtot)
    return np.log([rc, math.exp(log_tau) / rd, rd])


def _initial_guess(q, p, dt):
    rtot = float(np.mean(p) / np.mean(q))
    rc, rd = 0.1 * rtot, 0.9 * rtot
    tau = _diastolic_tau(q, p, dt)
    if tau is None or not math.isfinite(tau):
        tau = 0.5 * q.size * dt
    return np.log([rc, tau / rd, rd])


def fit_windkessel(flow: Waveform, pressure: Waveform, options: FitOptions | None = None) -> WindkesselFit:
    """Least-squares Rc, C, Rd reproducing ``pressure`` from ``flow``.

    Multi-start Nelder-Mead over log parameters, each start polished by a
    Levenberg-Marquardt pass on the same residual. Starts: the mean-based
    heuristic (Rtot from mean p / mean Q, Rc = 0.1 Rtot, C from the diastolic
    decay), a variable-projection estimate, and seeded jitters of the better
    one. The residual reported is the attained mean squared error in Pa^2.
    """
    options = options or FitOptions()
    _check_pair(flow, pressure)
    if flow.quantity != FLOW or pressure.quantity != PRESSURE:
        raise DomainError("fit needs (flow, pressure) waveforms", stage="fit")
    q, p, dt = flow.samples, pressure.samples, flow.dt
    if not np.mean(p) > 0:
        raise DomainError("mean pressure must be positive", stage="fit")
    if not np.mean(q) > 0:
        raise DomainError("mean flow must be positive", stage="fit")

    if np.ptp(q) <= 1e-12 * abs(np.mean(q)):
        # constant flow only identifies the resistance sum
        rtot = float(np.mean(p) / np.mean(q))
        x0 = _initial_guess(q, p, dt)
        params = WindkesselParams(0.1 * rtot, float(np.exp(x0[1])), 0.9 * rtot)
        resid = float(np.mean((rtot * q - p) ** 2))
        return WindkesselFit(params, resid, identifiable=False, n_evaluations=0,
                             diagnostics={"reason": "constant flow: Rc/Rd split and C not identifiable"})

    scale = float(np.sqrt(np.mean(p * p)))
    n_eval = 0

    def residuals(x):
        nonlocal n_eval
        n_eval += 1
        rc, c, rd = np.exp(np.clip(x, -60.0, 60.0))
        try:
            sim, _ = _periodic_cycle(q, dt, rc, c, rd)
        except DomainError:
            sim = None
        if sim is None or not np.all(np.isfinite(sim)):
            return np.full(q.size, 1e3)
        return (sim - p) / scale

    def objective(x):
        r = residuals(x)
        return float(np.dot(r, r) / r.size)

    x_base = _initial_guess(q, p, dt)
    f_init = objective(x_base)
    starts = [x_base]
    x_prof = _profile_start(q, p, dt)
    anchor = x_base
    if x_prof is not None:
        starts.append(x_prof)
        if objective(x_prof) < f_init:
            anchor = x_prof
    rng = np.random.default_rng(options.seed)
    while len(starts) < options.n_starts:
        starts.append(anchor + rng.normal(0.0, 0.5, 3))

    best_x, best_f = None, math.inf
    for x0 in starts:
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxiter": options.max_iter, "xatol": 1e-6, "fatol": 1e-14})
        x, f = res.x, float(res.fun)
        if options.polish:
            ls = least_squares(residuals, x, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14,
                               max_nfev=200)
            f_ls = float(np.dot(ls.fun, ls.fun) / ls.fun.size)
            if f_ls <= f:
                x, f = ls.x, f_ls
        if f < best_f:
            best_x, best_f = x, f

    if best_x is None or not best_f < f_init:
        raise FitError("no start improved on the initial guess", best_residual=best_f * scale ** 2)
    rc, c, rd = (float(v) for v in np.exp(best_x))
    params = WindkesselParams(rc, c, rd)
    return WindkesselFit(params, best_f * scale ** 2, identifiable=True, n_evaluations=n_eval,
                         diagnostics={"initial_mse": f_init * scale ** 2})


def impedance_from_compliance(mean_area, compliance, rho=BLOOD_DENSITY):
    """Zc = rho c / A with Bramwell-Hill wave speed c = sqrt(A / (rho dA/dp))."""
    if not (compliance > 0 and math.isfinite(compliance)):
        raise DomainError(f"compliance must be positive and finite, got {compliance}", stage="impedance")
    if not mean_area > 0:
        raise DomainError("mean area must be positive", stage="impedance")
    c = math.sqrt(mean_area / (rho * compliance))
    return rho * c / mean_area


def wave_speed(mean_area, compliance, rho=BLOOD_DENSITY):
    return math.sqrt(mean_area / (rho * compliance))


def characteristic_impedance(pressure: Waveform, area: Waveform, law: TubeLaw) -> float:
    _check_pair(pressure, area)
    a_mean = area.mean()
    return impedance_from_compliance(a_mean, law.compliance(a_mean), law.rho)


def wave_power_decomposition(pressure: Waveform, flow: Waveform, area: Waveform, zc: float) -> WaveDecomposition:
    """Split per-sample pressure/velocity increments into forward and backward waves.

    With rho*c = Zc * mean(A): dp_pm = (dp +- rho*c*dU) / 2 and the wave intensity
    of each part is dp_pm^2 / (rho*c) in magnitude. Increments wrap around the
    cycle, so a periodic signal contributes every sample pair once.
    """
    _check_pair(pressure, flow)
    _check_pair(pressure, area)
    if not (zc > 0 and math.isfinite(zc)):
        raise DomainError(f"Zc must be positive, got {zc}", stage="waves")
    a_mean = area.mean()
    rho_c = zc * a_mean
    u = flow.samples / a_mean
    dp = np.roll(pressure.samples, -1) - pressure.samples
    du = np.roll(u, -1) - u
    dp_f = 0.5 * (dp + rho_c * du)
    dp_b = 0.5 * (dp - rho_c * du)
    wf = float(np.sum(dp_f * dp_f) / rho_c)
    wb = float(np.sum(dp_b * dp_b) / rho_c)
    if not wf + wb > 0:
        raise DomainError("zero total wave power: flat waveforms carry no wave information",
                          stage="waves")
    return WaveDecomposition(wf, wb)


PHYSICS_FEATURES = ("Rd", "Rc", "C", "Rtot", "Wb_Wtot")


def physics_features(flow: Waveform, area: Waveform, law: TubeLaw,
                     options: FitOptions | None = None) -> dict:
    """The five model-derived features for one patient, keyed as in ``PHYSICS_FEATURES``."""
    stage = "pressure"
    try:
        pressure = pressure_from_area(area, law)
        stage = "fit"
        fit = fit_windkessel(flow, pressure, options)
        if not fit.identifiable:
            raise FitError(fit.diagnostics.get("reason", "non-identifiable fit"),
                           best_residual=fit.residual)
        stage = "impedance"
        zc = characteristic_impedance(pressure, area, law)
        stage = "waves"
        waves = wave_power_decomposition(pressure, flow, area, zc)
    except HemoError as exc:
        exc.stage = stage
        raise
    params = fit.params
    return {"Rd": params.Rd, "Rc": params.Rc, "C": params.C, "Rtot": params.Rtot,
            "Wb_Wtot": waves.ratio}


def read_waveforms(path) -> tuple[Waveform, Waveform]:
    """Read a ``t,flow,area`` CSV; sampling must be uniform to 1e-9 relative."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "flow", "area"]:
            raise DomainError(f"{path}: header must be t,flow,area, got {header}")
        try:
            data = np.array([[float(v) for v in row] for row in reader if row], dtype=np.float64)
        except ValueError as exc:
            raise DomainError(f"{path}: non-numeric cell ({exc})") from None
    if data.ndim != 2 or data.shape[0] < MIN_SAMPLES or data.shape[1] != 3:
        raise DomainError(f"{path}: expected >= {MIN_SAMPLES} rows of 3 values")
    steps = np.diff(data[:, 0])
    dt = float(np.mean(steps))
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-9 * dt:
        raise DomainError(f"{path}: time column is not uniformly spaced")
    return Waveform(data[:, 1], dt, FLOW), Waveform(data[:, 2], dt, AREA)


def write_waveforms(path, flow: Waveform, area: Waveform):
    _check_pair(flow, area)
    t = flow.times
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("t,flow,area\n")
        for ti, qi, ai in zip(t, flow.samples, area.samples):
            fh.write(f"{float(ti)!r},{float(qi)!r},{float(ai)!r}\n")
