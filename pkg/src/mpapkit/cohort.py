"""Patient cohort: feature schema, CSV I/O, preprocessing and a synthetic generator.

The schema has 47 predictors in three groups (demographics, physics, mri) plus
the measured mPAP target. Cohorts wrap an immutable pandas frame; every
transform returns a new cohort.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import t as t_dist

from . import hemo

DEMOGRAPHICS = "demographics"
PHYSICS = "physics"
MRI = "mri"
GROUPS = (DEMOGRAPHICS, PHYSICS, MRI)
TARGET = "mpap"
PH_THRESHOLD = 25.0
GENDER_CODES = {"female": 0, "male": 1}

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class CohortError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str
    kind: str = NUMERIC
    units: str = ""


@dataclass(frozen=True)
class GroupStats:
    """Per-class summary: observed count, mean, std (class 0 = no PH, 1 = PH)."""
    count: tuple
    mean: tuple
    std: tuple


N_NO_PH, N_PH = 66, 286

# name, group, units, (cnt, mean, std) no PH, (cnt, mean, std) PH
_TABLE = [
    ("age", DEMOGRAPHICS, "years", (66, 56.61, 13.78), (286, 61.69, 14.24)),
    ("gender", DEMOGRAPHICS, "female/male", (66, 43 / 66, 0.0), (286, 173 / 286, 0.0)),
    ("who", DEMOGRAPHICS, "class", (56, 2.52, 0.54), (285, 3.04, 0.44)),
    ("bsa", DEMOGRAPHICS, "m^2", (65, 1.88, 0.25), (286, 1.82, 0.22)),
    ("Rd", PHYSICS, "kg/(m^4 s)", (66, 6.08e7, 4.94e7), (286, 1.46e8, 2.53e8)),
    ("Rc", PHYSICS, "kg/(m^4 s)", (66, 7.94e6, 7.80e6), (286, 9.17e6, 1.87e7)),
    ("C", PHYSICS, "m^4 s^2/kg", (66, 9.92e-9, 6.71e-9), (284, 3.94e-4, 6.65e-3)),
    ("Rtot", PHYSICS, "kg/(m^4 s)", (66, 6.83e7, 5.38e7), (286, 1.56e8, 2.62e8)),
    ("Wb_Wtot", PHYSICS, "", (66, 0.24, 0.10), (286, 0.39, 0.11)),
    ("rac_fiesta", MRI, "%", (66, 26.39, 15.43), (286, 13.68, 8.93)),
    ("syst_area_fiesta", MRI, "cm^2", (66, 7.62, 2.17), (286, 9.78, 2.78)),
    ("diast_area_fiesta", MRI, "cm^2", (66, 6.08, 1.71), (286, 8.66, 2.57)),
    ("rvedv", MRI, "mL", (66, 118.93, 36.00), (286, 159.58, 58.27)),
    ("rvedv_index", MRI, "mL/m^2", (66, 53.78, 21.83), (286, 73.92, 39.39)),
    ("rvesv", MRI, "mL", (66, 55.41, 20.68), (286, 102.48, 49.92)),
    ("rvesv_index", MRI, "mL/m^2", (66, 24.64, 10.84), (286, 47.63, 30.19)),
    ("rvef", MRI, "%", (66, 53.32, 9.86), (286, 38.05, 13.59)),
    ("rvsv", MRI, "mL", (66, 63.52, 22.61), (286, 57.15, 23.39)),
    ("rvsv_index", MRI, "mL/m^2", (66, 29.14, 13.90), (286, 26.32, 15.02)),
    ("lvedv", MRI, "mL", (66, 116.57, 33.09), (286, 91.30, 27.33)),
    ("lvedv_index", MRI, "mL/m^2", (66, 53.16, 21.90), (286, 41.25, 19.20)),
    ("lvesv", MRI, "mL", (66, 34.27, 15.66), (286, 31.32, 14.56)),
    ("lvesv_index", MRI, "mL/m^2", (66, 16.85, 16.81), (286, 14.01, 8.18)),
    ("lvef", MRI, "%", (66, 71.13, 8.54), (286, 65.81, 10.92)),
    ("lvsv", MRI, "mL", (66, 82.30, 23.30), (286, 59.97, 19.93)),
    ("lvsv_index", MRI, "mL/m^2", (66, 38.07, 16.20), (286, 27.20, 13.51)),
    ("rv_dia_mass", MRI, "g", (66, 22.62, 6.80), (283, 44.48, 25.47)),
    ("lv_dia_mass", MRI, "g", (66, 91.47, 27.71), (286, 90.64, 24.98)),
    ("lv_syst_mass", MRI, "g", (66, 111.74, 32.17), (286, 99.83, 26.39)),
    ("rv_mass_index", MRI, "g/m^2", (66, 10.44, 4.94), (285, 20.94, 15.09)),
    ("lv_mass_index", MRI, "g/m^2", (59, 40.90, 17.87), (243, 39.84, 18.99)),
    ("sept_angle_syst", MRI, "degrees", (66, 139.95, 11.68), (286, 172.51, 22.11)),
    ("sept_angle_diast", MRI, "degrees", (66, 134.21, 8.28), (286, 145.01, 11.93)),
    ("4ch_la_area", MRI, "mm^2", (66, 1921.95, 387.56), (286, 1785.95, 556.53)),
    ("4ch_la_length", MRI, "mm", (66, 55.76, 7.86), (286, 55.62, 8.60)),
    ("2ch_la_area", MRI, "mm^2", (66, 1764.62, 496.75), (286, 1901.67, 545.35)),
    ("2ch_la_length", MRI, "mm", (66, 48.66, 9.08), (286, 52.12, 9.33)),
    ("la_volume", MRI, "mL", (66, 55.22, 17.96), (286, 54.16, 25.36)),
    ("la_volume_index", MRI, "mL/m^2", (66, 24.95, 10.14), (286, 23.24, 10.45)),
    ("ao_qflowpos", MRI, "L/min", (65, 6.09, 1.50), (285, 5.29, 1.50)),
    ("ao_qfp_ind", MRI, "L/min/m^2", (65, 2.79, 1.18), (285, 2.44, 1.15)),
    ("pa_qflowpos", MRI, "L/min", (66, 5.50, 1.84), (284, 5.00, 1.97)),
    ("pa_qflowneg", MRI, "L/min", (66, 0.62, 0.59), (285, 1.07, 0.83)),
    ("pa_qfn_ind", MRI, "L/min/m^2", (66, 9.70, 7.19), (284, 17.49, 9.85)),
    ("systolic_area_pc", MRI, "mm^2", (66, 731.05, 236.42), (284, 950.17, 268.98)),
    ("diastolic_area_pc", MRI, "mm^2", (66, 619.82, 162.71), (284, 866.42, 244.57)),
    ("rac_pc", MRI, "%", (66, 17.02, 13.70), (284, 10.01, 8.14)),
]

FEATURES = tuple(FeatureSpec(name, group, CATEGORICAL if name == "gender" else NUMERIC, units)
                 for name, group, units, _, _ in _TABLE)
FEATURE_NAMES = tuple(f.name for f in FEATURES)
TABLE1_STATS = {name: GroupStats((a[0], b[0]), (a[1], b[1]), (a[2], b[2]))
                for name, _, _, a, b in _TABLE}
MPAP_STATS = GroupStats((N_NO_PH, N_PH), (19.67, 46.95), (3.34, 13.08))
COLUMNS = FEATURE_NAMES + (TARGET,)


def feature_indices(groups):
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise CohortError(f"unknown feature groups {sorted(unknown)}")
    if not groups:
        raise CohortError("feature selection is empty")
    return np.array([i for i, f in enumerate(FEATURES) if f.group in groups], dtype=np.intp)


def parse_groups(text):
    """'demographics+physics' or 'all' -> tuple of group names in canonical order."""
    if text.strip() == "all":
        return GROUPS
    parts = {p.strip() for p in text.replace(",", "+").split("+") if p.strip()}
    feature_indices(parts)
    return tuple(g for g in GROUPS if g in parts)


def group_subsets():
    """The seven non-empty group combinations, single groups first."""
    from itertools import combinations
    return [c for r in (1, 2, 3) for c in combinations(GROUPS, r)]


# ---------------------------------------------------------------- cohort

@dataclass(frozen=True)
class Cohort:
    frame: pd.DataFrame
    provenance: str = ""

    def __post_init__(self):
        if list(self.frame.columns) != list(COLUMNS):
            raise CohortError("cohort columns do not match the feature schema")

    def __len__(self):
        return len(self.frame)

    @property
    def mpap(self):
        return self.frame[TARGET].to_numpy(dtype=np.float64)

    def labels(self, threshold=PH_THRESHOLD):
        return (self.mpap >= threshold).astype(np.int64)

    def missing_counts(self):
        return self.frame[list(FEATURE_NAMES)].isna().sum()

    def with_columns(self, values: dict):
        frame = self.frame.copy()
        for name, col in values.items():
            if name not in frame.columns:
                raise CohortError(f"unknown column {name!r}")
            frame[name] = col
        return replace(self, frame=frame)

    def take(self, rows):
        return replace(self, frame=self.frame.iloc[np.asarray(rows)].reset_index(drop=True))


def _frame_from_rows(rows):
    frame = pd.DataFrame(rows, columns=list(COLUMNS))
    for name in COLUMNS:
        if name != "gender":
            frame[name] = frame[name].astype(np.float64)
    frame["gender"] = frame["gender"].astype(object)
    return frame


def load_cohort(path) -> Cohort:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CohortError(f"{path}: empty file")
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in COLUMNS]
        if unknown:
            raise CohortError(f"{path}: unknown column(s) {unknown}")
        absent = [c for c in COLUMNS if c not in header]
        if absent:
            raise CohortError(f"{path}: missing column(s) {absent}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise CohortError(f"{path}: row {lineno} has {len(raw)} cells, expected {len(header)}")
            rec = {}
            for name, cell in zip(header, raw):
                cell = cell.strip()
                if name == "gender":
                    if cell and cell not in GENDER_CODES:
                        raise CohortError(f"{path}: row {lineno}, column gender: unknown category {cell!r}")
                    rec[name] = cell or None
                    continue
                if not cell:
                    if name == TARGET:
                        raise CohortError(f"{path}: row {lineno}: missing mpap")
                    rec[name] = np.nan
                    continue
                try:
                    rec[name] = float(cell)
                except ValueError:
                    raise CohortError(f"{path}: row {lineno}, column {name}: non-numeric cell {cell!r}") from None
            rows.append([rec[c] for c in COLUMNS])
    if not rows:
        raise CohortError(f"{path}: no records")
    return Cohort(_frame_from_rows(rows), provenance=f"file:{path.name}")


def _cell(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return v if isinstance(v, str) else repr(float(v))


def save_cohort(cohort: Cohort, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in cohort.frame.itertuples(index=False):
            w.writerow([_cell(v) for v in row])


# ---------------------------------------------------------------- preprocessing

def _interp_column(values):
    x = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(x)
    if ok.all():
        return x
    idx = np.arange(x.size)
    out = x.copy()
    # np.interp holds the end values flat outside the known range
    out[~ok] = np.interp(idx[~ok], idx[ok], x[ok])
    return out


def _nearest_fill(values):
    known = [i for i, v in enumerate(values) if v is not None and not (isinstance(v, float) and math.isnan(v))]
    out = list(values)
    for i, v in enumerate(out):
        if i not in known:
            # nearest known row; ties go to the earlier row
            j = min(known, key=lambda k: (abs(k - i), k))
            out[i] = values[j]
    return out


def impute(cohort: Cohort, strategy="linear") -> Cohort:
    """Fill missing feature cells.

    ``linear`` interpolates each column along record order and holds the
    nearest value past either end; ``mean`` uses the column mean. The
    categorical gender column always takes its nearest recorded neighbour.
    """
    if strategy not in ("linear", "mean"):
        raise CohortError(f"unknown imputation strategy {strategy!r}")
    frame = cohort.frame.copy()
    for spec in FEATURES:
        col = frame[spec.name]
        if col.isna().all():
            raise CohortError(f"feature {spec.name} is entirely missing")
        if not col.isna().any():
            continue
        if spec.kind == CATEGORICAL:
            frame[spec.name] = _nearest_fill(col.tolist())
        elif strategy == "linear":
            frame[spec.name] = _interp_column(col.to_numpy())
        else:
            frame[spec.name] = col.fillna(float(col.mean()))
    return replace(cohort, frame=frame)


def encode(cohort: Cohort):
    """Numeric matrix in schema order (gender female=0, male=1) and column names."""
    frame = cohort.frame
    if frame[list(FEATURE_NAMES)].isna().any().any():
        raise CohortError("encode needs an imputed cohort")
    X = np.empty((len(frame), len(FEATURES)), dtype=np.float64)
    for j, spec in enumerate(FEATURES):
        if spec.kind == CATEGORICAL:
            try:
                X[:, j] = [GENDER_CODES[v] for v in frame[spec.name]]
            except KeyError as exc:
                raise CohortError(f"unseen category {exc.args[0]!r} in {spec.name}") from None
        else:
            X[:, j] = frame[spec.name].to_numpy(dtype=np.float64)
    return X, list(FEATURE_NAMES)


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    scale: np.ndarray


def standardize_fit(matrix) -> Scaler:
    X = np.asarray(matrix, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # constant columns map to zero
    scale = np.where(std > 0, std, np.inf)
    return Scaler(mean, scale)


def standardize_apply(scaler: Scaler, matrix):
    return (np.asarray(matrix, dtype=np.float64) - scaler.mean) / scaler.scale


def select_feature_set(matrix, groups):
    X = np.asarray(matrix)
    if X.shape[1] != len(FEATURES):
        raise CohortError(f"expected {len(FEATURES)} columns, got {X.shape[1]}")
    return X[:, feature_indices(groups)]


def univariate_pvalue(feature, mpap):
    """Two-sided p-value for a zero OLS slope of mpap on one feature (t with n-2 dof)."""
    x = np.asarray(feature, dtype=np.float64)
    y = np.asarray(mpap, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise CohortError("feature and target must be equal-length vectors")
    n = x.size
    if n < 3:
        raise CohortError("need at least 3 samples")
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise CohortError("feature is constant")
    slope = float(xc @ yc) / sxx
    resid = yc - slope * xc
    sse = float(resid @ resid)
    if slope == 0.0:
        return 1.0
    if sse == 0.0:
        return 0.0
    se = math.sqrt(sse / (n - 2) / sxx)
    return float(min(1.0, 2.0 * t_dist.sf(abs(slope / se), n - 2)))


# ---------------------------------------------------------------- synthetic cohort

@dataclass(frozen=True)
class WindkesselTemplate:
    """Log-normal ground truth for one class: medians and log-scale spreads."""
    rtot: float
    rtot_sigma: float
    rc_fraction: float
    rc_sigma: float
    compliance: float
    compliance_sigma: float
    reflection: float
    reflection_sd: float


NO_PH_TEMPLATE = WindkesselTemplate(5.5e7, 0.15, 0.12, 0.3, 1.0e-8, 0.3, 0.25, 0.08)
PH_TEMPLATE = WindkesselTemplate(1.6e8, 0.40, 0.07, 0.3, 4.5e-9, 0.35, 0.55, 0.10)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 352
    positive_fraction: float = N_PH / (N_NO_PH + N_PH)
    seed: int = 0
    n_samples: int = 100
    noise_mmhg: float = 2.5
    threshold: float = PH_THRESHOLD
    missing: bool = True
    stats: dict = field(default_factory=lambda: dict(TABLE1_STATS))
    mpap_targets: tuple = MPAP_STATS.mean
    templates: tuple = (NO_PH_TEMPLATE, PH_TEMPLATE)
    pilot_size: int = 300

    def __post_init__(self):
        if self.n_patients < 1:
            raise CohortError("n_patients must be positive")
        if not 0.0 < self.positive_fraction < 1.0:
            raise CohortError("positive_fraction must lie in (0, 1)")
        if self.n_samples < hemo.MIN_SAMPLES:
            raise CohortError(f"need at least {hemo.MIN_SAMPLES} samples per waveform")
        if self.noise_mmhg < 0:
            raise CohortError("noise scale must be non-negative")
        for name, s in self.stats.items():
            if any(v < 0 for v in s.std):
                raise CohortError(f"negative std for {name}")


@dataclass(frozen=True)
class SynthPatient:
    flow: hemo.Waveform
    area: hemo.Waveform
    law: hemo.TubeLaw
    truth: hemo.WindkesselParams
    wb_wtot: float
    reflection: float


@dataclass(frozen=True)
class SyntheticCohort:
    cohort: Cohort
    patients: tuple
    calibration: tuple


MMHG = 133.322
SYSTOLE_FRACTION = 0.35
WAVE_PATH = 0.08
FLOW_SIGMA = 0.2
CALIBRATION_STEPS = 3
# lower clamps; percentages also capped at 100
_BOUNDS = {"age": (18.0, 95.0), "bsa": (1.2, 2.8), "who": (1.0, 4.0),
           "rvef": (5.0, 90.0), "lvef": (10.0, 95.0)}


def _draw_hemodynamics(rng, label, config):
    """One patient's waveforms and physics truth; None if the draw is unusable."""
    st = config.stats
    tpl = config.templates[label]
    n = config.n_samples
    heart_rate = float(np.clip(rng.normal(75.0, 10.0), 50.0, 110.0))
    period = 60.0 / heart_rate
    dt = period / n
    q_mean = st["pa_qflowpos"].mean[label] * math.exp(FLOW_SIGMA * rng.standard_normal()) / 60000.0
    rtot = tpl.rtot * math.exp(tpl.rtot_sigma * rng.standard_normal())
    rc = rtot * min(tpl.rc_fraction * math.exp(tpl.rc_sigma * rng.standard_normal()), 0.5)
    c = tpl.compliance * math.exp(tpl.compliance_sigma * rng.standard_normal())
    params = hemo.WindkesselParams(rc, c, rtot - rc)
    r = float(np.clip(rng.normal(tpl.reflection, tpl.reflection_sd), 0.0, 0.9))
    a0 = max(float(rng.normal(st["diast_area_fiesta"].mean[label], st["diast_area_fiesta"].std[label])), 2.5) * 1e-4
    rac = float(np.clip(rng.normal(st["rac_fiesta"].mean[label], st["rac_fiesta"].std[label]), 3.0, 80.0)) / 100.0

    t = np.arange(n) * dt
    ts = SYSTOLE_FRACTION * period
    shape = np.where(t < ts, np.sin(np.pi * np.minimum(t, ts) / ts), 0.0)
    q_inc = q_mean * shape / shape.mean()
    p_wk = hemo.simulate_windkessel(params, hemo.Waveform(q_inc, dt, hemo.FLOW)).samples

    # reflected wave: delayed copy of the incident flow pulse
    pp = float(p_wk.max() - p_wk.min())
    stiffness = pp / (math.sqrt(1.0 + rac) - 1.0)
    law0 = hemo.TubeLaw(0.0, a0, stiffness)
    zc = hemo.impedance_from_compliance(a0, law0.compliance(a0))
    delay = 2.0 * WAVE_PATH / hemo.wave_speed(a0, law0.compliance(a0))
    shift = int(round(delay / dt)) % n
    q_ref = -r * (np.roll(q_inc, shift) - q_mean)
    pressure = p_wk - zc * q_ref
    flow = q_inc + q_ref
    p0 = float(pressure.min())
    if not p0 > 0:
        return None
    pp = float(pressure.max() - p0)
    law = hemo.TubeLaw(p0, a0, pp / (math.sqrt(1.0 + rac) - 1.0))
    area = law.area(pressure)
    flow_w = hemo.Waveform(flow, dt, hemo.FLOW)
    area_w = hemo.Waveform(area, dt, hemo.AREA)
    p_w = hemo.Waveform(pressure, dt, hemo.PRESSURE)
    waves = hemo.wave_power_decomposition(p_w, flow_w, area_w,
                                          hemo.characteristic_impedance(p_w, area_w, law))
    return SynthPatient(flow_w, area_w, law, params, waves.ratio, r)


def _mean_pressure_mmhg(patient):
    return patient.truth.Rtot * patient.flow.mean() / MMHG


def _calibrate(config):
    """(alpha, beta) so class-wise mPAP means hit the targets after label rejection."""
    rng = np.random.default_rng([config.seed, 0xCA11B])
    pools = []
    for label in (0, 1):
        rows = []
        while len(rows) < config.pilot_size:
            p = _draw_hemodynamics(rng, label, config)
            if p is not None:
                rows.append((_mean_pressure_mmhg(p), p.wb_wtot, rng.standard_normal()))
        pools.append(np.array(rows))
    targets = np.array(config.mpap_targets, dtype=np.float64)
    aim = targets.copy()
    A = np.array([[pool[:, 0].mean(), pool[:, 1].mean()] for pool in pools])
    # a few damped corrections for the label cut; pushing further only trades
    # the no-PH mean against ever more rejections
    for _ in range(CALIBRATION_STEPS):
        alpha, beta = np.linalg.solve(A, aim)
        achieved = []
        for label, pool in enumerate(pools):
            m = alpha * pool[:, 0] + beta * pool[:, 1] + config.noise_mmhg * pool[:, 2]
            keep = (m >= config.threshold) if label else (m < config.threshold)
            achieved.append(m[keep].mean() if keep.any() else targets[label])
        aim = aim + 0.5 * (targets - np.array(achieved))
    return float(alpha), float(beta)


def _clamp(name, value):
    lo, hi = _BOUNDS.get(name, (0.0, math.inf))
    if name.startswith("rac") or name.endswith("ef"):
        hi = min(hi, 100.0)
    return float(min(max(value, lo), hi))


def synth_cohort(config: SynthConfig = SynthConfig()) -> SyntheticCohort:
    """Draw a cohort whose mPAP is planted in the waveform physics.

    mpap = alpha * Rtot * mean(Q) / 133.322 + beta * Wb/Wtot + noise, with the
    PH label drawn first and the patient redrawn until mpap falls on the
    label's side of the threshold. Demographics and MRI scalars come from the
    per-class Gaussians; area and flow scalars are measured from the
    synthesized waveforms. Physics columns are left empty for ``hemo``.
    """
    alpha, beta = _calibrate(config)
    rng = np.random.default_rng(config.seed)
    labels = (rng.random(config.n_patients) < config.positive_fraction).astype(int)
    rows, patients = [], []
    for label in labels:
        for _ in range(10_000):
            patient = _draw_hemodynamics(rng, label, config)
            if patient is None:
                continue
            mpap = alpha * _mean_pressure_mmhg(patient) + beta * patient.wb_wtot \
                + config.noise_mmhg * rng.standard_normal()
            if (mpap >= config.threshold) == bool(label):
                break
        else:
            raise CohortError("could not draw a patient consistent with its label")
        rec = {}
        for spec in FEATURES:
            s = config.stats[spec.name]
            if spec.group == PHYSICS:
                rec[spec.name] = np.nan
            elif spec.name == "gender":
                rec[spec.name] = "female" if rng.random() < s.mean[label] else "male"
            else:
                v = _clamp(spec.name, rng.normal(s.mean[label], s.std[label]))
                rec[spec.name] = round(v) if spec.name == "who" else v
        area, flow = patient.area.samples, patient.flow.samples
        a_min, a_max = float(area.min()), float(area.max())
        rac = 100.0 * (a_max - a_min) / a_min
        noise = 1.0 + 0.02 * rng.standard_normal(4)
        rec.update({"diast_area_fiesta": a_min * 1e4 * noise[0], "syst_area_fiesta": a_max * 1e4 * noise[1],
                    "diastolic_area_pc": a_min * 1e6 * noise[2], "systolic_area_pc": a_max * 1e6 * noise[3],
                    "pa_qflowpos": float(np.mean(np.maximum(flow, 0.0))) * 60000.0})
        rec["rac_fiesta"] = 100.0 * (rec["syst_area_fiesta"] / rec["diast_area_fiesta"] - 1.0)
        rec["rac_pc"] = 100.0 * (rec["systolic_area_pc"] / rec["diastolic_area_pc"] - 1.0)
        if config.missing:
            for spec in FEATURES:
                s = config.stats[spec.name]
                total = (N_NO_PH, N_PH)[label]
                if spec.group != PHYSICS and spec.kind == NUMERIC and rng.random() > s.count[label] / total:
                    rec[spec.name] = np.nan
        rec[TARGET] = float(mpap)
        rows.append([rec[c] for c in COLUMNS])
        patients.append(patient)
    cohort = Cohort(_frame_from_rows(rows), provenance=f"synthetic:seed={config.seed}")
    return SyntheticCohort(cohort, tuple(patients), (alpha, beta))


def waveform_name(index):
    return f"patient_{index:04d}.csv"


def write_synthetic(synthetic: SyntheticCohort, out_dir):
    """cohort.csv, waveforms/patient_NNNN.csv, laws.csv (tube law per patient), truth.csv."""
    out = Path(out_dir)
    (out / "waveforms").mkdir(parents=True, exist_ok=True)
    save_cohort(synthetic.cohort, out / "cohort.csv")
    with (out / "laws.csv").open("w", newline="", encoding="utf-8") as laws, \
            (out / "truth.csv").open("w", newline="", encoding="utf-8") as truth:
        lw, tw = csv.writer(laws, lineterminator="\n"), csv.writer(truth, lineterminator="\n")
        lw.writerow(["patient", "p0", "A0", "stiffness", "rho"])
        tw.writerow(["patient", "Rc", "C", "Rd", "Rtot", "Wb_Wtot", "reflection"])
        for i, p in enumerate(synthetic.patients):
            hemo.write_waveforms(out / "waveforms" / waveform_name(i), p.flow, p.area)
            lw.writerow([i, *(repr(float(v)) for v in (p.law.p0, p.law.A0, p.law.stiffness, p.law.rho))])
            tw.writerow([i, *(repr(float(v)) for v in (p.truth.Rc, p.truth.C, p.truth.Rd, p.truth.Rtot,
                                                         p.wb_wtot, p.reflection))])


def read_laws(path):
    laws = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                laws[int(row["patient"])] = hemo.TubeLaw(float(row["p0"]), float(row["A0"]),
                                                         float(row["stiffness"]), float(row["rho"]))
            except (KeyError, ValueError) as exc:
                raise CohortError(f"{path}: bad tube-law row {row}: {exc}") from None
    return laws
