"""Shot campaigns: scenario files, deterministic per-shot seeding, the
synth -> acquisition -> controller -> analysis chain, and report emission.

Scenario files are CSV with ``#`` comment lines.  Required columns:

    shot_id, material, diameter_um, speed_kms, aoa_x_deg, aoa_y_deg,
    entry_x_m, entry_y_m

Optional: ``snr_db`` (blank = noise floor from the amplitude law) and any
``reported_*`` columns, which are carried through to the report untouched.
The shipped 14-shot campaign is ``impactsim/data/table3.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .acquisition import AcsConfig, RgsConfig, acquire, rgs_measure
from .analysis import (
    PIPELINE_ARRIVAL,
    ArrivalParams,
    BelowThresholdError,
    CausalityError,
    NoSignalError,
    SingularGeometryError,
    analyze_capture,
    estimate_size,
    regress_loglinear,
)
from .controller import CdssEvent, Controller, EventRecord, RecordKind
from .geometry import BreakState, GeometryError, GridLayout, SensorGeometry
from .synth import (
    ClippedTransitError,
    FilmProps,
    ImpactScenario,
    SynthConfig,
    simulate_shot,
    thermistor_readout,
)


class ScenarioParseError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class ConfigError(ValueError):
    pass


# --- seeding ----------------------------------------------------------------------

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * MIX1) & MASK64
    x = ((x ^ (x >> 27)) * MIX2) & MASK64
    return x ^ (x >> 31)


def shot_seed(master_seed: int, shot_id: int) -> int:
    """Per-shot seed; depends only on (master, shot_id) so adding shots never
    perturbs existing ones."""
    return splitmix64((master_seed & MASK64) ^ splitmix64(shot_id & MASK64))


# --- scenarios --------------------------------------------------------------------

REQUIRED = ("shot_id", "material", "diameter_um", "speed_kms", "aoa_x_deg", "aoa_y_deg",
            "entry_x_m", "entry_y_m")


@dataclass(frozen=True)
class ShotSpec:
    shot_id: int
    material: str
    diameter_um: float
    speed_kms: float
    aoa_x_deg: float
    aoa_y_deg: float
    entry_x_m: float
    entry_y_m: float
    snr_db: float | None = None
    extra: tuple = ()  # (column, text) pairs carried into the report

    def scenario(self, seed: int) -> ImpactScenario:
        return ImpactScenario(self.shot_id, self.material, self.diameter_um * 1e-6, self.speed_kms * 1e3,
                              self.aoa_x_deg, self.aoa_y_deg, (self.entry_x_m, self.entry_y_m),
                              self.snr_db, seed)


def parse_scenarios(text: str) -> list[ShotSpec]:
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        return []
    header_line, header = lines[0]
    cols = [c.strip() for c in next(csv.reader([header]))]
    missing = [c for c in REQUIRED if c not in cols]
    if missing:
        raise ScenarioParseError(f"missing columns: {', '.join(missing)}", header_line)
    specs, seen = [], set()
    for lineno, ln in lines[1:]:
        vals = [v.strip() for v in next(csv.reader([ln]))]
        if len(vals) != len(cols):
            raise ScenarioParseError(f"expected {len(cols)} fields, got {len(vals)}", lineno)
        row = dict(zip(cols, vals))
        try:
            sid = int(row["shot_id"])
            nums = {c: float(row[c]) for c in REQUIRED[2:]}
            snr = float(row["snr_db"]) if row.get("snr_db") else None
        except ValueError as e:
            raise ScenarioParseError(str(e), lineno) from None
        if sid in seen:
            raise ScenarioParseError(f"duplicate shot_id {sid}", lineno)
        seen.add(sid)
        extra = tuple((c, row[c]) for c in cols if c not in REQUIRED and c != "snr_db")
        spec = ShotSpec(sid, row["material"], snr_db=snr, extra=extra, **nums)
        try:
            spec.scenario(0)
        except ValueError as e:
            raise ScenarioParseError(str(e), lineno) from None
        specs.append(spec)
    return specs


def load_scenarios(path) -> list[ShotSpec]:
    with open(path) as fh:
        return parse_scenarios(fh.read())


def table3_text() -> str:
    return resources.files("impactsim").joinpath("data/table3.csv").read_text()


def table3() -> list[ShotSpec]:
    return parse_scenarios(table3_text())


# --- configuration ----------------------------------------------------------------

def _tuples(d):
    return {k: tuple(_tuples_seq(v)) if isinstance(v, list) else v for k, v in d.items()}


def _tuples_seq(v):
    return [tuple(x) if isinstance(x, list) else x for x in v]


@dataclass(frozen=True)
class CampaignConfig:
    geometry: SensorGeometry = SensorGeometry()
    layout: GridLayout = GridLayout()
    synth: SynthConfig = SynthConfig()
    acs: AcsConfig = AcsConfig()
    rgs: RgsConfig = RgsConfig()
    arrival: ArrivalParams = PIPELINE_ARRIVAL
    noise: bool = True
    temperature_c: float = 25.0
    max_residual: float = 0.01

    SECTIONS = ("geometry", "layout", "acs", "rgs", "arrival")

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        """Override defaults from a nested dict such as
        ``{"noise": false, "film": {"center_freq": 50e3}, "acs": {...}}``."""
        base = cls()
        kw = {}
        try:
            for key, val in d.items():
                if key in cls.SECTIONS:
                    kw[key] = dataclasses.replace(getattr(base, key), **_tuples(val))
                elif key in ("synth", "film"):
                    continue
                elif key in ("noise", "temperature_c", "max_residual"):
                    kw[key] = type(getattr(base, key))(val)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            synth = dataclasses.replace(base.synth, **_tuples(d.get("synth", {})))
            if "film" in d:
                synth = dataclasses.replace(synth, film=dataclasses.replace(FilmProps(), **d["film"]))
            kw["synth"] = synth
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = {k: dataclasses.asdict(getattr(self, k)) for k in self.SECTIONS}
        d["synth"] = dataclasses.asdict(self.synth)
        d.update(noise=self.noise, temperature_c=self.temperature_c, max_residual=self.max_residual)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- one shot ---------------------------------------------------------------------

COLUMNS = (
    "shot_id", "status", "material", "diameter_um", "speed_kms", "aoa_x_deg", "aoa_y_deg",
    "snr_db", "seed",
    "measured_aoa_x_deg", "measured_aoa_y_deg", "measured_speed_kms",
    "aoa_error_deg", "speed_error_kms", "pos_error_top_m", "pos_error_bottom_m",
    "measured_size_um", "size_error_um", "amplitude_v",
)
FLOAT_COLUMNS = {c for c in COLUMNS if c not in ("shot_id", "status", "material", "seed")}


def _direction(ax, ay):
    v = np.array([math.tan(math.radians(ax)), math.tan(math.radians(ay)), 1.0])
    return v / np.linalg.norm(v)


def trajectory_angle_error(ax, ay, mx, my) -> float:
    """Angle in degrees between true and measured trajectories."""
    c = float(np.clip(_direction(ax, ay) @ _direction(mx, my), -1.0, 1.0))
    return math.degrees(math.acos(c))


@dataclass
class ShotCapture:
    status: str
    signals: object = None  # PhysicalSignals
    controller: Controller | None = None


SUPPLIES_OK = {"3v3": True, "5v": True, "12v": True}


# seconds of stream kept beyond the capture window: the trigger never precedes
# the impact, but may follow it by the travel time to the nearest sensor
PRE_MARGIN, POST_MARGIN = 0.15e-3, 0.5e-3


def stream_config(cfg: CampaignConfig) -> SynthConfig:
    """Synth config whose stream is long enough for the configured record and
    pre-trigger split; the defaults already are."""
    ts = cfg.acs.sample_period
    pre = cfg.acs.pretrigger * ts + PRE_MARGIN
    post = (cfg.acs.record_len - cfg.acs.pretrigger) * ts + POST_MARGIN
    syn = cfg.synth
    if syn.pre_impact >= pre and syn.post_impact >= post:
        return syn
    return dataclasses.replace(syn, pre_impact=max(syn.pre_impact, pre), post_impact=max(syn.post_impact, post))


def capture_shot(spec: ShotSpec, cfg: CampaignConfig, seed: int) -> ShotCapture:
    """Synthesize one shot and run it through the instrument: a periodic grid
    measurement, then the triggered acoustic capture and post-impact grid
    readout, both stored in the controller's protected memory."""
    rng = np.random.default_rng(seed)
    try:
        sig = simulate_shot(spec.scenario(seed), cfg.geometry, cfg.layout, stream_config(cfg), noise=cfg.noise)
    except ClippedTransitError:
        return ShotCapture("clipped_transit")
    except GeometryError:
        return ShotCapture("outside_area")
    ctl = Controller()
    ctl.handle(CdssEvent.INIT_DONE, 0.0)
    dT = cfg.temperature_c - cfg.rgs.reference_temp
    temps = thermistor_readout(np.full(8, cfg.temperature_c), rng_seed=seed, noise=0.05 if cfg.noise else 0.0)
    ctl.handle(CdssEvent.PERIODIC_TIMER, 0.0)
    baseline = rgs_measure(BreakState(), cfg.layout, dT, cfg.rgs, rng, temps)
    ctl.record(EventRecord(RecordKind.PERIODIC, ctl.clock.read(0.0), None, baseline, list(temps), dict(SUPPLIES_OK)))
    ctl.handle(CdssEvent.DONE, 0.0)

    capture = acquire(sig.waveforms, cfg.acs, noise_rms=sig.noise_rms)
    if capture is None:
        return ShotCapture("no_trigger", sig, ctl)
    t_hit = sig.impact_times[0]
    ctl.handle(CdssEvent.IMPACT_TRIGGER, t_hit)
    stamp = ctl.clock.read(t_hit)
    grid = rgs_measure(sig.break_state, cfg.layout, dT, cfg.rgs, rng, temps, timestamp=stamp)
    ctl.record(EventRecord(RecordKind.IMPACT, stamp, capture, grid, list(temps), dict(SUPPLIES_OK)))
    ctl.handle(CdssEvent.DONE, t_hit)
    return ShotCapture("captured", sig, ctl)


@dataclass
class StoreAnalysis:
    status: str
    solution: object = None  # ImpactSolution
    size: object = None  # SizeEstimate
    amplitude: float | None = None


def analyze_store(store, cfg: CampaignConfig) -> StoreAnalysis:
    """Analyze the latest impact record in a protected store, using the most
    recent periodic grid measurement before it as the break baseline."""
    baseline = impact = None
    for i in range(len(store)):
        res = store.read(i)
        if res.payload is None:
            continue
        rec = res.record()
        if rec.kind is RecordKind.PERIODIC and rec.grid is not None:
            baseline = rec.grid
        elif rec.kind is RecordKind.IMPACT:
            impact = rec
    if impact is None:
        return StoreAnalysis("no_record")
    out = StoreAnalysis("ok", amplitude=float(max(np.max(np.abs(r.volts)) for r in impact.acoustic)))
    try:
        out.size = estimate_size(impact.grid, cfg.layout, baseline)
    except BelowThresholdError:
        pass
    try:
        out.solution, _ = analyze_capture(impact.acoustic, cfg.geometry, cfg.arrival, cfg.max_residual)
    except CausalityError:
        out.status = "causality"
    except SingularGeometryError:
        out.status = "singular"
    except NoSignalError:
        out.status = "no_signal"
    if out.solution is not None and out.size is not None:
        out.solution.size_estimate = out.size.diameter
    return out


def run_shot(spec: ShotSpec, cfg: CampaignConfig, seed: int) -> dict:
    """Full chain for one shot; failures become a status, never an exception."""
    row = {c: None for c in COLUMNS}
    row.update(shot_id=spec.shot_id, material=spec.material, diameter_um=spec.diameter_um,
               speed_kms=spec.speed_kms, aoa_x_deg=spec.aoa_x_deg, aoa_y_deg=spec.aoa_y_deg, seed=seed)
    row.update(dict(spec.extra))
    cap = capture_shot(spec, cfg, seed)
    sig = cap.signals
    if sig is not None and sig.noise_rms > 0:
        row["snr_db"] = 20.0 * math.log10(float(sig.peaks.max()) / sig.noise_rms)
    if cap.status != "captured":
        row["status"] = cap.status
        return row
    res = analyze_store(cap.controller.store, cfg)
    row["status"] = res.status
    row["amplitude_v"] = res.amplitude
    if res.size is not None:
        row["measured_size_um"] = res.size.diameter * 1e6
        row["size_error_um"] = res.size.diameter * 1e6 - spec.diameter_um
    sol = res.solution
    if sol is None:
        return row
    p1, p2 = sig.true_hits
    row.update(
        measured_aoa_x_deg=sol.theta_x,
        measured_aoa_y_deg=sol.theta_y,
        measured_speed_kms=sol.c_p / 1e3,
        aoa_error_deg=trajectory_angle_error(spec.aoa_x_deg, spec.aoa_y_deg, sol.theta_x, sol.theta_y),
        speed_error_kms=abs(sol.c_p / 1e3 - spec.speed_kms),
        pos_error_top_m=math.dist(sol.top.position, p1),
        pos_error_bottom_m=math.dist(sol.bottom.position, p2),
    )
    return row


def _run_job(args):
    return run_shot(*args)


# --- campaign ---------------------------------------------------------------------

FAST_SPEED_KMS = 4.0  # shots at or above this are the "5 km/s class"


def _stats(vals):
    a = np.asarray([v for v in vals if v is not None], dtype=float)
    if a.size == 0:
        return {"n": 0, "mean": None, "std": None}
    return {"n": int(a.size), "mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0}


def aggregate(rows) -> dict:
    """Summary statistics over successful shots; recomputable from rows."""
    if not rows:
        return {}
    ok = [r for r in rows if r["status"] == "ok"]
    fast = [r for r in ok if r["speed_kms"] >= FAST_SPEED_KMS]
    statuses = {}
    for r in rows:
        statuses[r["status"]] = statuses.get(r["status"], 0) + 1
    return {
        "n_shots": len(rows),
        "n_solved": len(ok),
        "solve_rate": len(ok) / len(rows),
        "status_counts": dict(sorted(statuses.items())),
        "aoa_error_deg": _stats(r["aoa_error_deg"] for r in ok),
        "speed_error_kms": _stats(r["speed_error_kms"] for r in ok),
        "speed_error_fast_kms": _stats(r["speed_error_kms"] for r in fast),
        "pos_error_top_m": _stats(r["pos_error_top_m"] for r in ok),
        "pos_error_bottom_m": _stats(r["pos_error_bottom_m"] for r in ok),
        "size_error_um": _stats(r["size_error_um"] for r in rows),
    }


@dataclass
class CampaignReport:
    rows: list
    master_seed: int
    config_digest: str
    aggregates: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"master_seed": self.master_seed, "config_digest": self.config_digest,
                "aggregates": self.aggregates,
                "seeds": {str(r["shot_id"]): r["seed"] for r in self.rows}}


def run_campaign(specs, cfg: CampaignConfig | None = None, master_seed: int = 0, jobs: int = 1) -> CampaignReport:
    """``specs`` is a list of ShotSpec, or a path to a scenario file."""
    if isinstance(specs, (str, os.PathLike)):
        specs = load_scenarios(specs)
    cfg = cfg or CampaignConfig()
    work = [(s, cfg, shot_seed(master_seed, s.shot_id)) for s in specs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_run_job, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        rows = [_run_job(w) for w in work]
    rows.sort(key=lambda r: r["shot_id"])
    return CampaignReport(rows, master_seed, cfg.digest(), aggregate(rows))


# --- Monte Carlo around the shipped geometries ------------------------------------

def monte_carlo_specs(base, shots_per_class=100, master_seed=0, cfg: CampaignConfig | None = None,
                      margin=0.02) -> list[ShotSpec]:
    """Randomize entry points for each class, keeping the exit on the lower
    sheet.  Each class runs at the SNR the amplitude law gives for its shipped
    geometry."""
    cfg = cfg or CampaignConfig()
    geom = cfg.geometry
    w, hgt = geom.active_area
    h = geom.layer_separation_h
    out = []
    for spec in base:
        snr = spec.snr_db
        if snr is None:
            snr = class_snr(spec, cfg)
        rng = np.random.default_rng(shot_seed(master_seed, 10_000_000 + spec.shot_id))
        dx = h * math.tan(math.radians(spec.aoa_x_deg))
        dy = h * math.tan(math.radians(spec.aoa_y_deg))
        xlo, xhi = max(margin, margin - dx), min(w - margin, w - margin - dx)
        ylo, yhi = max(margin, margin - dy), min(hgt - margin, hgt - margin - dy)
        if xlo >= xhi or ylo >= yhi:
            raise GeometryError(f"shot {spec.shot_id}: no entry point keeps the exit inside")
        for k in range(shots_per_class):
            out.append(dataclasses.replace(
                spec, shot_id=spec.shot_id * 1000 + k, entry_x_m=float(rng.uniform(xlo, xhi)),
                entry_y_m=float(rng.uniform(ylo, yhi)), snr_db=snr))
    return out


def class_snr(spec: ShotSpec, cfg: CampaignConfig) -> float:
    """Peak-to-noise ratio (dB) of the strongest channel at the shot's geometry."""
    from .synth import clean_channels

    packets, *_ = clean_channels(spec.scenario(0), cfg.geometry, cfg.synth)
    peak = max(p.peak for p in packets)
    return 20.0 * math.log10(peak / cfg.synth.amplitude_law.noise_rms)


# --- emission ---------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _columns(rows):
    extra = []
    for r in rows:
        extra += [k for k in r if k not in COLUMNS and k not in extra]
    return list(COLUMNS) + extra


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    cols = _columns(rows)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in rec.items():
            if v == "":
                row[k] = None
            elif k in FLOAT_COLUMNS:
                row[k] = float(v)
            elif k in ("shot_id", "seed"):
                row[k] = int(v)
            else:
                row[k] = v
        out.append(row)
    return out


def rows_to_jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def plot_data(report: CampaignReport) -> dict:
    """(x, y) series for the position-error bar chart and the
    amplitude-versus-size scatter with its log-log regression line."""
    ok = [r for r in report.rows if r["status"] == "ok"]
    pos = {
        "shot_id": [r["shot_id"] for r in ok],
        "top_cm": [100 * r["pos_error_top_m"] for r in ok],
        "bottom_cm": [100 * r["pos_error_bottom_m"] for r in ok],
    }
    pts = [(r["diameter_um"], r["amplitude_v"], r["material"]) for r in report.rows
           if r["amplitude_v"] is not None]
    amp = {"diameter_um": [p[0] for p in pts], "amplitude_v": [p[1] for p in pts],
           "material": [p[2] for p in pts], "regression": None}
    if len({p[0] for p in pts}) >= 2 and len(pts) >= 3:
        reg = regress_loglinear([p[0] for p in pts], [p[1] for p in pts])
        xs = np.geomspace(min(amp["diameter_um"]), max(amp["diameter_um"]), 50)
        amp["regression"] = {**reg.to_dict(), "line_x": xs.tolist(),
                             "line_y": (10 ** (reg.intercept + reg.slope * np.log10(xs))).tolist()}
    return {"position_error": pos, "amplitude_vs_size": amp}


FORMATS = ("csv", "jsonl", "plot-data")


def emit(report: CampaignReport, out_dir, formats=FORMATS) -> list[str]:
    """Write the report; returns the paths written.  ``summary.json`` (seeds,
    config digest, aggregates) is always written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
        written.append(path)

    for f in formats:
        if f == "csv":
            put("shots.csv", rows_to_csv(report.rows))
        elif f == "jsonl":
            put("shots.jsonl", rows_to_jsonl(report.rows))
        elif f == "plot-data":
            put("plot_data.json", json.dumps(plot_data(report), sort_keys=True, indent=1) + "\n")
        else:
            raise ValueError(f"unknown format {f!r}")
    put("summary.json", json.dumps(report.summary(), sort_keys=True, indent=1) + "\n")
    return written
