"""Command-line front end.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import campaign as cp
from .controller import ProtectedStore, calibrate_wave_speed, piezo_records
from .metrics import TABLE_II, adc_metrics, fit_channel_model, single_tone_metrics, spectrum, write_metrics_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p, scenario=True, fmt=False, jobs=False):
    if scenario:
        p.add_argument("--scenario", help="scenario CSV (default: shipped 14-shot campaign)")
    p.add_argument("--config", help="JSON config overriding defaults")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", default="out", help="output directory")
    if fmt:
        p.add_argument("--format", default="csv,jsonl,plot-data",
                       help="comma list of csv, jsonl, plot-data")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def build_parser():
    p = _Parser(prog="impactsim", description="Dual-layer impact sensor simulator")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="synthesize sensor signals only")
    _common(s)
    s.add_argument("--waveforms", action="store_true", help="also dump the 8 channels per shot (.npz)")

    s = sub.add_parser("acquire", help="synthesize and capture; writes one store dump per shot")
    _common(s)

    s = sub.add_parser("analyze", help="solve impacts from store dumps")
    _common(s, scenario=False)
    s.add_argument("inputs", nargs="+", help="store dump files (*.tmr) or directories")

    s = sub.add_parser("campaign", help="end-to-end campaign with error statistics")
    _common(s, fmt=True, jobs=True)
    s.add_argument("--monte-carlo", type=int, default=0, metavar="N",
                   help="randomize N shots per scenario class instead of the listed geometry")

    s = sub.add_parser("metrics", help="ADC dynamic-performance suite on the channel model")
    _common(s, scenario=False)
    s.add_argument("--snrfs", type=float, default=TABLE_II["snrfs"], help="channel-model SNRFS target (dB)")
    s.add_argument("--ip3", type=float, default=TABLE_II["ip3"], help="channel-model IP3 target (dBFS)")
    s.add_argument("--mds-floor", choices=("bin", "integrated"), default="bin")

    s = sub.add_parser("calibrate", help="piezo wave-speed calibration of one layer")
    _common(s, scenario=False)
    s.add_argument("--layer", type=int, choices=(0, 1), default=0)
    s.add_argument("--true-speed", type=float, help="simulated film speed (m/s)")
    s.add_argument("--initial-speed", type=float, help="starting guess (m/s); default configured speed")
    s.add_argument("--noise", type=float, default=0.0, help="sensor noise RMS (V)")

    s = sub.add_parser("report", help="render figures from a campaign output directory")
    _common(s, fmt=True, jobs=True)
    s.add_argument("--input", help="existing campaign output (default: run the campaign into --out)")
    return p


def _config(args) -> cp.CampaignConfig:
    return cp.CampaignConfig.load(args.config) if args.config else cp.CampaignConfig()


def _specs(args):
    return cp.load_scenarios(args.scenario) if args.scenario else cp.table3()


def _formats(args):
    fmts = [f.strip() for f in args.format.split(",") if f.strip()]
    bad = [f for f in fmts if f not in cp.FORMATS]
    if bad:
        raise UsageError(f"unknown format(s): {', '.join(bad)}")
    return fmts


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_simulate(args):
    from .synth import simulate_shot

    cfg, specs = _config(args), _specs(args)
    os.makedirs(args.out, exist_ok=True)
    lines = []
    for spec in specs:
        seed = cp.shot_seed(args.seed, spec.shot_id)
        row = {"shot_id": spec.shot_id, "seed": seed}
        try:
            sig = simulate_shot(spec.scenario(seed), cfg.geometry, cfg.layout, cp.stream_config(cfg), noise=cfg.noise)
        except cp.GeometryError as e:
            row["status"] = str(e)
            lines.append(row)
            continue
        row.update(status="ok", impact_times=list(sig.impact_times),
                   true_hits=[list(p) for p in sig.true_hits], onsets=sig.onsets.tolist(),
                   peaks=sig.peaks.tolist(), noise_rms=sig.noise_rms,
                   breaks=sig.break_state.total)
        if args.waveforms:
            np.savez_compressed(os.path.join(args.out, f"shot_{spec.shot_id}.npz"),
                                fs=cfg.synth.fs, volts=np.array([w.samples for w in sig.waveforms], np.float32))
        lines.append(row)
    _write(os.path.join(args.out, "truth.jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))
    print(f"{len(lines)} shots -> {args.out}")


def cmd_acquire(args):
    cfg, specs = _config(args), _specs(args)
    os.makedirs(args.out, exist_ok=True)
    for spec in specs:
        cap = cp.capture_shot(spec, cfg, cp.shot_seed(args.seed, spec.shot_id))
        if cap.controller is None or cap.status != "captured":
            print(f"shot {spec.shot_id}: {cap.status}")
            continue
        with open(os.path.join(args.out, f"shot_{spec.shot_id}.tmr"), "wb") as fh:
            fh.write(cap.controller.store.dump())
        _write(os.path.join(args.out, f"shot_{spec.shot_id}.log"), cap.controller.log_lines())
        print(f"shot {spec.shot_id}: captured")


def cmd_analyze(args):
    cfg = _config(args)
    files = []
    for item in args.inputs:
        files += sorted(glob.glob(os.path.join(item, "*.tmr"))) if os.path.isdir(item) else [item]
    if not files:
        raise UsageError("no store dumps found")
    os.makedirs(args.out, exist_ok=True)
    out = []
    for path in files:
        with open(path, "rb") as fh:
            store = ProtectedStore.restore(fh.read())
        res = cp.analyze_store(store, cfg)
        row = {"file": os.path.basename(path), "status": res.status}
        if res.solution is not None:
            row.update(res.solution.to_dict())
        if res.size is not None:
            row["size_um"] = res.size.diameter * 1e6
        out.append(row)
        print(json.dumps(row, sort_keys=True))
    _write(os.path.join(args.out, "solutions.jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in out))


def _run_campaign(args):
    cfg, specs = _config(args), _specs(args)
    if getattr(args, "monte_carlo", 0):
        specs = cp.monte_carlo_specs(specs, args.monte_carlo, args.seed, cfg)
    return cp.run_campaign(specs, cfg, args.seed, jobs=max(1, args.jobs))


def _print_aggregates(agg):
    if not agg:
        print("no shots")
        return
    print(f"solved {agg['n_solved']}/{agg['n_shots']}")
    for key, scale, unit in (("pos_error_top_m", 100, "cm"), ("pos_error_bottom_m", 100, "cm"),
                             ("aoa_error_deg", 1, "deg"), ("speed_error_kms", 1, "km/s"),
                             ("speed_error_fast_kms", 1, "km/s"), ("size_error_um", 1, "um")):
        st = agg[key]
        if st["n"]:
            print(f"  {key:22s} mean {st['mean'] * scale:8.3f} {unit:5s} sd {st['std'] * scale:8.3f}  (n={st['n']})")


def cmd_campaign(args):
    fmts = _formats(args)
    report = _run_campaign(args)
    for path in cp.emit(report, args.out, fmts):
        print(path)
    _print_aggregates(report.aggregates)


def cmd_report(args):
    from .plotting import campaign_figures

    fmts = _formats(args)
    src = args.input
    if src is None:
        report = _run_campaign(args)
        cp.emit(report, args.out, sorted(set(fmts) | {"plot-data"}))
        src = args.out
    path = os.path.join(src, "plot_data.json")
    if not os.path.exists(path):
        raise UsageError(f"{path} not found; run the campaign with --format plot-data")
    with open(path) as fh:
        pdata = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    for p in campaign_figures(pdata, args.out):
        print(p)
    with open(os.path.join(src, "summary.json")) as fh:
        _print_aggregates(json.load(fh)["aggregates"])


def cmd_metrics(args):
    from .plotting import spectrum_plot

    extra = {}
    if args.config:
        with open(args.config) as fh:
            extra = json.load(fh).get("channel", {})
    model = fit_channel_model(args.snrfs, args.ip3, **extra)
    rng = np.random.default_rng(args.seed)
    m = adc_metrics(model, rng, mds_floor=args.mds_floor)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        write_metrics_csv([("channel_model", m)], fh)
    rec = model.capture([(20.0173e3, model.tone_amplitude(-0.05))], rng)
    sp = spectrum(rec)
    single_tone_metrics(rec)
    _write(os.path.join(args.out, "spectrum.txt"), sp.to_text())
    spectrum_plot(sp, os.path.join(args.out, "spectrum.png"), "single-tone spectrum")
    print(f"{'metric':8s} {'model':>9s} {'board':>9s}")
    for key, val in (("snrfs", m.snrfs), ("sinad", m.sinad), ("ip3", m.ip3), ("mds", m.mds),
                     ("sfdr", m.sfdr), ("enob", m.enob)):
        print(f"{key:8s} {val:9.2f} {TABLE_II[key]:9.2f}")


def cmd_calibrate(args):
    cfg = _config(args)
    geom = cfg.geometry
    nominal = geom.wave_speed_per_layer[args.layer]
    true = args.true_speed or nominal
    guess = args.initial_speed or nominal
    rng = np.random.default_rng(args.seed)
    recs = piezo_records(args.layer, geom, true, args.noise, rng, acs=cfg.acs)
    res = calibrate_wave_speed(recs, geom, args.layer, guess)
    out = {"layer": args.layer, "true_speed": true, "initial_speed": guess, "speed": res.speed,
           "error_percent": 100 * (res.speed - true) / true, "iterations": res.iterations,
           "position_error_m": res.position_error}
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, f"calibration_layer{args.layer}.json"), json.dumps(out, indent=1) + "\n")
    print(json.dumps(out))


COMMANDS = {
    "simulate": cmd_simulate,
    "acquire": cmd_acquire,
    "analyze": cmd_analyze,
    "campaign": cmd_campaign,
    "metrics": cmd_metrics,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.cmd](args)
    except (UsageError, cp.ConfigError, cp.ScenarioParseError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError) as e:
        print(f"impactsim: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"impactsim: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
