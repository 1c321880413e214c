"""Acceptance suite: one or more tests per criterion, each marked with
``criterion`` so the run ends with a PASS/FAIL line per criterion."""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from impactsim import campaign as cp
from impactsim.acquisition import (
    AcsConfig,
    DigitizedRecord,
    RgsConfig,
    diff_counts_to_ohms,
    highpass,
    measure_diff_channel,
    measure_sum_channel,
    quantize,
    rgs_measure,
    sum_counts_to_ohms,
)
from impactsim.analysis import (
    ArrivalParams,
    BelowThresholdError,
    energy_arrival_time,
    estimate_size,
    multilaterate,
)
from impactsim.controller import (
    CdssEvent,
    CdssState,
    ProtectedStore,
    ReadStatus,
    calibrate_wave_speed,
    piezo_records,
    step,
)
from impactsim.geometry import BreakState, GridLayout, SensorGeometry, traces_intersected
from impactsim.metrics import ChannelModel, enob, single_tone_metrics
from impactsim.synth import WAVELET_FILM, Waveform, propagate_waveform

G, L = SensorGeometry(), GridLayout()
TS = 2e-6
H = G.layer_separation_h


def crit(n, title):
    return pytest.mark.criterion(n, title)


def note(request, text):
    request.node.user_properties.append(("measured", text))


# --- 1 ----------------------------------------------------------------------------

C1 = "noiseless 14-shot round trip within quantization bounds, < 10 s"


def path_length(ax, ay):
    return H * math.sqrt(1 + math.tan(math.radians(ax)) ** 2 + math.tan(math.radians(ay)) ** 2)


@crit(1, C1)
def test_noiseless_round_trip(request):
    t0 = time.perf_counter()
    rep = cp.run_campaign(cp.table3(), cp.CampaignConfig(noise=False), master_seed=0)
    elapsed = time.perf_counter() - t0
    c_top, c_bot = G.wave_speed_per_layer
    worst = {"top": 0.0, "bottom": 0.0, "speed": 0.0, "aoa": 0.0}
    for row in rep.rows:
        assert row["status"] == "ok", row
        lp = path_length(row["aoa_x_deg"], row["aoa_y_deg"])
        cp_true = row["speed_kms"] * 1e3
        speed_bound = cp_true**2 * TS / lp
        aoa_bound = math.degrees(math.asin((c_top + c_bot) * TS / lp))
        assert row["pos_error_top_m"] <= c_top * TS
        assert row["pos_error_bottom_m"] <= c_bot * TS
        assert row["speed_error_kms"] * 1e3 <= speed_bound
        assert row["aoa_error_deg"] <= aoa_bound
        worst["top"] = max(worst["top"], row["pos_error_top_m"] / (c_top * TS))
        worst["bottom"] = max(worst["bottom"], row["pos_error_bottom_m"] / (c_bot * TS))
        worst["speed"] = max(worst["speed"], row["speed_error_kms"] * 1e3 / speed_bound)
        worst["aoa"] = max(worst["aoa"], row["aoa_error_deg"] / aoa_bound)
    note(request, "worst/bound " + " ".join(f"{k} {v:.2f}" for k, v in worst.items()) + f", {elapsed:.1f} s")
    assert elapsed < 10.0


# --- 2 ----------------------------------------------------------------------------

C2 = "Monte Carlo 100 shots/class: position <= 2.5 cm, AoA <= 8 deg, fast speed <= 0.5 km/s, < 5 min"


@crit(2, C2)
def test_monte_carlo_envelope(request):
    specs = cp.monte_carlo_specs(cp.table3(), shots_per_class=100, master_seed=2024)
    assert len(specs) == 1400
    assert all(13.0 - 0.01 <= s.snr_db <= 24.0 + 0.01 for s in specs)
    t0 = time.perf_counter()
    rep = cp.run_campaign(specs, master_seed=2024, jobs=os.cpu_count() or 1)
    elapsed = time.perf_counter() - t0
    agg = rep.aggregates
    top = agg["pos_error_top_m"]["mean"]
    bot = agg["pos_error_bottom_m"]["mean"]
    aoa = agg["aoa_error_deg"]["mean"]
    fast = agg["speed_error_fast_kms"]["mean"]
    note(request, f"top {top * 100:.2f} cm, bottom {bot * 100:.2f} cm, AoA {aoa:.2f} deg, "
                  f"fast speed {fast:.3f} km/s, solved {agg['n_solved']}/{agg['n_shots']}, {elapsed:.0f} s")
    assert top <= 0.025 and bot <= 0.025
    assert aoa <= 8.0
    assert fast <= 0.5
    assert elapsed < 300.0


# --- 3 ----------------------------------------------------------------------------

C3 = "RGS linearity R^2 >= 0.999 on both channels, single break >= 5 sigma"


def r_squared(x, y):
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return 1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))


@crit(3, C3)
def test_rgs_linearity(request):
    rgs = RgsConfig()
    rng = np.random.default_rng(3)
    diff_in = np.linspace(-100, 100, 41)
    sum_in = np.linspace(800, 1200, 41)
    d = np.array([measure_diff_channel(r, rgs, rng) for r in diff_in])
    s = np.array([measure_sum_channel(r, rgs, rng) for r in sum_in])
    r2d, r2s = r_squared(diff_in, d), r_squared(sum_in, s)
    # the full chain returns the input in ohms
    assert diff_counts_to_ohms(d, rgs) == pytest.approx(diff_in, abs=0.1)
    assert sum_counts_to_ohms(s, rgs) == pytest.approx(sum_in, abs=0.5)
    note(request, f"R2 diff {r2d:.6f}, sum {r2s:.6f}")
    assert r2d >= 0.999 and r2s >= 0.999


@crit(3, C3)
def test_single_break_resolved(request):
    rng = np.random.default_rng(4)
    clean = [rgs_measure(BreakState(), L, rng=rng).quadrants[0].diff_counts for _ in range(200)]
    hit = BreakState({(0, "A"): 1})
    one = [rgs_measure(hit, L, rng=rng).quadrants[0].diff_counts for _ in range(200)]
    sigma = np.std(clean, ddof=1)
    shift = np.mean(one) - np.mean(clean)
    note(request, f"shift {shift:.2f} counts = {shift / sigma:.0f} sigma")
    assert shift >= 5 * sigma


# --- 4 ----------------------------------------------------------------------------

C4 = "500 ohm load over 0-70 degC varies <= +/-18 mOhm"


@crit(4, C4)
def test_temperature_budget(request):
    # each chamber setpoint is the mean of 16 averaged readings
    rgs = RgsConfig()
    rng = np.random.default_rng(5)
    temps = np.linspace(0, 70, 15)
    inferred = np.array([
        np.mean([sum_counts_to_ohms(measure_sum_channel(500.0, rgs, rng, board_temp=t), rgs) for _ in range(16)])
        for t in temps
    ])
    dev = inferred - 500.0
    note(request, f"deviation {dev.min() * 1e3:+.1f} .. {dev.max() * 1e3:+.1f} mOhm")
    assert np.all(np.abs(dev) <= 0.018)


# --- 5 ----------------------------------------------------------------------------

C5 = "SNRFS within 0.5 dB of construction, ENOB(59.8) = 9.6, ideal SINAD 74.0 dB"
FS, N, FULL = 500e3, 16384, 3.7
P_FS = (FULL / 2) ** 2 / 2


@crit(5, C5)
@pytest.mark.parametrize("snr", [40.0, 55.0, 65.0])
def test_constructed_snrfs(request, snr):
    rng = np.random.default_rng(int(snr))
    t = np.arange(N) / FS
    x = 0.9 * FULL / 2 * np.sin(2 * np.pi * 20.0173e3 * t + 0.4)
    x += rng.normal(0, math.sqrt(P_FS / 10 ** (snr / 10)), N)
    m = single_tone_metrics(x, FS, FULL)
    note(request, f"SNRFS {m.snrfs:.2f} for {snr:.0f}")
    assert m.snrfs == pytest.approx(snr, abs=0.5)


@crit(5, C5)
def test_enob_table_value(request):
    note(request, f"ENOB(59.8) {enob(59.8):.3f}")
    assert enob(59.8) == pytest.approx(9.6, abs=0.05)


@crit(5, C5)
def test_ideal_quantizer_sinad(request):
    ch = ChannelModel()
    m = single_tone_metrics(ch.capture([(20.0173e3, ch.tone_amplitude(-0.01), 0.2)]))
    note(request, f"ideal SINAD {m.sinad:.2f} dB")
    assert m.sinad == pytest.approx(74.0, abs=0.3)


# --- 6 ----------------------------------------------------------------------------

C6 = "ToA: 95% of 1000 wavelets within 2 samples; rectangular burst exact"


def wavelet_error(rng, acs, fs=8e6, span=2e-3, snr_db=20.0):
    layer = int(rng.integers(2))
    sensor = G.sensors(layer)[int(rng.integers(4))]
    p = rng.uniform(0, 0.5, 2)
    c = G.wave_speed_per_layer[layer]
    film = replace(WAVELET_FILM, group_speed=c)
    onset = 0.3e-3 + rng.uniform(0, 2e-6)
    w = propagate_waveform(p, 1.0, sensor, film, onset - np.hypot(*(p - sensor)) / c, fs)
    x = np.zeros(int(span * fs))
    k0 = int(round(w.t0 * fs))
    x[k0 : k0 + len(w.samples)] += w.samples
    x *= 0.5 / w.peak
    x += rng.standard_normal(len(x)) * 0.5 * 10 ** (-snr_db / 20)
    hp = highpass(Waveform(0.0, fs, x), acs)
    rec = DigitizedRecord(0, quantize(hp.samples[:: int(round(TS * fs))], acs), 0.0, TS)
    try:
        return energy_arrival_time(rec, ArrivalParams(search_window=1.2e-3, crossing="last")) - w.onset
    except Exception:
        return math.inf


@crit(6, C6)
def test_toa_wavelets(request):
    rng = np.random.default_rng(6)
    acs = AcsConfig()
    err = np.array([wavelet_error(rng, acs) for _ in range(1000)])
    frac = float(np.mean(np.abs(err) <= 2 * TS))
    note(request, f"{100 * frac:.1f}% within 4 us, median {np.median(err) * 1e6:+.2f} us")
    assert frac >= 0.95


@crit(6, C6)
@pytest.mark.parametrize("start,dur", [(1000, 500), (777, 1234), (2500, 40)])
def test_toa_rectangular_burst(start, dur):
    v = np.zeros(5000)
    v[start : start + dur] = 1.0
    rec = DigitizedRecord(0, v, 0.0, TS, volts_per_count=1.0)
    assert energy_arrival_time(rec) == pytest.approx((start + 0.15 * dur) * TS, abs=1e-12)


# --- 7 ----------------------------------------------------------------------------

C7 = "closed form within 1 mm of a 0.5 mm grid range-difference minimizer, 1000 points"
GRID = np.arange(0.0, 0.5 + 1e-9, 0.0005)


def rd_cost(points, t, sensors, c, ref):
    d = np.linalg.norm(points[:, None, :] - sensors[None], axis=2)
    r = d - d[:, [ref]] - c * (t - t[ref])
    return (r * r).sum(axis=1)


def grid_oracle(t, sensors, c, ref, keep=20, half=8):
    """Minimizer over the 0.5 mm grid: a 2 mm pass, then the full-resolution
    grid in a window around each of the best ``keep`` coarse points."""
    xs = GRID[::4]
    pts = np.column_stack([a.ravel() for a in np.meshgrid(xs, xs)])
    best, best_cost = None, math.inf
    for b in pts[np.argsort(rd_cost(pts, t, sensors, c, ref))[:keep]]:
        lo = np.clip(np.round(b / 0.0005).astype(int) - half, 0, len(GRID) - 1)
        hi = lo + 2 * half + 1
        win = np.column_stack([a.ravel() for a in np.meshgrid(GRID[lo[0] : hi[0]], GRID[lo[1] : hi[1]])])
        cost = rd_cost(win, t, sensors, c, ref)
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best, best_cost = win[j], cost[j]
    return best


def exhaustive_oracle(t, sensors, c, ref):
    best, best_cost = None, math.inf
    for x in GRID:
        pts = np.column_stack([np.full(len(GRID), x), GRID])
        cost = rd_cost(pts, t, sensors, c, ref)
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best, best_cost = pts[j], cost[j]
    return best


def lateration_case(rng):
    layer = int(rng.integers(2))
    sensors, c = G.sensors(layer), G.wave_speed_per_layer[layer]
    p = rng.uniform(0, 0.5, 2)
    t = 1e-4 + np.hypot(*(sensors - p).T) / c
    return t, sensors, c, int(np.argmin(t))


@crit(7, C7)
def test_multilateration_matches_grid(request):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        t, sensors, c, ref = lateration_case(rng)
        closed = np.asarray(multilaterate(t, sensors, c, G.active_area).position)
        worst = max(worst, float(np.hypot(*(closed - grid_oracle(t, sensors, c, ref)))))
    note(request, f"worst {worst * 1e3:.2f} mm")
    assert worst <= 1e-3


@crit(7, C7)
def test_grid_oracle_is_exhaustive():
    rng = np.random.default_rng(77)
    for _ in range(25):
        t, sensors, c, ref = lateration_case(rng)
        assert np.array_equal(grid_oracle(t, sensors, c, ref), exhaustive_oracle(t, sensors, c, ref))


# --- 8 ----------------------------------------------------------------------------

C8 = "controller table, watchdog liveness, TMR single flips corrected, double flips flagged"
S, E = CdssState, CdssEvent
# frozen independently of the implementation; None means the event is ignored
EXPECTED = {
    S.INITIALIZATION: {E.INIT_DONE: S.MONITORING},
    S.MONITORING: {E.IMPACT_TRIGGER: S.IMPACT_DETECTION, E.PERIODIC_TIMER: S.PERIODIC_MEASUREMENT,
                   E.HOST_COMMAND: S.COMMUNICATION},
    S.COMMUNICATION: {E.DONE: S.MONITORING},
    S.IMPACT_DETECTION: {E.DONE: S.MONITORING},
    S.PERIODIC_MEASUREMENT: {E.DONE: S.MONITORING},
}


@crit(8, C8)
def test_transition_table_exhaustive():
    assert len(S) == 5 and len(E) == 6
    for s in S:
        for e in E:
            r = step(s, e)
            want = S.INITIALIZATION if e is E.WATCHDOG_TIMEOUT else EXPECTED[s].get(e)
            if want is None:
                assert not r.accepted and r.state is s
            else:
                assert r.accepted and r.state is want


@crit(8, C8)
def test_watchdog_from_every_state():
    for s in S:
        assert step(s, E.WATCHDOG_TIMEOUT).state is S.INITIALIZATION


def _filled_store(rng, n=100):
    st = ProtectedStore()
    payloads = [rng.bytes(int(rng.integers(1, 300))) for _ in range(n)]
    for p in payloads:
        st.store(p)
    return st, payloads


@crit(8, C8)
def test_single_bit_faults_corrected(request):
    rng = np.random.default_rng(8)
    st, payloads = _filled_store(rng)
    ok = 0
    for _ in range(1000):
        i = int(rng.integers(len(payloads)))
        f = (i, int(rng.integers(3)), int(rng.integers(len(st.replica(i, 0)))), int(rng.integers(8)))
        st.inject_fault(*f)
        r = st.read(i)
        ok += r.status is ReadStatus.CORRECTED and r.payload == payloads[i]
        st.inject_fault(*f)
    note(request, f"{ok}/1000 corrected")
    assert ok == 1000


@crit(8, C8)
def test_double_replica_faults_flagged(request):
    rng = np.random.default_rng(9)
    st, payloads = _filled_store(rng)
    flagged = 0
    for _ in range(1000):
        i = int(rng.integers(len(payloads)))
        a, b = rng.choice(3, size=2, replace=False)
        off, bit = int(rng.integers(len(st.replica(i, 0)))), int(rng.integers(8))
        st.inject_fault(i, int(a), off, bit).inject_fault(i, int(b), off, bit)
        flagged += st.read(i).status is ReadStatus.UNRECOVERABLE
        st.inject_fault(i, int(a), off, bit).inject_fault(i, int(b), off, bit)
    note(request, f"{flagged}/1000 flagged")
    assert flagged == 1000


# --- 9 ----------------------------------------------------------------------------

C9 = "wave-speed calibration within 0.5% in <= 50 iterations from +/-10% guesses"


@crit(9, C9)
@pytest.mark.parametrize("noise", [0.0, 5e-3])
@pytest.mark.parametrize("layer,true", [(0, 2360.0), (1, 1900.0)])
def test_calibration(request, layer, true, noise):
    rng = np.random.default_rng(layer * 10 + int(noise * 1e3))
    recs = piezo_records(layer, G, true_speed=true, noise_rms=noise, rng=rng)
    for guess in (0.9 * true, 1.1 * true):
        res = calibrate_wave_speed(recs, G, layer, guess)
        err = abs(res.speed - true) / true
        note(request, f"{true:.0f} m/s, noise {noise * 1e3:.0f} mV, from {guess:.0f}: {100 * err:.3f}% in {res.iterations}")
        assert err <= 0.005
        assert res.iterations <= 50


# --- 10 ---------------------------------------------------------------------------

C10 = "size round trip within one pitch for 150-1000 um; < 50 um below threshold"


def centre_inside_quadrant(rng, d):
    # the hole lies wholly within one quadrant's traced band
    q = int(rng.integers(4))
    xs = L.trace_centers(q)
    ox, oy = L.quadrant_origin(q)
    x = rng.uniform(xs[0] - L.trace_width / 2 + d, xs[-1] + L.trace_width / 2 - d)
    y = rng.uniform(oy + d, oy + L.trace_length - d)
    return x, y


@crit(10, C10)
@pytest.mark.parametrize("d_um", [150, 300, 600, 1000])
def test_size_round_trip(request, d_um):
    rng = np.random.default_rng(d_um)
    d = d_um * 1e-6
    worst = 0.0
    for _ in range(200):
        centre = centre_inside_quadrant(rng, d)
        gm = rgs_measure(traces_intersected(L, centre, d), L, rng=rng)
        worst = max(worst, abs(estimate_size(gm, L).diameter - d))
    note(request, f"{d_um} um worst {worst * 1e6:.0f} um")
    assert worst <= L.pitch + 1e-12


@crit(10, C10)
@pytest.mark.parametrize("d_um", [10, 40, 49])
def test_size_below_threshold(d_um):
    rng = np.random.default_rng(d_um)
    for _ in range(50):
        gm = rgs_measure(traces_intersected(L, centre_inside_quadrant(rng, 1e-3), d_um * 1e-6), L, rng=rng)
        with pytest.raises(BelowThresholdError):
            estimate_size(gm, L)
