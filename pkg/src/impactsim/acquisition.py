"""Acquisition electronics: acoustic front end and resistive-grid readout.

Acoustic chain: 11 kHz high-pass -> per-channel gain -> 8:1 MUX at 4 MHz ->
single 12-bit ADC -> FIFO with pre-trigger capture.

Grid chain: 3 mA source per subgrid -> sum (A+B) and difference (A-B)
amplifiers -> 16:1 MUX -> 12-bit ADC, 4096-sample average per channel.
"""

from __future__ import annotations

import json
import functools
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .geometry import OPEN_CIRCUIT, SUBGRIDS, BreakState, GridLayout, subgrid_resistance
from .synth import Waveform

N_CHANNELS = 8


@dataclass(frozen=True)
class AcsConfig:
    hp_cutoff: float = 11e3
    hp_order: int = 2
    mux_rate: float = 4e6
    n_channels: int = N_CHANNELS
    adc_bits: int = 12
    full_scale: float = 3.7  # volts peak-to-peak
    record_len: int = 16384
    pretrigger_fraction: float = 0.11  # must exceed the detector noise window
    trigger_threshold: int | None = None  # counts; None -> derived from noise
    trigger_noise_factor: float = 4.0
    gain: tuple = (1.0,) * N_CHANNELS

    def __post_init__(self):
        if not 0 < self.pretrigger_fraction < 1:
            raise ValueError("pretrigger_fraction must lie in (0, 1)")
        if len(self.gain) != self.n_channels:
            raise ValueError("need one gain per channel")

    @property
    def per_channel_rate(self) -> float:
        return self.mux_rate / self.n_channels

    @property
    def sample_period(self) -> float:
        return 1.0 / self.per_channel_rate

    @property
    def lsb(self) -> float:
        return self.full_scale / 2**self.adc_bits

    @property
    def code_range(self) -> tuple[int, int]:
        return -(2 ** (self.adc_bits - 1)), 2 ** (self.adc_bits - 1) - 1

    @property
    def pretrigger(self) -> int:
        return int(self.pretrigger_fraction * self.record_len)

    def threshold_counts(self, noise_rms_volts=None, channel=0) -> float:
        if self.trigger_threshold is not None:
            return self.trigger_threshold
        if noise_rms_volts is None:
            raise ValueError("no trigger threshold configured and no noise level given")
        return self.trigger_noise_factor * noise_rms_volts * self.gain[channel] / self.lsb


LOW_VELOCITY = dict(record_len=1000)


@dataclass
class DigitizedRecord:
    channel: int
    samples: np.ndarray  # int16 codes
    t0: float
    sample_period: float
    volts_per_count: float = 3.7 / 4096
    mux_rate: float = 4e6

    @property
    def channel_skew(self) -> float:
        return self.channel / self.mux_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) * self.sample_period

    @property
    def volts(self) -> np.ndarray:
        return self.samples.astype(float) * self.volts_per_count

    def __len__(self):
        return len(self.samples)

    def slice(self, start, stop) -> "DigitizedRecord":
        return DigitizedRecord(
            self.channel,
            self.samples[start:stop].copy(),
            self.t0 + start * self.sample_period,
            self.sample_period,
            self.volts_per_count,
            self.mux_rate,
        )

    # little-endian: channel u8, t0 f64, period f64, count u32, then i16 samples
    _HEADER = struct.Struct("<BddI")

    def to_bytes(self) -> bytes:
        head = self._HEADER.pack(self.channel, self.t0, self.sample_period, len(self.samples))
        return head + np.asarray(self.samples, dtype="<i2").tobytes()

    @classmethod
    def from_bytes(cls, buf, offset=0, volts_per_count=3.7 / 4096, mux_rate=4e6):
        """Decode one record; returns ``(record, next_offset)``."""
        channel, t0, period, count = cls._HEADER.unpack_from(buf, offset)
        start = offset + cls._HEADER.size
        samples = np.frombuffer(buf, dtype="<i2", count=count, offset=start).astype(np.int16)
        rec = cls(channel, samples, t0, period, volts_per_count, mux_rate)
        return rec, start + 2 * count


@functools.lru_cache(maxsize=32)
def _highpass_sos(order, cutoff, fs):
    return signal.butter(order, cutoff, "highpass", fs=fs, output="sos")


def highpass(w: Waveform, cfg: AcsConfig = AcsConfig()) -> Waveform:
    """Butterworth high-pass at ``cfg.hp_cutoff`` applied from rest."""
    sos = _highpass_sos(cfg.hp_order, cfg.hp_cutoff, float(w.fs))
    y = signal.sosfilt(sos, w.samples)
    return Waveform(w.t0, w.fs, y, onset=w.onset, peak=w.peak)


def highpass_response_db(f, cfg: AcsConfig = AcsConfig()):
    """Analog magnitude response of the high-pass, in dB."""
    r = (np.asarray(f, float) / cfg.hp_cutoff) ** (2 * cfg.hp_order)
    return 10 * np.log10(r / (1 + r))


def quantize(volts, cfg: AcsConfig, gain=1.0) -> np.ndarray:
    """Mid-tread quantizer with clamping at the rails."""
    lo, hi = cfg.code_range
    codes = np.rint(np.asarray(volts) * gain / cfg.lsb)
    return np.clip(codes, lo, hi).astype(np.int16)


def interleave_and_digitize(waveforms, cfg: AcsConfig = AcsConfig(), t_start=None) -> list:
    """Sample each channel through the MUX and quantize.

    Channel ``k`` is sampled at ``t_start + k / mux_rate + m / per_channel_rate``.
    Waveforms must share one time base.
    """
    if len(waveforms) != cfg.n_channels:
        raise ValueError(f"expected {cfg.n_channels} waveforms")
    w0 = waveforms[0]
    for w in waveforms[1:]:
        if w.fs != w0.fs or w.t0 != w0.t0 or len(w) != len(w0):
            raise ValueError("waveforms must share a common time base")
    if t_start is None:
        t_start = w0.t0
    period = cfg.sample_period
    # last sample of the slowest channel must stay inside the stream
    span = w0.t_end - t_start - (cfg.n_channels - 1) / cfg.mux_rate
    m = int(math.floor(span / period + 1e-9))
    records = []
    for k, w in enumerate(waveforms):
        t = t_start + k / cfg.mux_rate + np.arange(m) * period
        pos = (t - w.t0) * w.fs
        idx = np.rint(pos)
        if np.allclose(pos, idx, atol=1e-6):
            v = w.samples[idx.astype(np.int64)]
        else:
            v = w.at(t)
        codes = quantize(v, cfg, cfg.gain[k])
        records.append(
            DigitizedRecord(k, codes, t_start + k / cfg.mux_rate, period,
                            cfg.lsb / cfg.gain[k], cfg.mux_rate)
        )
    return records


def trigger_captures(stream, cfg: AcsConfig = AcsConfig(), threshold=None):
    """Yield every capture (a list of per-channel records) in the stream.

    The trigger is armed only once the FIFO holds a full pre-trigger segment,
    so no capture reaches back before the start of the stream.  After a
    capture the trigger is held off for one record length.  Crossings too
    close to the end of the stream to complete a record are dropped.
    """
    if threshold is None:
        threshold = cfg.threshold_counts()
    data = np.vstack([np.abs(r.samples.astype(np.int32)) for r in stream])
    hot = np.nonzero((data > threshold).any(axis=0))[0]
    pre = cfg.pretrigger
    post = cfg.record_len - pre
    n = data.shape[1]
    next_armed = pre
    for m in hot:
        if m < next_armed:
            continue
        if m + post > n:
            break
        yield [r.slice(m - pre, m + post) for r in stream]
        next_armed = m + cfg.record_len


def trigger_capture(stream, cfg: AcsConfig = AcsConfig(), threshold=None):
    """First capture in the stream, or ``None`` when nothing crosses."""
    return next(trigger_captures(stream, cfg, threshold), None)


def acquire(waveforms, cfg: AcsConfig = AcsConfig(), noise_rms=None, t_start=None):
    """High-pass, digitize and trigger: the full acoustic chain."""
    filtered = [highpass(w, cfg) for w in waveforms]
    stream = interleave_and_digitize(filtered, cfg, t_start)
    thr = cfg.threshold_counts(noise_rms) if cfg.trigger_threshold is None else cfg.trigger_threshold
    return trigger_capture(stream, cfg, thr)


# --- resistive grid subsystem -------------------------------------------------

@dataclass(frozen=True)
class RgsConfig:
    current: float = 3e-3
    current_tc: float = 0.3e-6  # residual fractional drift per degC after compensation
    reference_temp: float = 25.0
    adc_bits: int = 12
    vref: float = 4.096
    sum_full_scale_ohms: float = 1500.0
    diff_full_scale_ohms: float = 128.0
    averages: int = 4096
    noise_ohms: float = 0.3  # single-sample input noise, resistance-equivalent
    thermistor_range: tuple = (-60.0, 95.0)

    @property
    def lsb(self) -> float:
        return self.vref / 2**self.adc_bits

    @property
    def sum_gain(self) -> float:
        return self.vref / (self.current * self.sum_full_scale_ohms)

    @property
    def diff_gain(self) -> float:
        return 0.5 * self.vref / (self.current * self.diff_full_scale_ohms)

    def source_current(self, board_temp) -> float:
        return self.current * (1.0 + self.current_tc * (board_temp - self.reference_temp))


def _average_codes(volts, gain, lsb, lo, hi, noise_volts, n, rng):
    raw = (volts + rng.normal(0.0, noise_volts, n)) * gain / lsb
    return float(np.clip(np.rint(raw), lo, hi).mean())


def measure_sum_channel(r_sum, cfg: RgsConfig = RgsConfig(), rng=None, board_temp=None):
    """Averaged code of the summing channel for total resistance ``r_sum``."""
    rng = rng if rng is not None else np.random.default_rng()
    temp = cfg.reference_temp if board_temp is None else board_temp
    v = cfg.source_current(temp) * r_sum
    return _average_codes(v, cfg.sum_gain, cfg.lsb, 0, 2**cfg.adc_bits - 1,
                          cfg.noise_ohms * cfg.current, cfg.averages, rng)


def measure_diff_channel(r_diff, cfg: RgsConfig = RgsConfig(), rng=None, board_temp=None):
    rng = rng if rng is not None else np.random.default_rng()
    temp = cfg.reference_temp if board_temp is None else board_temp
    v = cfg.source_current(temp) * r_diff
    half = 2 ** (cfg.adc_bits - 1)
    return _average_codes(v, cfg.diff_gain, cfg.lsb, -half, half - 1,
                          cfg.noise_ohms * cfg.current, cfg.averages, rng)


def sum_counts_to_ohms(counts, cfg: RgsConfig = RgsConfig()):
    return counts * cfg.lsb / (cfg.sum_gain * cfg.current)


def diff_counts_to_ohms(counts, cfg: RgsConfig = RgsConfig()):
    return counts * cfg.lsb / (cfg.diff_gain * cfg.current)


def thermistor_to_counts(temp_c, cfg: RgsConfig = RgsConfig()):
    lo, hi = cfg.thermistor_range
    frac = (np.asarray(temp_c, float) - lo) / (hi - lo)
    return np.clip(np.rint(frac * (2**cfg.adc_bits - 1)), 0, 2**cfg.adc_bits - 1).astype(int)


def counts_to_thermistor(counts, cfg: RgsConfig = RgsConfig()):
    lo, hi = cfg.thermistor_range
    return lo + np.asarray(counts, float) / (2**cfg.adc_bits - 1) * (hi - lo)


@dataclass
class QuadrantReading:
    sum_counts: float
    diff_counts: float
    r_a: float
    r_b: float
    open_circuit: bool = False


@dataclass
class GridMeasurement:
    quadrants: list  # 4 QuadrantReading
    thermistor_counts: list
    timestamp: float = 0.0
    channel_order: list = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return any(q.open_circuit for q in self.quadrants)

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "quadrants": [
                {
                    "sum_counts": q.sum_counts,
                    "diff_counts": q.diff_counts,
                    "r_a": q.r_a,
                    "r_b": q.r_b,
                    "open_circuit": q.open_circuit,
                }
                for q in self.quadrants
            ],
            "thermistor_counts": [int(c) for c in self.thermistor_counts],
            "channel_order": list(self.channel_order),
        }

    @classmethod
    def from_dict(cls, d) -> "GridMeasurement":
        quads = [QuadrantReading(**q) for q in d["quadrants"]]
        return cls(quads, list(d["thermistor_counts"]), d.get("timestamp", 0.0),
                   list(d.get("channel_order", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


CHANNEL_ORDER = [f"q{q}_sum" if k == 0 else f"q{q}_diff" for q in range(4) for k in range(2)] + [
    f"therm{i}" for i in range(8)
]


def rgs_measure(
    breaks: BreakState,
    layout: GridLayout,
    temp_delta=0.0,
    cfg: RgsConfig = RgsConfig(),
    rng=None,
    temps=None,
    board_temp=None,
    timestamp=0.0,
) -> GridMeasurement:
    """One full 16-channel step-through of the grid readout.

    Sum and difference channels are converted back to ohms with the nominal
    source current, then split into the two subgrid resistances.
    """
    rng = rng if rng is not None else np.random.default_rng()
    breaks.validate(layout)
    full = 2**cfg.adc_bits - 1
    half = 2 ** (cfg.adc_bits - 1)
    readings = []
    for q in range(4):
        ra = subgrid_resistance(layout, breaks.count(q, "A"), temp_delta)
        rb = subgrid_resistance(layout, breaks.count(q, "B"), temp_delta)
        if ra is OPEN_CIRCUIT or rb is OPEN_CIRCUIT:
            # the source rails; the sum channel saturates
            diff_sat = half - 1 if ra is OPEN_CIRCUIT else -half
            if ra is OPEN_CIRCUIT and rb is OPEN_CIRCUIT:
                diff_sat = 0
            readings.append(QuadrantReading(float(full), float(diff_sat), math.inf, math.inf, True))
            continue
        s = measure_sum_channel(ra + rb, cfg, rng, board_temp)
        d = measure_diff_channel(ra - rb, cfg, rng, board_temp)
        rs, rd = sum_counts_to_ohms(s, cfg), diff_counts_to_ohms(d, cfg)
        readings.append(QuadrantReading(s, d, 0.5 * (rs + rd), 0.5 * (rs - rd)))
    if temps is None:
        temps = np.full(8, 25.0 + temp_delta)
    therm = thermistor_to_counts(temps, cfg)
    return GridMeasurement(readings, [int(c) for c in therm], timestamp, list(CHANNEL_ORDER))
