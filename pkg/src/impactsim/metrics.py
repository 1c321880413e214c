"""Dynamic performance of the acquisition channel: spectrum-based SNRFS, SINAD,
SFDR and ENOB, two-tone IP3, minimum detectable signal, plus the RMSE
waveform-fidelity comparison.

Powers are single-sided and expressed relative to a full-scale sine
(amplitude = half the peak-to-peak input range), so a full-scale tone reads
0 dBFS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import windows

from .acquisition import AcsConfig, DigitizedRecord, quantize


class InvalidStimulusError(ValueError):
    pass


LOBE = 4  # half-width in bins of the 4-term Blackman-Harris main lobe


def _db(x):
    return 10.0 * math.log10(x) if x > 0 else -math.inf


@dataclass
class SpectrumResult:
    freqs: np.ndarray
    power: np.ndarray  # linear, relative to full-scale sine power
    fs: float
    window: str
    coherent_gain: float
    enbw_bins: float
    fundamental_bin: int | None = None
    harmonic_bins: tuple = ()

    @property
    def power_dbfs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.power)

    @property
    def bin_width(self) -> float:
        return self.fs / (2 * (len(self.freqs) - 1))

    def lobe(self, k, half=LOBE):
        lo, hi = max(k - half, 0), min(k + half, len(self.power) - 1)
        return np.arange(lo, hi + 1)

    def lobe_power(self, k, half=LOBE) -> float:
        return float(self.power[self.lobe(k, half)].sum())

    def bin_of(self, f) -> int:
        return int(round(f / self.bin_width))

    def to_text(self) -> str:
        lines = ["# freq_hz power_dbfs"]
        lines += [f"{f:.3f} {p:.3f}" for f, p in zip(self.freqs, self.power_dbfs)]
        return "\n".join(lines) + "\n"


def _as_volts(rec, fs, full_scale):
    if isinstance(rec, DigitizedRecord):
        return rec.volts, 1.0 / rec.sample_period, full_scale or rec.volts_per_count * 4096
    if fs is None:
        raise ValueError("fs is required for raw sample arrays")
    return np.asarray(rec, dtype=float), fs, full_scale or AcsConfig().full_scale


def spectrum(rec, fs=None, full_scale=None) -> SpectrumResult:
    """Windowed single-sided power spectrum, normalized so each bin holds the
    power it contributes (a tone's power is the sum over its main lobe)."""
    x, fs, full_scale = _as_volts(rec, fs, full_scale)
    n = len(x)
    w = windows.blackmanharris(n, sym=False)
    X = np.fft.rfft(x * w)
    p = np.abs(X) ** 2 / (n * np.sum(w * w))
    p[1:] *= 2.0
    if n % 2 == 0:
        p[-1] /= 2.0
    p_fs = (full_scale / 2.0) ** 2 / 2.0
    cg = float(w.mean())
    enbw = float(n * np.sum(w * w) / np.sum(w) ** 2)
    return SpectrumResult(np.fft.rfftfreq(n, 1.0 / fs), p / p_fs, fs, "blackmanharris4", cg, enbw)


def alias(f, fs) -> float:
    """Fold a frequency into the first Nyquist zone."""
    f = math.fmod(abs(f), fs)
    return fs - f if f > fs / 2 else f


@dataclass
class ToneMetrics:
    snrfs: float
    sinad: float
    sfdr: float
    enob: float
    signal_dbfs: float
    thd_dbc: float
    noise_dbfs: float

    def to_dict(self):
        return dict(self.__dict__)


def enob(sinad_db: float) -> float:
    return (sinad_db - 1.76) / 6.02


def _fundamental(sp: SpectrumResult, skip=LOBE):
    p = sp.power.copy()
    p[: skip + 1] = 0.0
    k = int(np.argmax(p))
    if sp.power[k] < 100.0 * np.median(sp.power[skip + 1 :]):
        raise InvalidStimulusError("no dominant tone (fundamental < 20 dB above median bin)")
    return k


def single_tone_metrics(rec, fs=None, full_scale=None, n_harmonics=6) -> ToneMetrics:
    """Single-tone test.

    Noise is everything except DC, the fundamental and harmonics 2..(1 +
    n_harmonics), with excluded bins refilled at the mean noise density.
    SNRFS references full scale; SINAD and SFDR reference the measured tone.
    """
    sp = spectrum(rec, fs, full_scale)
    k0 = _fundamental(sp)
    f0 = sp.freqs[k0]
    nb = len(sp.power)
    excluded = np.zeros(nb, bool)
    excluded[: LOBE + 1] = True
    excluded[sp.lobe(k0)] = True
    hbins = []
    for h in range(2, 2 + n_harmonics):
        kh = sp.bin_of(alias(h * f0, sp.fs))
        if abs(kh - k0) <= LOBE or kh <= LOBE:
            continue
        hbins.append(kh)
        excluded[sp.lobe(kh)] = True
    sp.fundamental_bin, sp.harmonic_bins = k0, tuple(hbins)
    noise_bins = ~excluded
    density = float(sp.power[noise_bins].mean())
    noise = density * (nb - (LOBE + 1))
    sig = sp.lobe_power(k0)
    harm = sum(max(sp.lobe_power(k) - density * len(sp.lobe(k)), 0.0) for k in set(hbins))
    sinad = _db(sig / (noise + harm))
    # strongest spur: harmonic lobes and every other bin outside DC/fundamental
    others = sp.power.copy()
    others[: LOBE + 1] = 0
    others[sp.lobe(k0)] = 0
    ks = int(np.argmax(others))
    spur = max([float(others[sp.lobe(k)].sum()) for k in [ks] + hbins])
    return ToneMetrics(
        snrfs=_db(1.0 / noise),
        sinad=sinad,
        sfdr=_db(sig / spur),
        enob=enob(sinad),
        signal_dbfs=_db(sig),
        thd_dbc=_db(harm / sig) if harm > 0 else -math.inf,
        noise_dbfs=_db(noise),
    )


@dataclass
class Ip3Result:
    ip3_dbfs: float
    tone_dbfs: float
    im3_dbfs: float
    noise_limited: bool


def two_tone_ip3(rec, f1, f2, fs=None, full_scale=None) -> Ip3Result:
    """Third-order intercept from a two-tone record (output referred).

    The worse of the two IM3 products (2f1-f2, 2f2-f1) is used.  When neither
    clears the noise in its lobe by 6 dB the result is a lower bound and
    ``noise_limited`` is set.  (A 3 dB margin is crossed by noise alone in
    about one record in eight: the lobe sum has few degrees of freedom.)
    """
    sp = spectrum(rec, fs, full_scale)
    if abs(f2 - f1) < 2 * (LOBE + 1) * sp.bin_width:
        raise ValueError("tones not resolvable at this record length")
    k1, k2 = sp.bin_of(f1), sp.bin_of(f2)
    tone = 0.5 * (sp.lobe_power(k1) + sp.lobe_power(k2))
    ki = [sp.bin_of(alias(2 * f1 - f2, sp.fs)), sp.bin_of(alias(2 * f2 - f1, sp.fs))]
    mask = np.ones(len(sp.power), bool)
    mask[: LOBE + 1] = False
    for k in [k1, k2] + ki:
        mask[sp.lobe(k)] = False
    density = float(sp.power[mask].mean())
    lobe_noise = density * (2 * LOBE + 1)
    im3 = max(sp.lobe_power(k) for k in ki)
    limited = im3 < 4.0 * lobe_noise
    if limited:
        im3 = lobe_noise
    t_db, i_db = _db(tone), _db(im3)
    return Ip3Result(t_db + (t_db - i_db) / 2.0, t_db, i_db, bool(limited))


def sfdr_from_ip3_mds(ip3_dbfs, mds_dbfs) -> float:
    """Two-thirds rule: the input range over which IM3 stays below the MDS."""
    return 2.0 / 3.0 * (ip3_dbfs - mds_dbfs)


# --- channel model --------------------------------------------------------------

@dataclass(frozen=True)
class ChannelModel:
    """Memoryless polynomial front end plus white noise ahead of the quantizer:
    y = x + a2 x^2 + a3 x^3 + n."""

    noise_rms: float = 0.0
    a2: float = 0.0
    a3: float = 0.0
    fs: float = 500e3
    n: int = 16384
    full_scale: float = 3.7
    bits: int = 12
    quantized: bool = True

    @property
    def lsb(self):
        return self.full_scale / 2**self.bits

    def capture(self, tones, rng=None, t0=0.0) -> DigitizedRecord:
        """``tones``: iterable of (freq Hz, amplitude V[, phase rad])."""
        t = t0 + np.arange(self.n) / self.fs
        x = np.zeros(self.n)
        for tone in tones:
            f, a, ph = (tuple(tone) + (0.0,))[:3]
            x += a * np.sin(2 * np.pi * f * t + ph)
        y = x + self.a2 * x**2 + self.a3 * x**3
        if self.noise_rms:
            rng = rng if rng is not None else np.random.default_rng()
            y = y + rng.normal(0.0, self.noise_rms, self.n)
        cfg = AcsConfig(adc_bits=self.bits, full_scale=self.full_scale)
        if self.quantized:
            codes = quantize(y, cfg)
            return DigitizedRecord(0, codes, t0, 1.0 / self.fs, self.lsb)
        rec = DigitizedRecord(0, np.zeros(self.n, np.int16), t0, 1.0 / self.fs, self.lsb)
        rec.samples = y / self.lsb  # float codes, unquantized
        return rec

    def tone_amplitude(self, level_dbfs) -> float:
        return self.full_scale / 2.0 * 10.0 ** (level_dbfs / 20.0)


def fit_channel_model(snrfs_db=65.0, ip3_dbfs=22.0, **kw) -> ChannelModel:
    """Noise sized so the total (with quantization) gives ``snrfs_db``;
    compressive cubic placed so its intercept lands at ``ip3_dbfs``."""
    base = ChannelModel(**kw)
    p_fs = (base.full_scale / 2) ** 2 / 2
    total = p_fs / 10 ** (snrfs_db / 10)
    quant = base.lsb**2 / 12 if base.quantized else 0.0
    if total <= quant:
        raise ValueError("requested SNRFS exceeds the quantization limit")
    a_ip3 = base.full_scale / 2 * 10 ** (ip3_dbfs / 20)
    return ChannelModel(**{**base.__dict__, "noise_rms": math.sqrt(total - quant),
                           "a3": -4.0 / (3.0 * a_ip3**2)})


TABLE_II = {"snrfs": 65.0, "sinad": 59.8, "ip3": 22.0, "mds": -65.6, "sfdr": 58.4, "enob": 9.6}


# --- minimum detectable signal ----------------------------------------------------

def mds_sweep(channel: ChannelModel, f0=20e3, step_db=1.0, rng=None, floor="bin", margin_db=None,
              max_atten_db=140.0, averages=8, confirm=2) -> float:
    """Attenuate a full-scale tone in ``step_db`` steps until it is lost.

    ``floor="bin"``: the tone's peak bin must sit ``margin_db`` (default 3 dB)
    above the mean per-bin noise.  ``floor="integrated"``: the tone's power
    must exceed the total noise power by ``margin_db`` (default 0 dB).
    Power spectra of ``averages`` captures are averaged at each level so a
    single noisy bin does not end the sweep early, and the tone counts as lost
    only after ``confirm`` consecutive misses.  Returns the last detectable
    input level in dBFS.
    """
    if step_db <= 0:
        raise ValueError("step must be positive")
    if averages < 1 or confirm < 1:
        raise ValueError("averages and confirm must be at least 1")
    if floor not in ("bin", "integrated"):
        raise ValueError("floor must be 'bin' or 'integrated'")
    margin = (3.0 if floor == "bin" else 0.0) if margin_db is None else margin_db
    rng = rng if rng is not None else np.random.default_rng(0)

    def detectable(level):
        tone = [(f0, channel.tone_amplitude(level))]
        sp = spectrum(channel.capture(tone, rng), channel.fs, channel.full_scale)
        for _ in range(averages - 1):
            sp.power = sp.power + spectrum(channel.capture(tone, rng), channel.fs, channel.full_scale).power
        k = sp.bin_of(f0)
        mask = np.ones(len(sp.power), bool)
        mask[: LOBE + 1] = False
        mask[sp.lobe(k)] = False
        density = float(sp.power[mask].mean())
        if floor == "bin":
            tone_p, ref = float(sp.power[sp.lobe(k, 1)].max()), density
        else:
            tone_p, ref = sp.lobe_power(k), density * (len(sp.power) - LOBE - 1)
        # an all-zero capture (tone below half an LSB, no noise) shows nothing
        return tone_p > 0 and _db(tone_p) >= _db(ref) + margin

    if not detectable(0.0):
        raise ValueError("tone undetectable at full scale: check the configuration")
    last, level, misses = 0.0, 0.0, 0
    while misses < confirm and level - step_db >= -max_atten_db:
        level -= step_db
        if detectable(level):
            last, misses = level, 0
        else:
            misses += 1
    return last


# --- waveform fidelity ------------------------------------------------------------

@dataclass
class RmseResult:
    percent: float
    lag: int  # samples the test record was shifted to align


def waveform_rmse(reference, test: DigitizedRecord, max_lag=0) -> RmseResult:
    """RMSE of ``test`` against ``reference`` as a percentage of the
    reference's peak magnitude.  ``reference`` is a Waveform (interpolated at
    the test sample times) or an array already on the test grid.  With
    ``max_lag`` > 0 the integer lag maximizing the cross-correlation is
    applied first."""
    v = test.volts
    if hasattr(reference, "at"):
        r = reference.at(test.times)
    else:
        r = np.asarray(reference, dtype=float)
    if len(r) != len(v):
        raise ValueError("reference and test lengths differ")
    peak = float(np.max(np.abs(r)))
    if peak == 0:
        raise ValueError("zero-amplitude reference: RMSE undefined")
    lag = 0
    if max_lag:
        lags = range(-max_lag, max_lag + 1)
        score = [np.dot(r[max(0, -L) : len(r) - max(0, L)], v[max(0, L) : len(v) - max(0, -L)]) for L in lags]
        lag = list(lags)[int(np.argmax(score))]
    a = r[max(0, -lag) : len(r) - max(0, lag)]
    b = v[max(0, lag) : len(v) - max(0, -lag)]
    return RmseResult(100.0 * float(np.sqrt(np.mean((a - b) ** 2))) / peak, lag)


# --- full suite ---------------------------------------------------------------------

@dataclass
class AdcMetrics:
    snrfs: float
    sinad: float
    ip3: float
    mds: float
    sfdr: float
    enob: float
    ip3_noise_limited: bool = False

    def to_dict(self):
        return dict(self.__dict__)


CSV_COLUMNS = ("record", "SNRFS_dB", "SINAD_dB", "IP3_dBFS", "MDS_dBFS", "SFDR_dB", "ENOB_bits")


def adc_metrics(channel: ChannelModel, rng=None, tone=20.0173e3, two_tone=(20e3, 22e3),
                two_tone_dbfs=-7.0, mds_floor="bin", mds_step_db=1.0) -> AdcMetrics:
    """Run the single-tone, two-tone and MDS tests on a channel model."""
    rng = rng if rng is not None else np.random.default_rng(0)
    st = single_tone_metrics(channel.capture([(tone, channel.tone_amplitude(-0.05))], rng))
    a = channel.tone_amplitude(two_tone_dbfs)
    ip = two_tone_ip3(channel.capture([(two_tone[0], a), (two_tone[1], a, 1.0)], rng), *two_tone)
    mds = mds_sweep(channel, f0=tone, step_db=mds_step_db, rng=rng, floor=mds_floor)
    return AdcMetrics(st.snrfs, st.sinad, ip.ip3_dbfs, mds, st.sfdr, st.enob, ip.noise_limited)


def write_metrics_csv(rows, fh):
    """``rows``: iterable of (record name, AdcMetrics)."""
    import csv

    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, m in rows:
        w.writerow([name] + [f"{v:.3f}" for v in (m.snrfs, m.sinad, m.ip3, m.mds, m.sfdr, m.enob)])
