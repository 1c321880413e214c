"""Forward model: impact scenario -> sensor voltages, grid breaks, temperatures.

The acoustic source is a down-chirped wave packet.  Each sensor sees it after a
group delay ``distance / group_speed``; on the way the packet is stretched by
dispersion (high frequencies lead, low frequencies lag), its high-frequency
part is attenuated more strongly, and its amplitude falls with distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    BOTTOM,
    TOP,
    BreakState,
    GeometryError,
    GridLayout,
    SensorGeometry,
    traces_intersected,
)

MATERIALS = ("SS", "Cu", "Glass", "Fe", "other")

OVERSAMPLE_RATE = 8e6


class ClippedTransitError(GeometryError):
    """The particle would leave the frame before reaching the lower sheet."""


@dataclass
class Waveform:
    """Uniformly sampled voltage trace.

    ``onset`` and ``peak`` carry the ground-truth envelope onset time and
    envelope peak amplitude when the trace was produced by the forward model.
    """

    t0: float
    fs: float
    samples: np.ndarray
    onset: float | None = None
    peak: float | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.fs

    @property
    def t_end(self) -> float:
        return self.t0 + len(self.samples) / self.fs

    def at(self, t) -> np.ndarray:
        """Linear interpolation; zero outside the sampled span."""
        return np.interp(t, self.times, self.samples, left=0.0, right=0.0)


@dataclass(frozen=True)
class FilmProps:
    group_speed: float = 2360.0
    dispersion_slope: float = 0.5  # (m/s) of group speed per kHz
    attenuation_coeff: float = 0.05  # dB per metre per kHz
    center_freq: float = 60e3
    burst_bandwidth: float = 40e3
    attack_time: float = 1e-6
    flat_time: float = 20e-6
    decay_time: float = 60e-6  # exponential time constant
    spreading_distance: float = 0.3
    start_phase: float = 0.0  # carrier phase at onset, radians (0 = sine start)

    def __post_init__(self):
        if self.group_speed <= 0:
            raise ValueError("group speed must be positive")
        if self.attenuation_coeff < 0:
            raise ValueError("attenuation must be non-negative")
        if self.burst_bandwidth < 0 or self.burst_bandwidth >= 2 * self.center_freq:
            raise ValueError("bandwidth must lie within (0, 2 * center_freq)")


# Short chirped wavelet: most of its energy sits in the first few microseconds,
# which makes it the reference stimulus for characterizing the arrival detector.
WAVELET_FILM = FilmProps(attack_time=0.25e-6, flat_time=1e-6, decay_time=8e-6,
                         start_phase=math.pi / 4)


def film_props(geom: SensorGeometry, layer: int, base: FilmProps | None = None) -> FilmProps:
    base = base or FilmProps()
    return replace(base, group_speed=geom.wave_speed_per_layer[layer])


def distance_gain(distance, props: FilmProps):
    """Envelope-peak gain after travelling ``distance``: cylindrical spreading
    softened near the source, times exponential loss at the centre frequency."""
    d = np.asarray(distance, dtype=float)
    spreading = np.sqrt(props.spreading_distance / (props.spreading_distance + d))
    loss_db = props.attenuation_coeff * (props.center_freq / 1e3) * d
    return spreading * 10.0 ** (-loss_db / 20.0)


def dispersion_spread(distance, props: FilmProps) -> float:
    """Arrival-time spread across the burst band after ``distance``."""
    slope = props.dispersion_slope / 1e3  # (m/s) per Hz
    return distance * slope * props.burst_bandwidth / props.group_speed**2


DECAY_SPAN = 5.0


def _envelope(tau, ta, tf, td):
    # raised-cosine attack, hold, then exponential decay cut at 5 time constants
    env = np.zeros_like(tau)
    rise = (tau >= 0) & (tau < ta)
    env[rise] = np.sin(0.5 * np.pi * tau[rise] / ta) ** 2
    env[(tau >= ta) & (tau < ta + tf)] = 1.0
    fall = (tau >= ta + tf) & (tau < ta + tf + DECAY_SPAN * td)
    env[fall] = np.exp(-(tau[fall] - ta - tf) / td)
    return env


def _packet(tau, distance, props: FilmProps):
    """Unit-peak-envelope packet evaluated at delays ``tau`` after onset."""
    tau = np.asarray(tau, dtype=float)
    ta, td = props.attack_time, props.decay_time
    tf = props.flat_time + dispersion_spread(distance, props)
    sweep = ta + tf + DECAY_SPAN * td
    f_hi = props.center_freq + 0.5 * props.burst_bandwidth
    rate = props.burst_bandwidth / sweep

    def tilt(t):
        # high frequencies (early in the sweep) lose more per metre
        f_inst = f_hi - rate * np.clip(t, 0.0, sweep)
        return 10.0 ** (-props.attenuation_coeff * (f_inst - props.center_freq) / 1e3 * distance / 20.0)

    grid = np.linspace(0.0, sweep, 4097)
    norm = np.max(_envelope(grid, ta, tf, td) * tilt(grid))
    tc = np.clip(tau, 0.0, sweep)
    phase = 2 * np.pi * (f_hi * tc - 0.5 * rate * tc**2)
    return _envelope(tau, ta, tf, td) * tilt(tau) / norm * np.sin(phase + props.start_phase)


def packet_duration(distance, props: FilmProps) -> float:
    return (
        props.attack_time
        + props.flat_time
        + dispersion_spread(distance, props)
        + DECAY_SPAN * props.decay_time
    )


def propagate_waveform(
    impact_point,
    amplitude,
    sensor_pos,
    props: FilmProps,
    origin_time=0.0,
    fs=OVERSAMPLE_RATE,
) -> Waveform:
    """Wave packet seen at ``sensor_pos`` from a source at ``impact_point``.

    The returned trace starts on the sample grid point at or before the onset
    and covers the whole packet.
    """
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    distance = float(np.hypot(*(np.asarray(impact_point, float) - np.asarray(sensor_pos, float))))
    onset = origin_time + distance / props.group_speed
    peak = float(amplitude * distance_gain(distance, props))
    k0 = math.floor(onset * fs)
    n = int(math.ceil(packet_duration(distance, props) * fs)) + 2
    t = (k0 + np.arange(n)) / fs
    shape = _packet(t - onset, distance, props)
    return Waveform(t0=k0 / fs, fs=fs, samples=peak * shape, onset=onset, peak=peak)


def add_into(target: np.ndarray, t0: float, fs: float, w: Waveform):
    """Accumulate ``w`` into ``target`` (sampled from ``t0`` at ``fs``)."""
    offset = int(round((w.t0 - t0) * fs))
    lo = max(offset, 0)
    hi = min(offset + len(w.samples), len(target))
    if hi > lo:
        target[lo:hi] += w.samples[lo - offset : hi - offset]


@dataclass(frozen=True)
class ImpactScenario:
    shot_id: int
    material: str
    diameter: float
    speed: float
    aoa_x: float = 0.0
    aoa_y: float = 0.0
    entry_point: tuple[float, float] = (0.25, 0.25)
    snr_target: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if abs(self.aoa_x) >= 90 or abs(self.aoa_y) >= 90:
            raise ValueError("angle of arrival must be within (-90, 90) degrees")
        if not 25e-6 <= self.diameter <= 2.5e-3:
            raise ValueError("diameter outside the 25 um - 2.5 mm envelope")


@dataclass(frozen=True)
class AmplitudeLaw:
    """Source amplitude (volts at the ADC input, zero distance) as a power law
    in particle diameter with a material-dependent prefactor.  The negative
    default exponent encodes the observation that small particles couple more
    energy into the film."""

    exponent: float = -0.3
    coeff: dict = field(
        default_factory=lambda: {
            "SS": 0.5795,
            "Cu": 0.5268,
            "Glass": 0.2320,
            "Fe": 0.4662,
            "other": 0.4,
        }
    )
    noise_rms: float = 0.05
    scatter_db: float = 0.0

    def amplitude(self, material, diameter, rng=None) -> float:
        a = self.coeff[material] * (diameter / 1e-3) ** self.exponent
        if self.scatter_db and rng is not None:
            a *= 10.0 ** (rng.normal(0.0, self.scatter_db) / 20.0)
        return float(a)


@dataclass(frozen=True)
class SynthConfig:
    fs: float = OVERSAMPLE_RATE
    pre_impact: float = 3.8e-3  # longer than the ACS pre-trigger segment
    post_impact: float = 30e-3
    film: FilmProps = FilmProps()
    amplitude_law: AmplitudeLaw = AmplitudeLaw()
    rear_coupling: float = 1.0


@dataclass
class PhysicalSignals:
    waveforms: list  # 8 Waveform on a common time base: top 0-3, bottom 4-7
    break_state: BreakState
    impact_times: tuple[float, float]
    true_hits: tuple
    noise_rms: float
    onsets: np.ndarray
    peaks: np.ndarray
    source_amplitude: float


def exit_point(scenario: ImpactScenario, h: float):
    x1, y1 = scenario.entry_point
    return (
        x1 + h * math.tan(math.radians(scenario.aoa_x)),
        y1 + h * math.tan(math.radians(scenario.aoa_y)),
    )


def path_length(p1, p2, h) -> float:
    return math.sqrt((p2[0] - p1[0]) ** 2 + (p2[1] - p1[1]) ** 2 + h * h)


def clean_channels(scenario: ImpactScenario, geom: SensorGeometry, cfg: SynthConfig, amplitude=None):
    """Noise-free per-channel packets plus transit bookkeeping."""
    h = geom.layer_separation_h
    p1 = tuple(scenario.entry_point)
    if not geom.contains(p1):
        raise GeometryError(f"entry point {p1} outside active area")
    p2 = exit_point(scenario, h)
    if not geom.contains(p2):
        raise ClippedTransitError(
            f"exit point ({p2[0]:.3f}, {p2[1]:.3f}) misses the lower sheet"
        )
    t1 = cfg.pre_impact
    t2 = t1 + path_length(p1, p2, h) / scenario.speed
    if amplitude is None:
        amplitude = cfg.amplitude_law.amplitude(scenario.material, scenario.diameter)
    packets = []
    for layer, hit, t_hit, scale in ((TOP, p1, t1, 1.0), (BOTTOM, p2, t2, cfg.rear_coupling)):
        props = film_props(geom, layer, cfg.film)
        for s in geom.sensors(layer):
            packets.append(propagate_waveform(hit, amplitude * scale, s, props, t_hit, cfg.fs))
    return packets, (t1, t2), (p1, p2), amplitude


def simulate_shot(
    scenario: ImpactScenario,
    geom: SensorGeometry,
    layout: GridLayout,
    cfg: SynthConfig = SynthConfig(),
    noise: bool = True,
) -> PhysicalSignals:
    """Synthesize all eight sensor voltages for one shot.

    When ``scenario.snr_target`` is set, the white-noise level is chosen so
    that the strongest channel's envelope peak sits exactly that many dB above
    the noise RMS; otherwise the amplitude law's fixed noise floor is used.
    """
    rng = np.random.default_rng(scenario.rng_seed)
    packets, times, hits, amplitude = clean_channels(scenario, geom, cfg)
    peaks = np.array([p.peak for p in packets])
    if scenario.snr_target is not None:
        noise_rms = float(peaks.max() / 10.0 ** (scenario.snr_target / 20.0))
    else:
        noise_rms = cfg.amplitude_law.noise_rms
    n = int(round((cfg.pre_impact + cfg.post_impact) * cfg.fs))
    if noise:
        data = rng.standard_normal((8, n)) * noise_rms
    else:
        data = np.zeros((8, n))
    for ch, p in enumerate(packets):
        add_into(data[ch], 0.0, cfg.fs, p)
    waveforms = [Waveform(0.0, cfg.fs, data[ch], onset=packets[ch].onset, peak=packets[ch].peak) for ch in range(8)]
    breaks = traces_intersected(layout, hits[0], scenario.diameter)
    return PhysicalSignals(
        waveforms=waveforms,
        break_state=breaks,
        impact_times=times,
        true_hits=hits,
        noise_rms=noise_rms if noise else 0.0,
        onsets=np.array([p.onset for p in packets]),
        peaks=peaks,
        source_amplitude=amplitude,
    )


def piezo_props(geom: SensorGeometry, layer: int) -> FilmProps:
    """Narrow-band 20 kHz tone burst used for in-situ calibration."""
    return FilmProps(
        group_speed=geom.wave_speed_per_layer[layer],
        center_freq=20e3,
        burst_bandwidth=2e3,
        attack_time=5e-6,
        flat_time=50e-6,
        decay_time=10e-6,
    )


def piezo_pulse(layer, geom: SensorGeometry, props: FilmProps | None = None, amplitude=1.0,
                fire_time=0.0, fs=OVERSAMPLE_RATE) -> list:
    props = props or piezo_props(geom, layer)
    src = geom.piezo_position[layer]
    return [propagate_waveform(src, amplitude, s, props, fire_time, fs) for s in geom.sensors(layer)]


THERMISTOR_RANGE = (-60.0, 95.0)


def thermistor_readout(temp_profile, rng_seed=0, noise=0.05) -> np.ndarray:
    """Eight corner temperatures (top sheet first) with additive sensor noise."""
    temps = np.asarray(temp_profile, dtype=float).reshape(-1)
    if temps.size != 8:
        raise ValueError("expected 4 corner temperatures per layer")
    lo, hi = THERMISTOR_RANGE
    if np.any(temps < lo) or np.any(temps > hi):
        raise ValueError(f"temperature outside operating range {lo}..{hi} C")
    if noise == 0:
        return temps.copy()
    rng = np.random.default_rng(rng_seed)
    return temps + rng.normal(0.0, noise, temps.shape)
