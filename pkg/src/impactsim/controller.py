"""Control and data-storage subsystem.

Five-state operating machine, a drifting real-time clock resynchronized every
second, event records, a triple-redundant CRC-protected record store and the
piezo-driven wave-speed calibration.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .acquisition import AcsConfig, DigitizedRecord, GridMeasurement, highpass, interleave_and_digitize, trigger_capture
from .analysis import CALIBRATION_ARRIVAL, ArrivalParams, SingularGeometryError, detect_arrival, multilaterate
from .geometry import SensorGeometry
from .synth import OVERSAMPLE_RATE, Waveform, add_into, piezo_props, propagate_waveform


# --- state machine ----------------------------------------------------------------

class CdssState(str, enum.Enum):
    INITIALIZATION = "Initialization"
    MONITORING = "Monitoring"
    COMMUNICATION = "Communication"
    IMPACT_DETECTION = "ImpactDetection"
    PERIODIC_MEASUREMENT = "PeriodicMeasurement"


class CdssEvent(str, enum.Enum):
    HOST_COMMAND = "host_command"
    IMPACT_TRIGGER = "impact_trigger"
    PERIODIC_TIMER = "periodic_timer"
    WATCHDOG_TIMEOUT = "watchdog_timeout"
    INIT_DONE = "init_done"
    DONE = "done"  # the active state's work has finished


S, E = CdssState, CdssEvent

INIT_ACTIONS = ("clear", "calibrate", "verify")
IMPACT_ACTIONS = ("capture", "actuate", "rgs_measure", "check_supplies")
PERIODIC_ACTIONS = ("rgs_measure", "temperature", "health_status")
COMM_ACTIONS = ("serve_host",)

TRANSITIONS = {
    (S.INITIALIZATION, E.INIT_DONE): (S.MONITORING, ()),
    (S.MONITORING, E.IMPACT_TRIGGER): (S.IMPACT_DETECTION, IMPACT_ACTIONS),
    (S.MONITORING, E.PERIODIC_TIMER): (S.PERIODIC_MEASUREMENT, PERIODIC_ACTIONS),
    (S.MONITORING, E.HOST_COMMAND): (S.COMMUNICATION, COMM_ACTIONS),
    (S.COMMUNICATION, E.DONE): (S.MONITORING, ()),
    (S.IMPACT_DETECTION, E.DONE): (S.MONITORING, ()),
    (S.PERIODIC_MEASUREMENT, E.DONE): (S.MONITORING, ()),
}
for _s in S:
    TRANSITIONS[(_s, E.WATCHDOG_TIMEOUT)] = (S.INITIALIZATION, INIT_ACTIONS)


@dataclass(frozen=True)
class StepResult:
    state: CdssState
    actions: tuple
    accepted: bool
    reason: str = ""


def step(state, event) -> StepResult:
    """Apply one event.  Undefined pairs leave the state unchanged and come
    back with ``accepted=False`` rather than raising."""
    state, event = CdssState(state), CdssEvent(event)
    hit = TRANSITIONS.get((state, event))
    if hit is None:
        return StepResult(state, (), False, f"no transition for {event.value} in {state.value}")
    return StepResult(hit[0], tuple(hit[1]), True)


# --- clock --------------------------------------------------------------------

@dataclass
class Clock:
    """Local oscillator with a fixed fractional drift, resynchronized to the
    host at every whole second, so its error never exceeds one second's drift."""

    drift_ppm: float = 10.0
    sync_period: float = 1.0

    def read(self, t_true: float) -> float:
        last_sync = math.floor(t_true / self.sync_period) * self.sync_period
        return last_sync + (t_true - last_sync) * (1.0 + self.drift_ppm * 1e-6)

    def max_error(self) -> float:
        return abs(self.drift_ppm) * 1e-6 * self.sync_period


# --- event records ------------------------------------------------------------

class RecordKind(str, enum.Enum):
    IMPACT = "Impact"
    PERIODIC = "Periodic"
    CALIBRATION = "Calibration"
    HEALTH = "Health"


@dataclass
class EventRecord:
    kind: RecordKind
    timestamp: float
    acoustic: list | None = None  # DigitizedRecord per channel
    grid: GridMeasurement | None = None
    temps: list | None = None
    supply_status: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = RecordKind(self.kind)
        if self.kind is RecordKind.IMPACT:
            missing = [n for n, v in (("acoustic", self.acoustic), ("grid", self.grid),
                                      ("temps", self.temps), ("supply_status", self.supply_status)) if not v]
            if missing:
                raise ValueError(f"impact record missing {', '.join(missing)}")

    _MAGIC = b"EVR1"

    def to_bytes(self) -> bytes:
        """Magic, u32 header length, JSON header, then the acoustic records."""
        acoustic = self.acoustic or []
        head = {
            "kind": self.kind.value,
            "timestamp": self.timestamp,
            "grid": None if self.grid is None else self.grid.to_dict(),
            "temps": None if self.temps is None else [float(t) for t in self.temps],
            "supply_status": self.supply_status,
            "acoustic": [[r.volts_per_count, r.mux_rate] for r in acoustic],
        }
        hb = json.dumps(head, sort_keys=True).encode()
        body = b"".join(r.to_bytes() for r in acoustic)
        return self._MAGIC + struct.pack("<I", len(hb)) + hb + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EventRecord":
        if buf[:4] != cls._MAGIC:
            raise ValueError("not an event record")
        (n,) = struct.unpack_from("<I", buf, 4)
        head = json.loads(buf[8 : 8 + n].decode())
        off = 8 + n
        acoustic = []
        for vpc, mux in head["acoustic"]:
            rec, off = DigitizedRecord.from_bytes(buf, off, vpc, mux)
            acoustic.append(rec)
        grid = None if head["grid"] is None else GridMeasurement.from_dict(head["grid"])
        return cls(head["kind"], head["timestamp"], acoustic or None, grid,
                   head["temps"], head["supply_status"])


# --- protected store ------------------------------------------------------------

class ReadStatus(str, enum.Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    UNRECOVERABLE = "unrecoverable"


@dataclass
class ReadResult:
    payload: bytes | None
    status: ReadStatus
    flagged_replicas: tuple = ()
    raw_replicas: tuple = ()

    def record(self) -> EventRecord:
        if self.payload is None:
            raise ValueError("record is unrecoverable")
        return EventRecord.from_bytes(self.payload)


class StoreError(RuntimeError):
    pass


def crc32(data: bytes) -> int:
    # zlib's CRC-32 is the reflected 0xEDB88320 polynomial
    return zlib.crc32(data) & 0xFFFFFFFF


class ProtectedStore:
    """SRAM model holding each record as three replicas of ``payload + CRC``.

    Reads vote byte-by-byte across replicas and check the CRC of the voted
    payload.  When the next write would exceed ``capacity`` (counting all three
    replicas) the oldest records are evicted; evictions are logged.
    """

    CRC = struct.Struct("<I")
    _DUMP = struct.Struct("<4sQI")
    _MAGIC = b"TMRS"

    def __init__(self, capacity: int = 4 * 1024 * 1024):
        self.capacity = int(capacity)
        self._banks = deque()  # each entry: [bytearray] * 3
        self.evicted = 0
        self.log = []

    def __len__(self):
        return len(self._banks)

    @property
    def used(self) -> int:
        return sum(3 * len(b[0]) for b in self._banks)

    def store(self, payload) -> int:
        if isinstance(payload, EventRecord):
            payload = payload.to_bytes()
        payload = bytes(payload)
        word = payload + self.CRC.pack(crc32(payload))
        need = 3 * len(word)
        if need > self.capacity:
            raise StoreError(f"record of {need} bytes exceeds capacity {self.capacity}")
        while self.used + need > self.capacity:
            self._banks.popleft()
            self.evicted += 1
            self.log.append({"event": "evict_oldest", "remaining": len(self._banks)})
        self._banks.append([bytearray(word) for _ in range(3)])
        return len(self._banks) - 1

    def replica(self, index, r) -> bytes:
        return bytes(self._banks[index][r])

    def inject_fault(self, index, replica, byte_offset, bit):
        """Toggle one bit of one replica (offset counts the CRC bytes too)."""
        if not 0 <= index < len(self._banks):
            raise IndexError(f"record {index} out of range")
        if replica not in (0, 1, 2):
            raise IndexError("replica must be 0, 1 or 2")
        word = self._banks[index][replica]
        if not 0 <= byte_offset < len(word):
            raise IndexError(f"byte offset {byte_offset} outside 0..{len(word) - 1}")
        if not 0 <= bit < 8:
            raise IndexError("bit must be 0..7")
        word[byte_offset] ^= 1 << bit
        return self

    def read(self, index) -> ReadResult:
        if not 0 <= index < len(self._banks):
            raise IndexError(f"record {index} out of range")
        reps = [np.frombuffer(bytes(w), dtype=np.uint8) for w in self._banks[index]]
        a, b, c = reps
        # bitwise majority is the per-byte vote whenever two replicas agree
        voted = ((a & b) | (a & c) | (b & c)).tobytes()
        payload, tail = voted[: -self.CRC.size], voted[-self.CRC.size :]
        raw = tuple(r.tobytes() for r in reps)
        if crc32(payload) != self.CRC.unpack(tail)[0]:
            return ReadResult(None, ReadStatus.UNRECOVERABLE, (0, 1, 2), raw)
        flagged = tuple(i for i, r in enumerate(raw) if r != voted)
        status = ReadStatus.CORRECTED if flagged else ReadStatus.CLEAN
        return ReadResult(payload, status, flagged)

    def dump(self) -> bytes:
        """Header (magic, capacity, count) then, per record, its length and the
        three replicas back to back."""
        out = [self._DUMP.pack(self._MAGIC, self.capacity, len(self._banks))]
        for bank in self._banks:
            out.append(struct.pack("<I", len(bank[0])))
            out.extend(bytes(w) for w in bank)
        return b"".join(out)

    @classmethod
    def restore(cls, blob: bytes) -> "ProtectedStore":
        magic, capacity, count = cls._DUMP.unpack_from(blob, 0)
        if magic != cls._MAGIC:
            raise StoreError("not a store dump")
        st = cls(capacity)
        off = cls._DUMP.size
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            bank = []
            for _ in range(3):
                bank.append(bytearray(blob[off : off + n]))
                off += n
            st._banks.append(bank)
        return st


# --- controller driver ------------------------------------------------------------

class Controller:
    """Runs the state machine, stamps actions with the drifting clock and logs
    each transition (or rejection) as a JSON-compatible dict."""

    def __init__(self, clock: Clock | None = None, store: ProtectedStore | None = None):
        self.state = CdssState.INITIALIZATION
        self.clock = clock or Clock()
        self.store = store or ProtectedStore()
        self.log: list[dict] = []

    def handle(self, event, t_true: float) -> StepResult:
        res = step(self.state, event)
        self.log.append({
            "t": self.clock.read(t_true),
            "from": self.state.value,
            "event": CdssEvent(event).value,
            "to": res.state.value,
            "actions": list(res.actions),
            "accepted": res.accepted,
        })
        self.state = res.state
        if res.accepted and "clear" in res.actions:
            self.store = ProtectedStore(self.store.capacity)
        return res

    def record(self, rec: EventRecord) -> int:
        return self.store.store(rec)

    HOST_COMMANDS = ("status", "download", "clear")

    def serve(self, command: str):
        """Answer one host command; only valid in Communication.

        ``status`` returns a summary dict, ``download`` the store dump bytes,
        ``clear`` empties the store and returns the number of records dropped.
        """
        if self.state is not CdssState.COMMUNICATION:
            raise RuntimeError(f"host command {command!r} outside Communication")
        if command == "status":
            return {"state": self.state.value, "records": len(self.store), "used": self.store.used,
                    "capacity": self.store.capacity, "evicted": self.store.evicted}
        if command == "download":
            return self.store.dump()
        if command == "clear":
            n = len(self.store)
            self.store = ProtectedStore(self.store.capacity)
            return n
        raise ValueError(f"unknown host command {command!r}; expected one of {self.HOST_COMMANDS}")

    def log_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)


# --- wave-speed calibration ----------------------------------------------------------

class CalibrationError(RuntimeError):
    pass


@dataclass
class CalibrationResult:
    speed: float
    iterations: int
    position_error: float
    arrivals: tuple


def piezo_records(layer, geom: SensorGeometry, true_speed=None, noise_rms=0.0, rng=None,
                  amplitude=1.0, acs: AcsConfig = AcsConfig(), fs=OVERSAMPLE_RATE, span=2.5e-3):
    """Fire the layer's piezo and digitize the four sensors of that layer."""
    props = piezo_props(geom, layer)
    if true_speed is not None:
        props = type(props)(**{**props.__dict__, "group_speed": float(true_speed)})
    src = geom.piezo_position[layer]
    fire = 0.5e-3
    n = int(round(span * fs))
    data = np.zeros((acs.n_channels, n))
    if noise_rms:
        rng = rng if rng is not None else np.random.default_rng()
        data += rng.standard_normal(data.shape) * noise_rms
    for k, s in enumerate(geom.sensors(layer)):
        add_into(data[4 * layer + k], 0.0, fs, propagate_waveform(src, amplitude, s, props, fire, fs))
    waves = [highpass(Waveform(0.0, fs, row), acs) for row in data]
    stream = interleave_and_digitize(waves, acs)
    thr = acs.threshold_counts(noise_rms) if noise_rms else 0.5 * amplitude / acs.lsb
    cap = trigger_capture(stream, acs.__class__(**{**acs.__dict__, "record_len": 1000}), thr)
    if cap is None:
        raise CalibrationError("piezo pulse not captured")
    return cap[4 * layer : 4 * layer + 4]


def calibrate_wave_speed(records, geom: SensorGeometry, layer: int, initial_speed: float,
                         params: ArrivalParams = CALIBRATION_ARRIVAL, max_iter=50, tol=1e-6) -> CalibrationResult:
    """Adjust the layer wave speed until the multilaterated piezo position
    matches the known piezo position.

    Bounded scalar search over ``initial_speed`` +/-20%.  If the initial speed
    already reproduces the piezo position within ``tol`` metres it is returned
    unchanged.
    """
    found = [detect_arrival(r, params) for r in records]
    t = np.array([a.time if a.significance > params.detect_sigma else np.nan for a in found])
    if np.isfinite(t).sum() < 3:
        raise CalibrationError("no detectable pulse on two or more sensors")
    sensors = geom.sensors(layer)
    target = np.asarray(geom.piezo_position[layer], dtype=float)

    def miss(c):
        try:
            p = multilaterate(t, sensors, c, geom.active_area).position
        except SingularGeometryError:
            return 1e3
        return float(np.hypot(*(np.asarray(p) - target)))

    e0 = miss(initial_speed)
    if e0 <= tol:
        return CalibrationResult(float(initial_speed), 0, e0, tuple(t))
    res = minimize_scalar(miss, bounds=(0.8 * initial_speed, 1.2 * initial_speed),
                          method="bounded", options={"maxiter": max_iter, "xatol": 1e-4 * initial_speed})
    return CalibrationResult(float(res.x), int(res.nfev), float(res.fun), tuple(t))
