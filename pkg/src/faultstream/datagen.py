"""Synthetic gearbox vibration data, windowing, and online stream assembly.

Signal model (per channel): shaft-rotation harmonics at f_r = rpm/60, a
gear-mesh tone at 36*f_r with fault-dependent structure, and additive
Gaussian noise at a configurable SNR. Channel gains and phases vary
deterministically with the seed; all deterministic components scale with
load and speed, so condition changes move both energy and frequency
content.

Fault signature mapping (class id, name, signature):

    0  healthy       shaft harmonics + mesh tone + weak 2nd mesh harmonic
    1  gear_wear     broadband mesh energy rise: mesh amplitude x1.8 and
                     raised 2nd/3rd mesh harmonics
    2  teeth_crack   healthy base + one decaying ~2.8 kHz resonance burst
                     per shaft revolution
    3  gear_pitting  mesh tone amplitude-modulated at f_r (depth 0.8),
                     i.e. sidebands at mesh +/- f_r

Transitional profiles ramp speed and/or torque linearly over the recording;
their windows carry the transitional condition marker (-1) instead of a
source-domain index. Ramps differ from the steady regimes they connect in
two physical ways. A torsional drivetrain mode amplitude-modulates the mesh
tone at a fixed ~41 Hz: under steady load only a small wandering residual
depth remains, while ramps drive the mode several times harder in
proportion to the ramp rate. And the speed governor has droop: as the load
travels away from its starting point the shaft speed trails its set-point
by a growing margin, sweeping the whole tone stack a few percent off its
commanded position over the course of the ramp.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE_HZ = 12800
WINDOW_LEN = 1024
WINDOW_STRIDE = 16
N_CHANNELS = 6
GEAR_TEETH = 36
TRANSITIONAL = -1  # condition_trace marker for ramping regimes

FAULT_CLASSES = ("healthy", "gear_wear", "teeth_crack", "gear_pitting")

# condition scaling exponents: energy grows with load and speed
_TORQUE_REF = 20.0
_SPEED_REF = 1000.0
_TORQUE_EXP = 0.6
_SPEED_EXP = 0.8

_SHAFT_AMPS = (0.5, 0.25, 0.12)   # shaft harmonics 1..3
# per-sensor sensitivities: properties of the rig, identical in every recording
_CHANNEL_GAINS = (1.0, 0.88, 1.12, 0.84, 1.06, 0.95)
_MESH_AMP = 1.0
_MESH2_AMP = 0.25
_WEAR_MESH_GAIN = 1.8
_WEAR_MESH2_AMP = 0.7
_WEAR_MESH3_AMP = 0.45
_CRACK_IMPULSE_AMP = 3.0
_CRACK_RESONANCE_HZ = 2800.0
_CRACK_DECAY_S = 0.0015
_PITTING_AM_DEPTH = 0.8

# torsional drivetrain mode: amplitude-modulates the mesh tone. Steady
# operation carries only a small residual depth that wanders slowly around
# _TORSIONAL_BASE_MEAN (load fluctuation, identical law for every class),
# while ramps drive the mode several times past the residual ceiling in
# proportion to the ramp rate — so ramping windows extrapolate a factor the
# steady regimes only hint at, rather than interpolate between set-points.
_TORSIONAL_HZ = 41.0
_TORSIONAL_BASE_MEAN = 0.05
_TORSIONAL_BASE_STD = 0.03
_TORSIONAL_BASE_TC_S = 0.05  # correlation time of the residual wander
_TORSIONAL_BASE_MAX = 0.10
_TORSIONAL_TORQUE_K = 0.6   # depth per unit |dT/dt| / T_ref
_TORSIONAL_SPEED_K = 0.21   # depth per unit |dOmega/dt| / Omega_ref
_TORSIONAL_MAX_DEPTH = 0.8

# speed governor droop: while the load moves, the shaft speed trails the
# set-point in proportion to how far the load has travelled (falling load ->
# growing overspeed and vice versa). A torque ramp therefore drags a slow
# monotone frequency sweep behind it — mesh content drifts a few percent
# through values the steady regimes never visit, and keeps drifting for the
# whole ramp instead of settling into a new regime.
_GOVERNOR_DROOP = 0.2


class SchemaError(ValueError):
    """CSV file does not match the expected channel schema."""


class ParseError(ValueError):
    """CSV row could not be parsed; message carries the line number."""


def fault_id(fault, class_names=FAULT_CLASSES) -> int:
    if isinstance(fault, str):
        try:
            return class_names.index(fault)
        except ValueError:
            raise ValueError(f"unknown fault {fault!r}; known: {list(class_names)}") from None
    k = int(fault)
    if not 0 <= k < len(class_names):
        raise ValueError(f"fault id {k} out of range for {len(class_names)} classes")
    return k


@dataclass(frozen=True)
class ConditionProfile:
    """One operating regime: fixed or linearly ramping speed and torque."""

    speed_rpm: float | tuple
    torque_nm: float | tuple
    duration_s: float
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        for name, v in (("speed_rpm", self.speed_rpm), ("torque_nm", self.torque_nm)):
            ends = v if isinstance(v, tuple) else (v,)
            if any(e <= 0 for e in ends):
                raise ValueError(f"{name} endpoints must be positive, got {v}")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @property
    def kind(self) -> str:
        ramps = isinstance(self.speed_rpm, tuple) or isinstance(self.torque_nm, tuple)
        return "transitional" if ramps else "steady"

    def ramp_rates(self) -> tuple:
        """(|dT/dt| in Nm/s, |dOmega/dt| in rpm/s) of the linear ramps."""
        d_torque = (abs(self.torque_nm[1] - self.torque_nm[0]) / self.duration_s
                    if isinstance(self.torque_nm, tuple) else 0.0)
        d_speed = (abs(self.speed_rpm[1] - self.speed_rpm[0]) / self.duration_s
                   if isinstance(self.speed_rpm, tuple) else 0.0)
        return d_torque, d_speed

    def speed_at(self, frac: np.ndarray) -> np.ndarray:
        """Instantaneous rpm at fractional positions in [0, 1]."""
        if isinstance(self.speed_rpm, tuple):
            s0, s1 = self.speed_rpm
            return s0 + (s1 - s0) * frac
        return np.full_like(frac, float(self.speed_rpm))

    def torque_at(self, frac: np.ndarray) -> np.ndarray:
        if isinstance(self.torque_nm, tuple):
            t0, t1 = self.torque_nm
            return t0 + (t1 - t0) * frac
        return np.full_like(frac, float(self.torque_nm))


@dataclass
class RawRecording:
    channels: np.ndarray          # (6, L)
    fault_label: int
    condition_trace: np.ndarray   # (L,) condition index, or TRANSITIONAL
    rpm: np.ndarray | None = None
    torque: np.ndarray | None = None
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        if self.channels.shape[0] != N_CHANNELS:
            raise SchemaError(f"expected {N_CHANNELS} channels, got {self.channels.shape[0]}")

    @property
    def length(self) -> int:
        return self.channels.shape[1]


@dataclass
class WindowSet:
    """A batch of windowed samples: rows of x, class labels y, condition ids c."""

    x: np.ndarray  # (n, 6144)
    y: np.ndarray  # (n,)
    c: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.c[idx])

    @staticmethod
    def concat(sets) -> "WindowSet":
        sets = list(sets)
        return WindowSet(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.c for s in sets]),
        )


def duration_for_windows(n_windows: int, length: int = WINDOW_LEN,
                         stride: int = WINDOW_STRIDE) -> float:
    """Recording duration that yields exactly n_windows at the given stride."""
    if n_windows < 1:
        raise ValueError("need at least one window")
    return (length + stride * (n_windows - 1)) / SAMPLE_RATE_HZ


def _speed_jitter(rng, n: int, std: float, tc_s: float, fs: int) -> np.ndarray:
    """Fractional shaft-speed fluctuation: stationary AR(1) noise.

    Real shafts never hold speed exactly; the resulting phase diffusion is
    what keeps distant windows of one recording from being phase-locked
    copies of each other.
    """
    if std <= 0:
        return np.zeros(n)
    rho = np.exp(-1.0 / (tc_s * fs))
    eps = rng.normal(0.0, std * np.sqrt(1.0 - rho * rho), size=n)
    j = np.empty(n)
    acc = rng.normal(0.0, std)
    for i in range(n):
        acc = rho * acc + eps[i]
        j[i] = acc
    return j


def synth_generate(profile: ConditionProfile, fault, seed: int,
                   snr_db: float = 10.0, condition_index: int = TRANSITIONAL,
                   class_names=FAULT_CLASSES, jitter_std: float = 0.02,
                   jitter_tc_s: float = 0.005) -> RawRecording:
    """Generate one 6-channel recording; pure function of its arguments."""
    k = fault_id(fault, class_names)
    fault_name = class_names[k]
    rng = np.random.default_rng(seed)
    fs = profile.sample_rate_hz
    L = int(round(profile.duration_s * fs))
    frac = np.arange(L) / max(L - 1, 1)
    torque = profile.torque_at(frac)
    if isinstance(profile.torque_nm, tuple):
        droop = -_GOVERNOR_DROOP * (torque - profile.torque_nm[0]) / _TORQUE_REF
    else:
        droop = 0.0
    rpm = (profile.speed_at(frac) * (1.0 + droop)
           * (1.0 + _speed_jitter(rng, L, jitter_std, jitter_tc_s, fs)))
    f_rot = rpm / 60.0
    # phase = 2*pi * cumulative integral of instantaneous frequency
    phi_rot = 2.0 * np.pi * np.cumsum(f_rot) / fs
    phi_mesh = GEAR_TEETH * phi_rot
    scale = (torque / _TORQUE_REF) ** _TORQUE_EXP * (rpm / _SPEED_REF) ** _SPEED_EXP

    rate_t, rate_s = profile.ramp_rates()
    # residual depth is a wandering process, not a per-recording constant:
    # every class sees the whole residual range, so the mode's strength
    # carries no class information at steady load
    residual = np.clip(
        _TORSIONAL_BASE_MEAN
        + _speed_jitter(rng, L, _TORSIONAL_BASE_STD, _TORSIONAL_BASE_TC_S, fs),
        0.0, _TORSIONAL_BASE_MAX)
    torsional_depth = np.minimum(
        _TORSIONAL_MAX_DEPTH,
        residual
        + _TORSIONAL_TORQUE_K * rate_t / _TORQUE_REF
        + _TORSIONAL_SPEED_K * rate_s / _SPEED_REF,
    )
    t_abs = np.arange(L) / fs

    # once-per-revolution onsets, shared across channels
    revs = np.floor(phi_rot / (2.0 * np.pi))
    onsets = np.nonzero(np.diff(revs) > 0)[0] + 1
    imp_len = int(round(6 * _CRACK_DECAY_S * fs))
    t_imp = np.arange(imp_len) / fs
    imp_envelope = np.exp(-t_imp / _CRACK_DECAY_S)

    channels = np.empty((N_CHANNELS, L))
    for ch in range(N_CHANNELS):
        gain = _CHANNEL_GAINS[ch]
        sig = np.zeros(L)
        for h, amp in enumerate(_SHAFT_AMPS, start=1):
            sig += amp * np.sin(h * phi_rot + rng.uniform(0, 2 * np.pi))

        mesh_amp = _MESH_AMP
        mesh2_amp = _MESH2_AMP
        mesh3_amp = 0.0
        if fault_name == "gear_wear":
            mesh_amp *= _WEAR_MESH_GAIN
            mesh2_amp = _WEAR_MESH2_AMP
            mesh3_amp = _WEAR_MESH3_AMP
        mesh = mesh_amp * np.sin(phi_mesh + rng.uniform(0, 2 * np.pi))
        if fault_name == "gear_pitting":
            mesh *= 1.0 + _PITTING_AM_DEPTH * np.cos(phi_rot + rng.uniform(0, 2 * np.pi))
        mesh *= 1.0 + torsional_depth * np.cos(
            2.0 * np.pi * _TORSIONAL_HZ * t_abs + rng.uniform(0, 2 * np.pi)
        )
        sig += mesh
        sig += mesh2_amp * np.sin(2 * phi_mesh + rng.uniform(0, 2 * np.pi))
        if mesh3_amp:
            sig += mesh3_amp * np.sin(3 * phi_mesh + rng.uniform(0, 2 * np.pi))

        if fault_name == "teeth_crack":
            carrier_phase = rng.uniform(0, 2 * np.pi)
            burst = imp_envelope * np.sin(2 * np.pi * _CRACK_RESONANCE_HZ * t_imp + carrier_phase)
            for i0 in onsets:
                stop = min(i0 + imp_len, L)
                sig[i0:stop] += _CRACK_IMPULSE_AMP * rng.uniform(0.85, 1.15) * burst[: stop - i0]

        sig *= gain * scale
        rms = np.sqrt(np.mean(sig**2))
        noise_std = rms / (10.0 ** (snr_db / 20.0))
        channels[ch] = sig + rng.normal(0.0, noise_std, size=L)

    trace_value = TRANSITIONAL if profile.kind == "transitional" else condition_index
    trace = np.full(L, trace_value, dtype=np.int64)
    return RawRecording(channels=channels, fault_label=k, condition_trace=trace,
                        rpm=rpm, torque=torque, sample_rate_hz=fs)


def window_count(length: int, win: int = WINDOW_LEN, stride: int = WINDOW_STRIDE) -> int:
    if length < win:
        raise ValueError(f"signal of length {length} is shorter than one window ({win})")
    return (length - win) // stride + 1


def window_segment(rec: RawRecording, length: int = WINDOW_LEN,
                   stride: int = WINDOW_STRIDE) -> WindowSet:
    """Slide a window over all channels; each sample concatenates the six
    channel blocks channel-major (ch1 points, then ch2 points, ...)."""
    n = window_count(rec.length, length, stride)
    starts = np.arange(n) * stride
    views = np.lib.stride_tricks.sliding_window_view(rec.channels, length, axis=1)
    # views: (6, L-length+1, length) -> select strided starts -> (n, 6, length)
    windows = views[:, starts, :].transpose(1, 0, 2)
    x = np.ascontiguousarray(windows.reshape(n, N_CHANNELS * length))
    y = np.full(n, rec.fault_label, dtype=np.int64)
    c = rec.condition_trace[starts].copy()
    return WindowSet(x=x, y=y, c=c)


def split_offline_online(ws: WindowSet, frac: float = 0.10):
    """Split one time-ordered (class, condition) group: first floor(frac*n)
    windows go offline (at least 1), the rest stay for the online stream."""
    n = len(ws)
    if n == 0:
        raise ValueError("cannot split an empty window set")
    n_off = max(1, int(np.floor(frac * n)))
    return ws.take(slice(0, n_off)), ws.take(slice(n_off, n))


def fault_schedule(n: int) -> np.ndarray:
    """Boolean mask over stream positions: the target fault is active on
    [25%, 50%) and [75%, 100%] of the timeline, healthy elsewhere."""
    if n < 1:
        raise ValueError("empty stream")
    q1, q2, q3 = n // 4, n // 2, (3 * n) // 4
    i = np.arange(n)
    return ((i >= q1) & (i < q2)) | (i >= q3)


# --- scenarios ----------------------------------------------------------------

@dataclass(frozen=True)
class SegmentSpec:
    speed_rpm: float | tuple
    torque_nm: float | tuple
    length: int  # stream positions drawn from this segment


@dataclass(frozen=True)
class OfflineConditionSpec:
    speed_rpm: float
    torque_nm: float
    windows: int  # windows per (class, condition) before the 10% split


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    offline_conditions: tuple
    online_segments: tuple
    class_names: tuple = FAULT_CLASSES
    snr_db: float = 10.0
    offline_frac: float = 0.10
    # shaft-speed fluctuation: large enough that windows taken at different
    # times are never phase-locked copies of one another
    jitter_std: float = 0.02
    jitter_tc_s: float = 0.005

    @property
    def n_domains(self) -> int:
        return len(self.offline_conditions)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def stream_length(self) -> int:
        return sum(s.length for s in self.online_segments)


def builtin_scenario(name: str, steady_windows: int = 1000,
                     segment_lengths: tuple = (560, 480, 560),
                     snr_db: float = 10.0) -> ScenarioConfig:
    """The two synthetic analogs: load ramp ("I") and speed ramp ("II")."""
    s1, s2, s3 = segment_lengths
    if name == "I":
        return ScenarioConfig(
            name="I",
            offline_conditions=(
                OfflineConditionSpec(1000.0, 10.0, steady_windows),
                OfflineConditionSpec(1000.0, 15.0, steady_windows),
                OfflineConditionSpec(1000.0, 20.0, steady_windows),
            ),
            online_segments=(
                SegmentSpec(1000.0, 20.0, s1),
                SegmentSpec(1000.0, (20.0, 15.0), s2),
                SegmentSpec(1000.0, 15.0, s3),
            ),
            snr_db=snr_db,
        )
    if name == "II":
        return ScenarioConfig(
            name="II",
            offline_conditions=(
                OfflineConditionSpec(1000.0, 20.0, steady_windows),
                OfflineConditionSpec(1500.0, 20.0, steady_windows),
                OfflineConditionSpec(2000.0, 20.0, steady_windows),
            ),
            online_segments=(
                SegmentSpec(2000.0, 20.0, s1),
                SegmentSpec((2000.0, 1500.0), 20.0, s2),
                SegmentSpec(1500.0, 20.0, s3),
            ),
            snr_db=snr_db,
        )
    raise ValueError(f"unknown built-in scenario {name!r} (use 'I' or 'II')")


def scenario_from_json(path) -> ScenarioConfig:
    """Load a scenario description file (documented schema, see README)."""
    with open(path) as f:
        d = json.load(f)
    def _ramp(v):
        return tuple(v) if isinstance(v, (list, tuple)) else float(v)
    return ScenarioConfig(
        name=d.get("name", "custom"),
        offline_conditions=tuple(
            OfflineConditionSpec(float(o["speed_rpm"]), float(o["torque_nm"]), int(o["windows"]))
            for o in d["offline_conditions"]
        ),
        online_segments=tuple(
            SegmentSpec(_ramp(s["speed_rpm"]), _ramp(s["torque_nm"]), int(s["length"]))
            for s in d["online_segments"]
        ),
        class_names=tuple(d.get("class_names", FAULT_CLASSES)),
        snr_db=float(d.get("snr_db", 10.0)),
        offline_frac=float(d.get("offline_frac", 0.10)),
        jitter_std=float(d.get("jitter_std", 0.02)),
        jitter_tc_s=float(d.get("jitter_tc_s", 0.005)),
    )


@dataclass
class SegmentPools:
    tag: str                 # steady-1 / transitional / steady-2 ...
    condition_index: int     # offline domain index, or TRANSITIONAL
    length: int
    pools: dict              # class id -> WindowSet (time-ordered)


@dataclass
class ScenarioData:
    config: ScenarioConfig
    offline: WindowSet       # all classes and conditions, labels + condition ids
    segments: list           # list[SegmentPools] in stream order
    seed: int


def _segment_needs(config: ScenarioConfig):
    """Per-segment sample counts: healthy positions and fault positions."""
    total = config.stream_length
    active = fault_schedule(total)
    needs = []
    off = 0
    for seg in config.online_segments:
        part = active[off: off + seg.length]
        needs.append((int((~part).sum()), int(part.sum())))
        off += seg.length
    return needs


def _organize_scenario(config: ScenarioConfig, offline_recs: dict,
                       transitional_recs: dict, seed: int) -> ScenarioData:
    """Window, split, and pool pre-made recordings into a ScenarioData.

    Shared tail of the synthetic and real-CSV paths. ``offline_recs`` maps
    (condition index, class id) to a steady recording; ``transitional_recs``
    maps (online segment index, class id) to a ramping one.
    """
    needs = _segment_needs(config)
    offline_parts = []
    remainders: dict[tuple, WindowSet] = {}
    for m, _cond in enumerate(config.offline_conditions):
        for k in range(config.n_classes):
            rec = offline_recs[(m, k)]
            if rec.fault_label != k:
                raise ValueError(
                    f"offline recording for condition {m} class {k} carries "
                    f"fault label {rec.fault_label}")
            ws = window_segment(rec)
            off, rem = split_offline_online(ws, config.offline_frac)
            offline_parts.append(off)
            remainders[(m, k)] = rem

    steady_tag = 0
    segments = []
    for s, seg in enumerate(config.online_segments):
        healthy_need, fault_need = needs[s]
        ramping = isinstance(seg.speed_rpm, tuple) or isinstance(seg.torque_nm, tuple)
        if ramping:
            # every class covers the full ramp so the condition trajectory
            # stays continuous when the active class switches mid-segment
            pools = {}
            for k in range(config.n_classes):
                if (healthy_need if k == 0 else fault_need) == 0:
                    continue
                ws = window_segment(transitional_recs[(s, k)])
                if len(ws) < seg.length:
                    raise ValueError(
                        f"scenario {config.name!r} segment {s}: class {k} ramp "
                        f"recording yields {len(ws)} windows, needs {seg.length}"
                    )
                pools[k] = ws
            segments.append(SegmentPools("transitional", TRANSITIONAL, seg.length, pools))
        else:
            steady_tag += 1
            m = _match_offline_condition(config, seg)
            pools = {}
            for k in range(config.n_classes):
                need = healthy_need if k == 0 else fault_need
                rem = remainders[(m, k)]
                if len(rem) < need:
                    raise ValueError(
                        f"scenario {config.name!r} segment {s}: condition {m} class {k} "
                        f"has {len(rem)} held-out windows but the stream needs {need}"
                    )
                pools[k] = rem
            segments.append(SegmentPools(f"steady-{steady_tag}", m, seg.length, pools))

    return ScenarioData(config=config, offline=WindowSet.concat(offline_parts),
                        segments=segments, seed=seed)


def _synthesize_recordings(config: ScenarioConfig, seed: int):
    """One generated recording per (condition, class) plus per-segment ramps."""
    needs = _segment_needs(config)
    offline_recs = {}
    for m, cond in enumerate(config.offline_conditions):
        profile = ConditionProfile(cond.speed_rpm, cond.torque_nm,
                                   duration_for_windows(cond.windows))
        for k in range(config.n_classes):
            offline_recs[(m, k)] = synth_generate(
                profile, k, seed=_derive_seed(seed, m, k, 0),
                snr_db=config.snr_db, condition_index=m,
                class_names=config.class_names,
                jitter_std=config.jitter_std, jitter_tc_s=config.jitter_tc_s)

    transitional_recs = {}
    for s, seg in enumerate(config.online_segments):
        if not (isinstance(seg.speed_rpm, tuple) or isinstance(seg.torque_nm, tuple)):
            continue
        healthy_need, fault_need = needs[s]
        profile = ConditionProfile(seg.speed_rpm, seg.torque_nm,
                                   duration_for_windows(seg.length))
        for k in range(config.n_classes):
            if (healthy_need if k == 0 else fault_need) == 0:
                continue
            transitional_recs[(s, k)] = synth_generate(
                profile, k, seed=_derive_seed(seed, 100 + s, k, 1),
                snr_db=config.snr_db, class_names=config.class_names,
                jitter_std=config.jitter_std, jitter_tc_s=config.jitter_tc_s)
    return offline_recs, transitional_recs


def build_scenario(config: ScenarioConfig, seed: int) -> ScenarioData:
    """Generate recordings, window them, split 10/90, and organize online pools.

    One recording per (condition, class); steady recordings are split into
    the offline set and the stream remainder, transitional recordings go
    online in full. Only pools a stream can actually draw from are retained.
    """
    offline_recs, transitional_recs = _synthesize_recordings(config, seed)
    return _organize_scenario(config, offline_recs, transitional_recs, seed)


def export_scenario_csv(config: ScenarioConfig, data_dir, seed: int) -> list:
    """Write the generated recordings as CSV files in the layout that
    build_scenario_from_dir reads back. Returns the paths written."""
    os.makedirs(data_dir, exist_ok=True)
    offline_recs, transitional_recs = _synthesize_recordings(config, seed)
    paths = []
    for (m, k), rec in offline_recs.items():
        path = os.path.join(data_dir, f"offline_c{m}_{config.class_names[k]}.csv")
        write_csv(rec, path)
        paths.append(path)
    for (s, k), rec in transitional_recs.items():
        path = os.path.join(data_dir, f"transitional_s{s}_{config.class_names[k]}.csv")
        write_csv(rec, path)
        paths.append(path)
    return paths


def build_scenario_from_dir(config: ScenarioConfig, data_dir, seed: int = 0) -> ScenarioData:
    """Assemble a scenario from recording exports instead of the generator.

    Expects one CSV per recording (schema as ``load_csv``) in ``data_dir``:
    ``offline_c{m}_{class}.csv`` for the m-th steady condition, and
    ``transitional_s{s}_{class}.csv`` for the s-th online segment (ramping
    segments only, and only for classes the stream schedule draws there).
    Real recordings may be longer than the scenario asks for; they must not
    be shorter.
    """
    needs = _segment_needs(config)
    offline_recs = {}
    for m in range(len(config.offline_conditions)):
        for k, name in enumerate(config.class_names):
            path = os.path.join(data_dir, f"offline_c{m}_{name}.csv")
            offline_recs[(m, k)] = load_csv(path, fault_label=k, condition_index=m)
    transitional_recs = {}
    for s, seg in enumerate(config.online_segments):
        if not (isinstance(seg.speed_rpm, tuple) or isinstance(seg.torque_nm, tuple)):
            continue
        healthy_need, fault_need = needs[s]
        for k, name in enumerate(config.class_names):
            if (healthy_need if k == 0 else fault_need) == 0:
                continue
            path = os.path.join(data_dir, f"transitional_s{s}_{name}.csv")
            transitional_recs[(s, k)] = load_csv(path, fault_label=k,
                                                 condition_index=TRANSITIONAL)
    return _organize_scenario(config, offline_recs, transitional_recs, seed)


def _derive_seed(base: int, a: int, b: int, c: int) -> int:
    """Stable per-recording seed so every recording is independently reproducible."""
    return (base * 1_000_003 + a * 1_009 + b * 13 + c) % (2**31)


def _match_offline_condition(config: ScenarioConfig, seg: SegmentSpec) -> int:
    for m, cond in enumerate(config.offline_conditions):
        if cond.speed_rpm == seg.speed_rpm and cond.torque_nm == seg.torque_nm:
            return m
    raise ValueError(
        f"online steady segment ({seg.speed_rpm} rpm, {seg.torque_nm} Nm) "
        "does not match any offline condition"
    )


# --- stream blocks -------------------------------------------------------------

@dataclass
class StreamBlock:
    """One batch of unlabeled stream samples.

    Adapters only ever receive ``x``; the ground truth and per-sample
    bookkeeping stay behind the reveal_* methods, which belong to the
    scorer. That separation is the leakage barrier: nothing on the
    adaptation path takes a StreamBlock.
    """

    index: int              # 1-based position of the block in the stream
    x: np.ndarray           # (B, 6144)
    _truth: np.ndarray      # (B,) hidden class labels
    _tags: list             # (B,) segment tags
    _positions: np.ndarray  # (B,) global stream positions

    def __len__(self) -> int:
        return self.x.shape[0]

    def reveal_truth(self) -> np.ndarray:
        return self._truth

    def reveal_tags(self) -> list:
        return self._tags

    def reveal_positions(self) -> np.ndarray:
        return self._positions


def build_stream(data: ScenarioData, fault, block_size: int = 64) -> list:
    """Assemble the blocks for one fault's stream.

    Timeline: healthy, target fault, healthy, target fault, switching at the
    25/50/75% positions. Condition segments run in scenario order
    underneath. Steady segments consume the next unused window of the
    active class's held-out pool; transitional segments index every pool by
    the offset into the segment, so the ramp advances monotonically no
    matter which class is active.
    """
    k_fault = fault_id(fault, data.config.class_names)
    if k_fault == 0:
        raise ValueError("the streamed fault must differ from the healthy class")
    total = sum(seg.length for seg in data.segments)
    if total == 0:
        raise ValueError("scenario has no online segments")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    active = fault_schedule(total)

    xs = np.empty((total, data.offline.x.shape[1]))
    ys = np.empty(total, dtype=np.int64)
    tags: list[str] = []
    cursors: dict[tuple, int] = {}
    pos = 0
    for s, seg in enumerate(data.segments):
        for off in range(seg.length):
            k = k_fault if active[pos] else 0
            pool = seg.pools.get(k)
            if seg.condition_index == TRANSITIONAL:
                cur = off
            else:
                cur = cursors.get((s, k), 0)
                cursors[(s, k)] = cur + 1
            if pool is None or cur >= len(pool):
                raise ValueError(
                    f"segment {s} ({seg.tag}) ran out of class-{k} windows at position {pos}"
                )
            xs[pos] = pool.x[cur]
            ys[pos] = k
            tags.append(seg.tag)
            pos += 1

    blocks = []
    for t, start in enumerate(range(0, total, block_size), start=1):
        stop = min(start + block_size, total)
        xb = xs[start:stop].copy()
        xb.setflags(write=False)  # adapters may read the stream, never edit it
        blocks.append(StreamBlock(
            index=t,
            x=xb,
            _truth=ys[start:stop].copy(),
            _tags=tags[start:stop],
            _positions=np.arange(start, stop),
        ))
    return blocks


# --- CSV ingestion --------------------------------------------------------------

CSV_CHANNEL_COLUMNS = tuple(f"ch{i}" for i in range(1, N_CHANNELS + 1))


def write_csv(rec: RawRecording, path) -> None:
    """Write a recording in the documented schema: ch1..ch6[,rpm,torque].

    Values are written with full repr precision so a round trip through
    load_csv reproduces the recording exactly.
    """
    has_cond = rec.rpm is not None and rec.torque is not None
    header = list(CSV_CHANNEL_COLUMNS) + (["rpm", "torque"] if has_cond else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for i in range(rec.length):
            row = [repr(float(rec.channels[ch, i])) for ch in range(N_CHANNELS)]
            if has_cond:
                row += [repr(float(rec.rpm[i])), repr(float(rec.torque[i]))]
            w.writerow(row)


def load_csv(path, fault_label: int = 0, condition_index: int = TRANSITIONAL) -> RawRecording:
    """Parse a recording from the ch1..ch6[,rpm,torque] schema.

    The fault label and condition index are recording-level metadata that a
    CSV export does not carry; callers pass them in.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        chan_cols = [h for h in header if h.startswith("ch")]
        if tuple(chan_cols) != CSV_CHANNEL_COLUMNS:
            raise SchemaError(
                f"{path}: expected channel columns {list(CSV_CHANNEL_COLUMNS)}, got {chan_cols}"
            )
        extra = [h for h in header if not h.startswith("ch")]
        if not set(extra) <= {"rpm", "torque"}:
            raise SchemaError(f"{path}: unexpected columns {sorted(set(extra) - {'rpm', 'torque'})}")
        col_index = {h: j for j, h in enumerate(header)}
        has_cond = "rpm" in col_index and "torque" in col_index

        chans: list[list[float]] = [[] for _ in range(N_CHANNELS)]
        rpm: list[float] = []
        torque: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                for ch, col in enumerate(CSV_CHANNEL_COLUMNS):
                    chans[ch].append(float(row[col_index[col]]))
                if has_cond:
                    rpm.append(float(row[col_index["rpm"]]))
                    torque.append(float(row[col_index["torque"]]))
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None

    channels = np.array(chans)
    if channels.shape[1] == 0:
        raise SchemaError(f"{path}: no data rows")
    trace = np.full(channels.shape[1], condition_index, dtype=np.int64)
    return RawRecording(
        channels=channels,
        fault_label=fault_label,
        condition_trace=trace,
        rpm=np.array(rpm) if has_cond else None,
        torque=np.array(torque) if has_cond else None,
    )
