"""Digital waveguide bowed-string model.

Two delay lines (bridge side and neck side) joined at the bow point, a
one-pole reflection lowpass at the bridge, inversion at the nut, a
memoryless friction curve at the bow junction, and a resonant biquad body
filter on the output.  Control values follow the usual 0..128 convention.

The per-sample loop is JIT-compiled with numba; a single state instance is
single-threaded, independent instances can run in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

SAMPLE_RATE = 48000.0
DEFAULT_F0 = 476.5
MIN_LOOP_DELAY = 8.0

# Loop-delay compensation for the bridge reflection filter's phase delay
# plus the read/write ordering of the delay lines.  Calibrated so that the
# measured oscillation period at mid-range parameters matches
# sample_rate/frequency (see tests).
DELAY_COMPENSATION = 1.08

_BUF_LEN = 4096


class SimulationDivergedError(RuntimeError):
    """Raised when the waveguide state goes non-finite."""


@dataclass(frozen=True)
class BowedParams:
    """Bow control values in [0, 128] plus frequency in Hz."""

    pressure: float
    position: float
    velocity: float = 100.0
    frequency: float = DEFAULT_F0
    volume: float = 100.0

    def __post_init__(self):
        for name in ("pressure", "position", "velocity", "volume"):
            v = getattr(self, name)
            if not 0.0 <= v <= 128.0:
                raise ValueError(f"{name}={v} outside [0, 128]")
        if self.frequency <= 0.0:
            raise ValueError(f"frequency={self.frequency} must be > 0")


def _loop_delay(frequency, sample_rate):
    return sample_rate / frequency - DELAY_COMPENSATION


class WaveguideState:
    """Mutable per-instance simulation state for one bowed string."""

    def __init__(self, frequency=DEFAULT_F0, sample_rate=SAMPLE_RATE):
        if _loop_delay(frequency, sample_rate) < MIN_LOOP_DELAY:
            raise ValueError(
                f"frequency={frequency} leaves a loop delay below "
                f"{MIN_LOOP_DELAY} samples at {sample_rate} Hz"
            )
        self.sample_rate = float(sample_rate)
        self.frequency = float(frequency)
        self.bridge_line = np.zeros(_BUF_LEN)
        self.neck_line = np.zeros(_BUF_LEN)
        # write positions for the two lines
        self.write_idx = np.zeros(2, dtype=np.int64)
        # one-pole memory, biquad memories (x1, x2, y1, y2)
        self.filter_state = np.zeros(5)

    def reset(self):
        self.bridge_line[:] = 0.0
        self.neck_line[:] = 0.0
        self.write_idx[:] = 0
        self.filter_state[:] = 0.0


def _coefficients(params: BowedParams, sample_rate: float):
    """Map control values to the kernel's numeric coefficients."""
    total = _loop_delay(params.frequency, sample_rate)
    if total < MIN_LOOP_DELAY:
        raise ValueError("loop delay below minimum for this frequency")
    beta = 0.027236 + 0.2 * (params.position / 128.0)
    bridge_delay = beta * total
    neck_delay = (1.0 - beta) * total
    slope = 5.0 - 4.0 * (params.pressure / 128.0)
    bow_velocity = 0.25 * (params.velocity / 128.0)
    # bridge reflection lowpass: one-pole, gain 0.95
    pole = 0.6 - 0.1 * 22050.0 / sample_rate
    string_b0 = 0.95 * (1.0 - pole)
    string_a1 = -pole
    # body resonance: biquad at 500 Hz, radius 0.85, normalized peak gain
    radius = 0.85
    body_a1 = -2.0 * radius * math.cos(2.0 * math.pi * 500.0 / sample_rate)
    body_a2 = radius * radius
    body_b0 = 0.5 - 0.5 * body_a2
    out_gain = 2.0 * (params.volume / 128.0)
    return (
        bridge_delay,
        neck_delay,
        slope,
        bow_velocity,
        string_b0,
        string_a1,
        body_b0,
        body_a1,
        body_a2,
        out_gain,
    )


@njit(cache=True)
def _tick_n(
    bridge,
    neck,
    write_idx,
    filt,
    out,
    n,
    bridge_delay,
    neck_delay,
    slope,
    bow_velocity,
    string_b0,
    string_a1,
    body_b0,
    body_a1,
    body_a2,
    out_gain,
):
    buf_len = bridge.shape[0]
    wb = write_idx[0]
    wn = write_idx[1]
    op_y = filt[0]
    bq_x1 = filt[1]
    bq_x2 = filt[2]
    bq_y1 = filt[3]
    bq_y2 = filt[4]
    for i in range(n):
        # fractional delay reads (linear interpolation)
        rb = wb - bridge_delay
        ib = int(math.floor(rb))
        fb = rb - ib
        ib0 = ib % buf_len
        ib1 = (ib + 1) % buf_len
        bridge_out = bridge[ib0] * (1.0 - fb) + bridge[ib1] * fb

        rn = wn - neck_delay
        inn = int(math.floor(rn))
        fn = rn - inn
        in0 = inn % buf_len
        in1 = (inn + 1) % buf_len
        neck_out = neck[in0] * (1.0 - fn) + neck[in1] * fn

        # lowpassed, inverted reflection at the bridge; plain inversion at nut
        op_y = string_b0 * bridge_out - string_a1 * op_y
        bridge_refl = -op_y
        nut_refl = -neck_out

        delta_v = bow_velocity - (bridge_refl + nut_refl)
        t = abs((delta_v + 0.001) * slope) + 0.75
        friction = t ** -4.0
        if friction > 1.0:
            friction = 1.0
        new_v = delta_v * friction

        neck[wn % buf_len] = bridge_refl + new_v
        bridge[wb % buf_len] = nut_refl + new_v
        wb += 1
        wn += 1

        # resonant body filter on the bridge-incident wave
        x = bridge_out
        y = (
            body_b0 * x
            - body_b0 * bq_x2
            - body_a1 * bq_y1
            - body_a2 * bq_y2
        )
        bq_x2 = bq_x1
        bq_x1 = x
        bq_y2 = bq_y1
        bq_y1 = y
        out[i] = y * out_gain

    write_idx[0] = wb % buf_len
    write_idx[1] = wn % buf_len
    filt[0] = op_y
    filt[1] = bq_x1
    filt[2] = bq_x2
    filt[3] = bq_y1
    filt[4] = bq_y2


def advance(state: WaveguideState, params: BowedParams, n: int) -> np.ndarray:
    """Run the model for n samples with fixed parameters, mutating state."""
    coeffs = _coefficients(params, state.sample_rate)
    out = np.empty(n)
    _tick_n(
        state.bridge_line,
        state.neck_line,
        state.write_idx,
        state.filter_state,
        out,
        n,
        *coeffs,
    )
    if not np.isfinite(out[-1]) or not np.isfinite(state.filter_state).all():
        raise SimulationDivergedError(
            f"non-finite state at params {params}"
        )
    return out


def step(state: WaveguideState, params: BowedParams) -> float:
    """Advance the model one sample and return the output sample."""
    return float(advance(state, params, 1)[0])


def run(params: BowedParams, n_samples: int, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Run a fresh instance for n_samples and return the signal."""
    if n_samples <= 0:
        raise ValueError("n_samples must be > 0")
    state = WaveguideState(params.frequency, sample_rate)
    return advance(state, params, n_samples)


def two_period_length(f0: float, sample_rate=SAMPLE_RATE) -> int:
    """Number of samples in a two-period capture window at f0."""
    return int(round(2.0 * sample_rate / f0))


def capture_steady(params: BowedParams, f0=None, cycle_len=None,
                   sample_rate=SAMPLE_RATE, settle_seconds=1.0):
    """Run for settle_seconds and return the final two-period window.

    Returns None when the window's RMS is below 1e-5 (no stable
    oscillation, rejected).
    """
    if f0 is None:
        f0 = params.frequency
    if cycle_len is None:
        cycle_len = two_period_length(f0, sample_rate)
    n = int(round(settle_seconds * sample_rate))
    signal = run(params, n, sample_rate)
    window = signal[-cycle_len:]
    if float(np.sqrt(np.mean(window ** 2))) < 1e-5:
        return None
    return window.copy()


def random_schedule(n_entries, rng, f0=DEFAULT_F0, hold_range=(0.05, 0.5),
                    sample_rate=SAMPLE_RATE):
    """Uniform random (params, hold_samples) schedule over the control grid."""
    entries = []
    for _ in range(n_entries):
        params = BowedParams(
            pressure=float(rng.uniform(0.0, 128.0)),
            position=float(rng.uniform(0.0, 128.0)),
            velocity=100.0,
            frequency=f0,
            volume=100.0,
        )
        hold = int(round(rng.uniform(*hold_range) * sample_rate))
        entries.append((params, hold))
    return entries


def capture_dynamic(n_cycles, seed=0, f0=DEFAULT_F0, schedule=None,
                    hold_range=(0.05, 0.5), sample_rate=SAMPLE_RATE):
    """Capture cycles from a continuously running model under a changing
    parameter schedule.

    Each schedule entry holds its parameters for its interval; the final
    two-period window of the interval is captured and labeled with those
    parameters.  Windows failing the RMS >= 1e-5 rule are skipped and
    replaced by further random draws, so exactly n_cycles pairs return.
    """
    rng = np.random.default_rng(seed)
    cycle_len = two_period_length(f0, sample_rate)
    state = WaveguideState(f0, sample_rate)
    captured = []
    pending = list(schedule) if schedule is not None else []
    while len(captured) < n_cycles:
        if not pending:
            pending = random_schedule(
                max(n_cycles - len(captured), 1), rng, f0, hold_range,
                sample_rate)
        params, hold = pending.pop(0)
        hold = max(hold, cycle_len)
        signal = advance(state, params, hold)
        window = signal[-cycle_len:]
        if float(np.sqrt(np.mean(window ** 2))) >= 1e-5:
            captured.append((window.copy(), params))
    return captured


def measure_period(signal: np.ndarray, f0: float, sample_rate=SAMPLE_RATE) -> float:
    """Estimate the oscillation period (samples) by autocorrelation peak
    near the expected lag, with parabolic interpolation."""
    expected = sample_rate / f0
    x = signal - np.mean(signal)
    lo = int(expected * 0.8)
    hi = int(expected * 1.25)
    n = len(x)
    ac = np.array([np.dot(x[: n - k], x[k:]) for k in range(lo, hi + 1)])
    k = int(np.argmax(ac))
    lag = lo + k
    if 0 < k < len(ac) - 1:
        a, b, c = ac[k - 1], ac[k], ac[k + 1]
        denom = a - 2 * b + c
        if denom != 0.0:
            lag += 0.5 * (a - c) / denom
    return float(lag)
