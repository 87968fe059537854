"""Cycle datasets: alignment, differentiation, normalization, persistence.

Pipeline order is fixed: phase-align raw two-period windows, take
first-order differences, compute per-element statistics, normalize.
Known synthesis parameters are linearly scaled to [-1, 1].

File format: a UTF-8 text manifest of key:value lines terminated by a
blank line, followed by a raw payload of little-endian 32-bit floats,
row-major.  The first two payload rows carry the normalization stats
(mean row then std row, each padded with the raw parameter lo/hi bounds),
then one row per record: L data values followed by m scaled parameters.
"""

from __future__ import annotations

import hashlib
import struct
from base64 import b64decode, b64encode
from dataclasses import dataclass, field

import numpy as np

from . import waveguide as wg

FORMAT_VERSION = 1
STD_FLOOR = 1e-8
BOWED_PARAM_NAMES = ("pressure", "position")


class DatasetFormatError(ValueError):
    """Raised on version mismatch, truncation, or digest mismatch."""


@dataclass
class NormStats:
    mean: np.ndarray          # per-element mean, length L
    std: np.ndarray           # per-element std (floored), length L
    param_lo: np.ndarray      # raw lower bound per parameter
    param_hi: np.ndarray      # raw upper bound per parameter


@dataclass
class CycleDataset:
    data: np.ndarray          # (count, L) normalized differential cycles
    params: np.ndarray        # (count, m) scaled parameters in [-1, 1]
    stats: NormStats
    meta: dict = field(default_factory=dict)
    reference: np.ndarray | None = None   # raw aligned reference cycle, L+1

    @property
    def count(self):
        return self.data.shape[0]

    @property
    def cycle_len(self):
        return self.data.shape[1]

    @property
    def n_params(self):
        return self.params.shape[1]


def differentiate(cycle: np.ndarray) -> np.ndarray:
    """First-order difference, length n-1."""
    cycle = np.asarray(cycle)
    if cycle.shape[-1] < 2:
        raise ValueError("need at least 2 samples to differentiate")
    return np.diff(cycle, axis=-1)


def circular_shift_to(cycle: np.ndarray, reference: np.ndarray) -> int:
    """Shift (in samples) maximizing circular cross-correlation."""
    if len(cycle) != len(reference):
        raise ValueError("cycle and reference lengths differ")
    corr = np.fft.irfft(
        np.fft.rfft(reference) * np.conj(np.fft.rfft(cycle)), n=len(cycle)
    )
    return int(np.argmax(corr))

def phase_align(raw_cycles, reference: np.ndarray):
    """Circularly rotate each cycle to best match the reference."""
    aligned = []
    for cycle in raw_cycles:
        shift = circular_shift_to(np.asarray(cycle), reference)
        aligned.append(np.roll(cycle, shift))
    return aligned


def pick_reference(raw_cycles) -> int:
    """Index of the median-RMS cycle (deterministic tie-break: lowest index)."""
    rms = np.sqrt(np.mean(np.square(np.asarray(raw_cycles)), axis=1))
    order = np.argsort(rms, kind="stable")
    median_rms = rms[order[len(order) // 2]]
    return int(np.flatnonzero(rms == median_rms)[0])


def scale_params(raw, lo=0.0, hi=128.0):
    """Linear map of [lo, hi] onto [-1, 1]."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < lo) or np.any(raw > hi):
        raise ValueError("parameter outside declared range")
    return 2.0 * (raw - lo) / (hi - lo) - 1.0


def unscale_params(scaled, lo=0.0, hi=128.0):
    scaled = np.asarray(scaled, dtype=float)
    return (scaled + 1.0) * (hi - lo) / 2.0 + lo


def compute_norm_stats(diff_cycles: np.ndarray, param_lo, param_hi) -> NormStats:
    if len(diff_cycles) == 0:
        raise ValueError("empty record list")
    mean = np.mean(diff_cycles, axis=0)
    std = np.std(diff_cycles, axis=0)
    std = np.maximum(std, STD_FLOOR)
    return NormStats(mean, std, np.asarray(param_lo, float),
                     np.asarray(param_hi, float))


def normalize(diff_cycles: np.ndarray, stats: NormStats) -> np.ndarray:
    return (diff_cycles - stats.mean) / stats.std


def denormalize(norm_cycles: np.ndarray, stats: NormStats) -> np.ndarray:
    return norm_cycles * stats.std + stats.mean


def assemble(raw_cycles, raw_params, param_lo, param_hi, meta=None) -> CycleDataset:
    """Run the fixed pipeline over raw two-period windows and raw labels."""
    raw_cycles = [np.asarray(c, dtype=float) for c in raw_cycles]
    if not raw_cycles:
        raise ValueError("no cycles to assemble")
    ref_idx = pick_reference(raw_cycles)
    reference = raw_cycles[ref_idx]
    aligned = phase_align(raw_cycles, reference)
    diffs = np.stack([differentiate(c) for c in aligned])
    stats = compute_norm_stats(diffs, param_lo, param_hi)
    data = normalize(diffs, stats)
    params = np.stack(
        [scale_params(p, np.asarray(param_lo, float), np.asarray(param_hi, float))
         for p in raw_params]
    )
    return CycleDataset(
        data=data,
        params=params,
        stats=stats,
        meta=dict(meta or {}),
        reference=reference.copy(),
    )


def build_bowed1(grid_step=1, f0=wg.DEFAULT_F0, sample_rate=wg.SAMPLE_RATE) -> CycleDataset:
    """Steady-state grid capture over pressure x position, integers 0..128."""
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    cycles, labels = [], []
    for pressure in range(0, 129, grid_step):
        for position in range(0, 129, grid_step):
            params = wg.BowedParams(
                pressure=pressure, position=position,
                velocity=100.0, frequency=f0, volume=100.0)
            window = wg.capture_steady(params, f0=f0, sample_rate=sample_rate)
            if window is None:
                continue
            cycles.append(window)
            labels.append([pressure, position])
    if not cycles:
        raise ValueError("every grid cell was rejected")
    meta = {
        "source": "bowed1",
        "f0": f0,
        "sample_rate": sample_rate,
        "grid_step": grid_step,
        "seed": 0,
        "param_names": ",".join(BOWED_PARAM_NAMES),
    }
    return assemble(cycles, labels, [0.0, 0.0], [128.0, 128.0], meta)


def build_bowed2(n_records, seed=0, f0=wg.DEFAULT_F0,
                 hold_range=(0.05, 0.5), sample_rate=wg.SAMPLE_RATE) -> CycleDataset:
    """Dynamic capture: random parameter changes at random hold intervals."""
    pairs = wg.capture_dynamic(
        n_records, seed=seed, f0=f0, hold_range=hold_range,
        sample_rate=sample_rate)
    cycles = [c for c, _ in pairs]
    labels = [[p.pressure, p.position] for _, p in pairs]
    meta = {
        "source": "bowed2",
        "f0": f0,
        "sample_rate": sample_rate,
        "seed": seed,
        "hold_range": f"{hold_range[0]},{hold_range[1]}",
        "param_names": ",".join(BOWED_PARAM_NAMES),
    }
    return assemble(cycles, labels, [0.0, 0.0], [128.0, 128.0], meta)


def filter_half(ds: CycleDataset, param_index=1, raw_threshold=64.0) -> CycleDataset:
    """Keep records whose raw parameter is below the threshold; recompute
    stats over the survivors."""
    lo = ds.stats.param_lo[param_index]
    hi = ds.stats.param_hi[param_index]
    raw = unscale_params(ds.params[:, param_index], lo, hi)
    keep = raw < raw_threshold
    if not np.any(keep):
        raise ValueError("no records below threshold")
    # de-normalize back to differential space, then re-run stats
    diffs = denormalize(ds.data[keep], ds.stats)
    stats = compute_norm_stats(diffs, ds.stats.param_lo, ds.stats.param_hi)
    meta = dict(ds.meta)
    meta["filtered"] = f"param{param_index}<{raw_threshold}"
    return CycleDataset(
        data=normalize(diffs, stats),
        params=ds.params[keep].copy(),
        stats=stats,
        meta=meta,
        reference=None if ds.reference is None else ds.reference.copy(),
    )


def import_periodic_recording(audio, sample_rate, f0, label,
                              label_lo=0.0, label_hi=4.0):
    """Extract consecutive two-period windows from a periodic recording.

    Windows are peak-aligned (rotated so the maximum lands at a common
    offset) and differentiated.  Returns (diff_cycles, labels) ready for
    assemble(); the single label is attached to every cycle.
    """
    audio = np.asarray(audio, dtype=float)
    period = sample_rate / f0
    if period < 8 or period > len(audio) / 4:
        raise ValueError(f"implausible f0={f0} for {len(audio)} samples")
    window_len = int(round(2.0 * sample_rate / f0))
    n_windows = len(audio) // window_len
    cycles = []
    for i in range(n_windows):
        w = audio[i * window_len:(i + 1) * window_len].copy()
        peak = int(np.argmax(w))
        cycles.append(np.roll(w, -peak))
    labels = [[label]] * len(cycles)
    return cycles, labels


def build_imported(takes, sample_rate, f0, label_lo=0.0, label_hi=4.0,
                   source="imported") -> CycleDataset:
    """Assemble a dataset from (audio, label) takes of periodic material."""
    all_cycles, all_labels = [], []
    for audio, label in takes:
        cycles, labels = import_periodic_recording(
            audio, sample_rate, f0, label, label_lo, label_hi)
        all_cycles.extend(cycles)
        all_labels.extend(labels)
    meta = {
        "source": source,
        "f0": f0,
        "sample_rate": sample_rate,
        "seed": 0,
        "param_names": "label",
    }
    return assemble(all_cycles, all_labels, [label_lo], [label_hi], meta)


# ---------------------------------------------------------------------------
# persistence

def _manifest_lines(ds: CycleDataset, payload_digest: str):
    meta = ds.meta
    lines = [
        f"version: {FORMAT_VERSION}",
        f"source: {meta.get('source', 'unknown')}",
        f"L: {ds.cycle_len}",
        f"m: {ds.n_params}",
        f"count: {ds.count}",
        f"f0: {meta.get('f0', 0.0)}",
        f"sample_rate: {meta.get('sample_rate', 0.0)}",
        f"seed: {meta.get('seed', 0)}",
        f"sha256: {payload_digest}",
    ]
    for key in sorted(meta):
        if key in ("source", "f0", "sample_rate", "seed"):
            continue
        lines.append(f"meta.{key}: {meta[key]}")
    if ds.reference is not None:
        ref = np.asarray(ds.reference, dtype="<f4").tobytes()
        lines.append(f"reference: {b64encode(ref).decode('ascii')}")
    return lines


def _payload(ds: CycleDataset) -> bytes:
    L, m = ds.cycle_len, ds.n_params
    rows = np.empty((ds.count + 2, L + m), dtype="<f4")
    rows[0, :L] = ds.stats.mean
    rows[0, L:] = ds.stats.param_lo
    rows[1, :L] = ds.stats.std
    rows[1, L:] = ds.stats.param_hi
    rows[2:, :L] = ds.data
    rows[2:, L:] = ds.params
    return rows.tobytes()


def save(ds: CycleDataset, path):
    payload = _payload(ds)
    digest = hashlib.sha256(payload).hexdigest()
    text = "\n".join(_manifest_lines(ds, digest)) + "\n\n"
    with open(path, "wb") as f:
        f.write(text.encode("utf-8"))
        f.write(payload)


def _parse_manifest(blob: bytes):
    end = blob.find(b"\n\n")
    if end < 0:
        raise DatasetFormatError("missing manifest terminator")
    fields = {}
    for line in blob[:end].decode("utf-8").splitlines():
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    return fields, blob[end + 2:]


def load(path) -> CycleDataset:
    with open(path, "rb") as f:
        blob = f.read()
    fields, payload = _parse_manifest(blob)
    version = int(fields.get("version", -1))
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    L = int(fields["L"])
    m = int(fields["m"])
    count = int(fields["count"])
    expected = (count + 2) * (L + m) * 4
    if len(payload) != expected:
        raise DatasetFormatError(
            f"payload is {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != fields["sha256"]:
        raise DatasetFormatError("payload digest mismatch")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count + 2, L + m)
    rows = rows.astype(np.float64)
    stats = NormStats(
        mean=rows[0, :L].copy(), std=rows[1, :L].copy(),
        param_lo=rows[0, L:].copy(), param_hi=rows[1, L:].copy())
    meta = {
        "source": fields.get("source", "unknown"),
        "f0": float(fields.get("f0", 0.0)),
        "sample_rate": float(fields.get("sample_rate", 0.0)),
        "seed": int(float(fields.get("seed", 0))),
    }
    for key, value in fields.items():
        if key.startswith("meta."):
            meta[key[5:]] = value
    reference = None
    if "reference" in fields:
        reference = np.frombuffer(
            b64decode(fields["reference"]), dtype="<f4").astype(np.float64)
    return CycleDataset(
        data=rows[2:, :L].copy(), params=rows[2:, L:].copy(),
        stats=stats, meta=meta, reference=reference)


# ---------------------------------------------------------------------------
# audio file I/O

def write_raw_f32(signal, path):
    """Headerless little-endian float32 mono dump."""
    np.asarray(signal, dtype="<f4").tofile(path)


def write_wav(signal, path, sample_rate=48000):
    """RIFF/WAVE, 32-bit float mono."""
    data = np.asarray(signal, dtype="<f4").tobytes()
    sr = int(sample_rate)
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVEfmt ")
        f.write(struct.pack("<IHHIIHH", 16, 3, 1, sr, sr * 4, 4, 32))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)


def read_wav(path):
    """Minimal WAV reader: 16-bit PCM or 32-bit float, mono.

    Returns (signal, sample_rate) with signal as float64 in roughly [-1, 1].
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise DatasetFormatError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        size = struct.unpack("<I", blob[pos + 4:pos + 8])[0]
        body = blob[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise DatasetFormatError("missing fmt or data chunk")
    audio_format, channels, sample_rate = fmt[0], fmt[1], fmt[2]
    bits = fmt[5]
    if channels != 1:
        raise DatasetFormatError("only mono WAV supported")
    if audio_format == 1 and bits == 16:
        signal = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        signal = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise DatasetFormatError(
            f"unsupported WAV encoding (format={audio_format}, bits={bits})")
    return signal, sample_rate
