"""Decoder-driven wavetable synthesis by 50% overlap-add.

The decoder emits one two-period differential cycle (length L) per window;
windows are weighted by a periodic Hann window and summed at hop L/2.  The
summed differential stream is passed through a leaky first-order
integrator to recover the waveform while bounding DC drift.

Parameters (z, y) are latched at window boundaries.  A wait-free
single-producer mailbox lets a control thread publish new parameter
snapshots; the render path never blocks or allocates per sample.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from . import dataset as dsmod
from . import neural as nn

LEAK = 0.995


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann; shifted copies at hop n/2 sum to exactly 1."""
    if n % 2:
        raise ValueError("window length must be even")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


class ParamMailbox:
    """Latest-value slot for (z, y) snapshots.

    The producer replaces one reference; the consumer reads it at window
    boundaries.  Reference assignment is atomic, so neither side waits.
    """

    def __init__(self, z, y):
        self._slot = (np.array(z, dtype=np.float64),
                      np.array(y, dtype=np.float64))

    def publish(self, z, y):
        self._slot = (np.array(z, dtype=np.float64),
                      np.array(y, dtype=np.float64))

    def read(self):
        return self._slot


class SynthState:
    """Render state for one overlap-add stream."""

    def __init__(self, decoder: nn.Mlp, stats: dsmod.NormStats,
                 n_latent: int, leak=LEAK):
        length = decoder.out_dim
        if length % 2:
            raise ValueError("decoder cycle length must be even")
        self.decoder = decoder
        self.stats = stats
        self.n_latent = int(n_latent)
        self.n_cond = decoder.in_dim - self.n_latent
        self.cycle_len = length
        self.hop = length // 2
        self.window = hann_window(length)
        self.leak = float(leak)
        self.mailbox = ParamMailbox(np.zeros(self.n_latent),
                                    np.zeros(self.n_cond))
        # second half of the previous window, already weighted
        self.tail = np.zeros(self.hop)
        # samples of the current hop segment not yet emitted
        self.segment = np.zeros(0)
        self.segment_pos = 0
        self.integrator = 0.0
        self.current_z = np.zeros(self.n_latent)
        self.current_y = np.zeros(self.n_cond)

    def set_params(self, z=None, y=None):
        """Publish new parameters; adopted at the next window boundary."""
        cz, cy = self.mailbox.read()
        self.mailbox.publish(cz if z is None else z, cy if y is None else y)


def decode_cycle(state: SynthState, z=None, y=None) -> np.ndarray:
    """One denormalized differential cycle for the given (z, y)."""
    if z is None:
        z = state.current_z
    if y is None:
        y = state.current_y
    code = np.concatenate([np.asarray(z, float), np.asarray(y, float)])
    if code.shape[0] != state.decoder.in_dim:
        raise ValueError("code dimension does not match decoder input")
    out, _ = nn.forward(state.decoder,
                        code[None, :].astype(state.decoder.w_in.dtype))
    return dsmod.denormalize(out[0].astype(np.float64), state.stats)


def _next_segment(state: SynthState):
    """Latch parameters and produce the next hop of overlap-added samples."""
    z, y = state.mailbox.read()
    state.current_z = z
    state.current_y = y
    frame = decode_cycle(state) * state.window
    segment = frame[: state.hop] + state.tail
    state.tail = frame[state.hop:]
    state.segment = segment
    state.segment_pos = 0


def render_block(state: SynthState, block_len: int) -> np.ndarray:
    """Render block_len samples; bit-identical to any other block split."""
    out = np.empty(block_len)
    produced = 0
    while produced < block_len:
        if state.segment_pos >= len(state.segment):
            _next_segment(state)
        take = min(block_len - produced,
                   len(state.segment) - state.segment_pos)
        chunk = state.segment[state.segment_pos:state.segment_pos + take]
        zi = np.array([state.leak * state.integrator])
        y, zf = lfilter([1.0], [1.0, -state.leak], chunk, zi=zi)
        out[produced:produced + take] = y
        state.integrator = y[-1] if take else state.integrator
        state.segment_pos += take
        produced += take
    return out


def ola_render(state: SynthState, param_stream, n_samples: int) -> np.ndarray:
    """Offline render: one (z, y) entry per hop, held constant per window."""
    out = np.empty(n_samples)
    produced = 0
    hop_index = 0
    while produced < n_samples:
        if param_stream:
            z, y = param_stream[min(hop_index, len(param_stream) - 1)]
            state.mailbox.publish(z, y)
        take = min(state.hop, n_samples - produced)
        out[produced:produced + take] = render_block(state, take)
        produced += take
        hop_index += 1
    return out


def make_synth_from_checkpoint(path) -> SynthState:
    """Build a render state from a (decoder-only or full) checkpoint."""
    nets, stats, meta, _ = nn.load_checkpoint(path)
    if "decoder" not in nets:
        raise ValueError("checkpoint has no decoder")
    n_latent = int(meta.get("n_latent", 0))
    return SynthState(nets["decoder"], stats, n_latent)
