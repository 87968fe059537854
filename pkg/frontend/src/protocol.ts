/**
 * Wire protocol for the synthesizer control endpoint.
 *
 * Control and state messages are JSON text objects with a `kind` field.
 * Frames are binary (little-endian): f64 timestamp, u32 source flag
 * (0 = neural, 1 = waveguide), u32 parameter count, parameters as f32,
 * then one waveform cycle and its magnitude spectrum as f32.  The
 * spectrum has length waveform.length / 2 + 1, which fixes how the
 * remaining floats are split.
 */

export type Source = 'neural' | 'waveguide';

export type ControlMessage =
    | { kind: 'set_param'; name: string; value: number; space?: 'raw' | 'scaled' }
    | { kind: 'select_source'; source: Source }
    | { kind: 'get_state' }
    | { kind: 'subscribe_frames' };

export type ServerMessage =
    | { kind: 'ack'; [key: string]: unknown }
    | { kind: 'state'; source: Source; params: Record<string, number> }
    | { kind: 'error'; message: string };

export interface Frame {
    timestamp: number;
    source: Source;
    params: Float32Array;
    waveform: Float32Array;
    spectrum: Float32Array;
}

const HEADER_BYTES = 16;

export function serializeControl(msg: ControlMessage): string {
    return JSON.stringify(msg);
}

export function parseServerMessage(text: string): ServerMessage {
    const msg = JSON.parse(text);
    if (typeof msg !== 'object' || msg === null || typeof msg.kind !== 'string') {
        throw new Error('server message has no kind field');
    }
    return msg as ServerMessage;
}

export function decodeFrame(buffer: ArrayBuffer): Frame {
    if (buffer.byteLength < HEADER_BYTES) {
        throw new Error('frame too short');
    }
    const view = new DataView(buffer);
    const timestamp = view.getFloat64(0, true);
    const sourceFlag = view.getUint32(8, true);
    const paramCount = view.getUint32(12, true);
    if ((buffer.byteLength - HEADER_BYTES) % 4 !== 0) {
        throw new Error('frame payload is not whole f32 values');
    }
    const floats = new Float32Array(buffer, HEADER_BYTES);
    if (floats.length < paramCount) {
        throw new Error('truncated parameter block');
    }
    const tail = floats.length - paramCount;
    // waveform length L plus spectrum length L/2+1 fill the tail
    const waveformLength = Math.floor(((tail - 1) * 2) / 3);
    if (waveformLength <= 0 ||
        waveformLength + Math.floor(waveformLength / 2) + 1 !== tail) {
        throw new Error('inconsistent frame payload size');
    }
    return {
        timestamp,
        source: sourceFlag === 1 ? 'waveguide' : 'neural',
        params: floats.slice(0, paramCount),
        waveform: floats.slice(paramCount, paramCount + waveformLength),
        spectrum: floats.slice(paramCount + waveformLength),
    };
}
