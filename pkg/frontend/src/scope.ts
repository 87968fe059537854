/**
 * View-model for the waveform/spectrum displays.  Holds only the most
 * recent frame (stale frames are discarded, never queued) and converts
 * the raw magnitude spectrum to a log scale for display.
 */

import { Frame, Source } from './protocol.js';

/** Minimal 2D drawing surface (subset of CanvasRenderingContext2D). */
export interface DrawingContext {
    clearRect(x: number, y: number, w: number, h: number): void;
    beginPath(): void;
    moveTo(x: number, y: number): void;
    lineTo(x: number, y: number): void;
    stroke(): void;
}

const LOG_FLOOR_DB = -80;

export function toLogMagnitude(spectrum: Float32Array): Float32Array {
    const peak = spectrum.reduce((m, v) => Math.max(m, v), 1e-12);
    const out = new Float32Array(spectrum.length);
    for (let i = 0; i < spectrum.length; i++) {
        const db = 20 * Math.log10(Math.max(spectrum[i], 1e-12) / peak);
        // normalized 0..1 with the floor at LOG_FLOOR_DB
        out[i] = Math.max(0, 1 + db / -LOG_FLOOR_DB);
    }
    return out;
}

export class ScopeView {
    latest: Frame | null = null;
    /** frames that arrived and were replaced before a render happened */
    dropped = 0;
    private renderedTimestamp = -1;

    push(frame: Frame): void {
        if (this.latest !== null &&
            this.latest.timestamp !== this.renderedTimestamp) {
            this.dropped += 1;
        }
        this.latest = frame;
    }

    get source(): Source | null {
        return this.latest?.source ?? null;
    }

    /** Returns the frame to draw, or null when nothing new arrived. */
    takeForRender(): Frame | null {
        if (this.latest === null ||
            this.latest.timestamp === this.renderedTimestamp) {
            return null;
        }
        this.renderedTimestamp = this.latest.timestamp;
        return this.latest;
    }

    drawWaveform(ctx: DrawingContext, width: number, height: number,
                 frame: Frame): void {
        const wave = frame.waveform;
        let peak = 1e-9;
        for (const v of wave) peak = Math.max(peak, Math.abs(v));
        ctx.clearRect(0, 0, width, height);
        ctx.beginPath();
        for (let i = 0; i < wave.length; i++) {
            const x = (i / (wave.length - 1)) * width;
            const y = height / 2 - (wave[i] / peak) * (height / 2 - 2);
            if (i === 0) ctx.moveTo(x, y);
            else ctx.lineTo(x, y);
        }
        ctx.stroke();
    }

    drawSpectrum(ctx: DrawingContext, width: number, height: number,
                 frame: Frame): void {
        const mags = toLogMagnitude(frame.spectrum);
        ctx.clearRect(0, 0, width, height);
        ctx.beginPath();
        for (let i = 0; i < mags.length; i++) {
            const x = (i / (mags.length - 1)) * width;
            const y = height - mags[i] * (height - 2);
            if (i === 0) ctx.moveTo(x, y);
            else ctx.lineTo(x, y);
        }
        ctx.stroke();
    }
}
