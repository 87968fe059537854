/**
 * One parameter knob: clamps to its declared range and throttles
 * outgoing set_param messages to at most one per interval.  The latest
 * value always wins — a trailing send fires when the interval expires.
 */

export interface KnobRange {
    lo: number;
    hi: number;
}

export type SendFn = (name: string, value: number) => void;

export class KnobBinding {
    readonly name: string;
    readonly range: KnobRange;
    readonly throttleMs: number;

    /** optimistic local value, shown immediately while sends are throttled */
    value: number;

    private send: SendFn;
    private lastSentAt = -Infinity;
    private pending: number | null = null;
    private timer: ReturnType<typeof setTimeout> | null = null;
    private now: () => number;

    constructor(name: string, range: KnobRange, send: SendFn,
                throttleMs = 30, now: () => number = () => Date.now()) {
        this.name = name;
        this.range = range;
        this.send = send;
        this.throttleMs = throttleMs;
        this.now = now;
        this.value = range.lo < 0 ? 0 : (range.lo + range.hi) / 2;
    }

    clamp(value: number): number {
        return Math.min(this.range.hi, Math.max(this.range.lo, value));
    }

    /** Called on every drag event; sends immediately or queues a trailing send. */
    change(value: number): void {
        this.value = this.clamp(value);
        const elapsed = this.now() - this.lastSentAt;
        if (elapsed >= this.throttleMs) {
            this.flush();
        } else if (this.timer === null) {
            this.pending = this.value;
            this.timer = setTimeout(() => {
                this.timer = null;
                if (this.pending !== null) this.flush();
            }, this.throttleMs - elapsed);
        } else {
            this.pending = this.value;
        }
    }

    /** Server-reported value: update the display without echoing it back. */
    reflect(value: number): void {
        this.value = this.clamp(value);
        this.pending = null;
    }

    private flush(): void {
        this.lastSentAt = this.now();
        this.pending = null;
        this.send(this.name, this.value);
    }

    dispose(): void {
        if (this.timer !== null) clearTimeout(this.timer);
        this.timer = null;
    }
}
