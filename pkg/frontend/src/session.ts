/**
 * Connection to the control endpoint: opens the socket, subscribes to
 * frames, reflects server state, and reconnects with backoff when the
 * connection drops.  Malformed frames are counted and dropped, never
 * thrown at the render loop.
 */

import {
    ControlMessage, Frame, ServerMessage, Source,
    decodeFrame, parseServerMessage, serializeControl,
} from './protocol.js';

/** The subset of the WebSocket API the session uses (injectable for tests). */
export interface SocketLike {
    binaryType: string;
    onopen: ((ev?: unknown) => void) | null;
    onmessage: ((ev: { data: unknown }) => void) | null;
    onclose: ((ev?: unknown) => void) | null;
    onerror: ((ev?: unknown) => void) | null;
    send(data: string): void;
    close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface SessionEvents {
    onFrame?: (frame: Frame) => void;
    onState?: (source: Source, params: Record<string, number>) => void;
    onConnected?: () => void;
    onDisconnected?: () => void;
    onServerError?: (message: string) => void;
}

const BACKOFF_INITIAL_MS = 250;
const BACKOFF_MAX_MS = 8000;

export class Session {
    readonly url: string;
    connected = false;
    /** malformed frames / messages seen and dropped */
    errorCount = 0;

    private events: SessionEvents;
    private factory: SocketFactory;
    private socket: SocketLike | null = null;
    private backoffMs = BACKOFF_INITIAL_MS;
    private closedByUser = false;
    private retryTimer: ReturnType<typeof setTimeout> | null = null;

    constructor(url: string, events: SessionEvents = {},
                factory?: SocketFactory) {
        this.url = url;
        this.events = events;
        this.factory = factory ??
            ((u: string) => new WebSocket(u) as unknown as SocketLike);
    }

    connect(): void {
        this.closedByUser = false;
        const ws = this.factory(this.url);
        this.socket = ws;
        ws.binaryType = 'arraybuffer';
        ws.onopen = () => {
            this.connected = true;
            this.backoffMs = BACKOFF_INITIAL_MS;
            this.sendMessage({ kind: 'subscribe_frames' });
            this.sendMessage({ kind: 'get_state' });
            this.events.onConnected?.();
        };
        ws.onmessage = (ev) => this.handleMessage(ev.data);
        ws.onclose = () => this.handleClose();
        ws.onerror = () => { /* close always follows */ };
    }

    private handleMessage(data: unknown): void {
        try {
            if (data instanceof ArrayBuffer) {
                this.events.onFrame?.(decodeFrame(data));
            } else if (typeof data === 'string') {
                this.handleServerMessage(parseServerMessage(data));
            }
        } catch {
            this.errorCount += 1;   // dropped, never crashes the UI
        }
    }

    private handleServerMessage(msg: ServerMessage): void {
        if (msg.kind === 'state') {
            this.events.onState?.(msg.source, msg.params);
        } else if (msg.kind === 'error') {
            this.events.onServerError?.(msg.message);
        }
    }

    private handleClose(): void {
        const wasConnected = this.connected;
        this.connected = false;
        this.socket = null;
        if (wasConnected) this.events.onDisconnected?.();
        if (this.closedByUser) return;
        this.retryTimer = setTimeout(() => this.connect(), this.backoffMs);
        this.backoffMs = Math.min(this.backoffMs * 2, BACKOFF_MAX_MS);
    }

    sendMessage(msg: ControlMessage): void {
        if (this.socket && this.connected) {
            this.socket.send(serializeControl(msg));
        }
    }

    setParam(name: string, value: number): void {
        this.sendMessage({ kind: 'set_param', name, value });
    }

    selectSource(source: Source): void {
        this.sendMessage({ kind: 'select_source', source });
    }

    close(): void {
        this.closedByUser = true;
        if (this.retryTimer !== null) clearTimeout(this.retryTimer);
        this.retryTimer = null;
        this.socket?.close();
    }
}
