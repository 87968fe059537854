/**
 * Wires the control surface: conditional-parameter knobs on the left,
 * latent knobs on the right, the A/B source toggle in the center, and
 * waveform/spectrum scopes underneath.
 */

import { KnobBinding } from './knob.js';
import { Source } from './protocol.js';
import { ScopeView } from './scope.js';
import { Session } from './session.js';

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K, className?: string, text?: string): HTMLElementTagNameMap[K] {
    const node = document.createElement(tag);
    if (className) node.className = className;
    if (text !== undefined) node.textContent = text;
    return node;
}

function buildKnob(binding: KnobBinding, parent: HTMLElement): void {
    const wrap = el('div', 'knob');
    const label = el('label', 'knob-label', binding.name);
    const slider = el('input') as HTMLInputElement;
    slider.type = 'range';
    slider.min = String(binding.range.lo);
    slider.max = String(binding.range.hi);
    slider.step = binding.range.hi - binding.range.lo > 4 ? '1' : '0.01';
    slider.value = String(binding.value);
    const readout = el('span', 'knob-value', String(binding.value));
    slider.addEventListener('input', () => {
        binding.change(Number(slider.value));
        readout.textContent = String(binding.value);
    });
    // let the session reflect server values back into the widget
    const origReflect = binding.reflect.bind(binding);
    binding.reflect = (v: number) => {
        origReflect(v);
        slider.value = String(binding.value);
        readout.textContent = binding.value.toFixed(2);
    };
    wrap.append(label, slider, readout);
    parent.append(wrap);
}

export function start(root: HTMLElement, url: string): Session {
    const status = el('div', 'status', 'connecting…');
    const leftPanel = el('div', 'panel panel-left');
    leftPanel.append(el('h2', undefined, 'conditional'));
    const centerPanel = el('div', 'panel panel-center');
    const rightPanel = el('div', 'panel panel-right');
    rightPanel.append(el('h2', undefined, 'latent'));

    const sourceLabel = el('div', 'source-label', 'source: ?');
    const toggle = el('button', 'ab-toggle', 'A/B toggle');
    centerPanel.append(el('h2', undefined, 'source'), sourceLabel, toggle);

    const scopes = el('div', 'scopes');
    const waveCanvas = el('canvas', 'scope-wave') as HTMLCanvasElement;
    const specCanvas = el('canvas', 'scope-spec') as HTMLCanvasElement;
    waveCanvas.width = specCanvas.width = 480;
    waveCanvas.height = specCanvas.height = 160;
    scopes.append(waveCanvas, specCanvas);

    root.append(status, leftPanel, centerPanel, rightPanel, scopes);

    const knobs = new Map<string, KnobBinding>();
    const scope = new ScopeView();
    let currentSource: Source = 'neural';

    const session = new Session(url, {
        onConnected: () => { status.textContent = 'connected'; },
        onDisconnected: () => { status.textContent = 'disconnected — retrying…'; },
        onServerError: (m) => { status.textContent = `server error: ${m}`; },
        onFrame: (frame) => scope.push(frame),
        onState: (source, params) => {
            currentSource = source;
            for (const [name, value] of Object.entries(params)) {
                if (!knobs.has(name)) {
                    const latent = name.startsWith('z');
                    const binding = new KnobBinding(
                        name,
                        latent ? { lo: -1, hi: 1 } : { lo: 0, hi: 128 },
                        (n, v) => session.setParam(n, v));
                    knobs.set(name, binding);
                    buildKnob(binding, latent ? rightPanel : leftPanel);
                }
                knobs.get(name)!.reflect(value);
            }
        },
    });

    toggle.addEventListener('click', () => {
        currentSource = currentSource === 'neural' ? 'waveguide' : 'neural';
        session.selectSource(currentSource);
    });

    function render(): void {
        const frame = scope.takeForRender();
        if (frame !== null) {
            sourceLabel.textContent = `source: ${frame.source}`;
            const wctx = waveCanvas.getContext('2d');
            const sctx = specCanvas.getContext('2d');
            if (wctx && sctx) {
                wctx.strokeStyle = '#3fa7d6';
                sctx.strokeStyle = '#d68f3f';
                scope.drawWaveform(wctx, waveCanvas.width,
                                   waveCanvas.height, frame);
                scope.drawSpectrum(sctx, specCanvas.width,
                                   specCanvas.height, frame);
            }
        }
        requestAnimationFrame(render);
    }

    session.connect();
    requestAnimationFrame(render);
    return session;
}

declare global {
    interface Window { synthcloneStart: typeof start; }
}

if (typeof window !== 'undefined') {
    window.synthcloneStart = start;
}
