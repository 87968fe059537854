"""Command-line entry points and the live control/streaming endpoint.

Wire protocol (WebSocket):
  * control and state messages are UTF-8 JSON objects with a "kind" field
    (set_param, select_source, get_state, subscribe_frames; replies ack,
    state, error);
  * frames are binary: f64 LE timestamp, u32 LE source flag (0 neural,
    1 waveguide), u32 LE parameter count, parameters as f32 LE
    (conditional raw values first, then latent), then the waveform cycle
    and its magnitude spectrum as f32 LE (spectrum length is
    cycle_len/2 + 1, which fixes the split of the remaining bytes).

One engine thread owns the synthesis state and adopts parameter snapshots
from a wait-free mailbox at window boundaries; the network side only ever
reads engine snapshots, so a stalled subscriber can never stall audio.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import struct
import sys
import threading
import time

import numpy as np

from . import dataset as dsmod
from . import experiments as ex
from . import neural as nn
from . import synth as symod
from . import waveguide as wg

FRAME_RATE = 20.0
SOURCES = ("neural", "waveguide")


class ProtocolError(ValueError):
    pass


def parse_control(text: str) -> dict:
    try:
        msg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"not valid JSON: {exc}") from exc
    if not isinstance(msg, dict) or "kind" not in msg:
        raise ProtocolError("message must be an object with a 'kind' field")
    kind = msg["kind"]
    if kind == "set_param":
        if "name" not in msg or "value" not in msg:
            raise ProtocolError("set_param needs 'name' and 'value'")
        try:
            float(msg["value"])
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"value must be numeric: {exc}") from exc
    elif kind == "select_source":
        if msg.get("source") not in SOURCES:
            raise ProtocolError(f"source must be one of {SOURCES}")
    elif kind not in ("get_state", "subscribe_frames"):
        raise ProtocolError(f"unknown kind {kind!r}")
    return msg


def serialize_control(msg: dict) -> str:
    return json.dumps(msg, sort_keys=True)


def encode_frame(timestamp, source_flag, params, waveform, spectrum) -> bytes:
    head = struct.pack("<dII", timestamp, source_flag, len(params))
    body = np.asarray(params, dtype="<f4").tobytes()
    body += np.asarray(waveform, dtype="<f4").tobytes()
    body += np.asarray(spectrum, dtype="<f4").tobytes()
    return head + body


def decode_frame(blob: bytes) -> dict:
    if len(blob) < 16:
        raise ProtocolError("frame too short")
    timestamp, source_flag, n_params = struct.unpack("<dII", blob[:16])
    if (len(blob) - 16) % 4:
        raise ProtocolError("payload is not a whole number of f32 values")
    rest = np.frombuffer(blob[16:], dtype="<f4")
    if len(rest) < n_params:
        raise ProtocolError("truncated parameter block")
    params = rest[:n_params].astype(float)
    tail = rest[n_params:]
    # waveform length L and spectrum length L/2+1 partition the tail
    L = (len(tail) - 1) * 2 // 3
    if L <= 0 or L + L // 2 + 1 != len(tail):
        raise ProtocolError("inconsistent frame payload size")
    return {
        "timestamp": timestamp,
        "source": SOURCES[source_flag] if source_flag < 2 else "unknown",
        "params": params,
        "waveform": tail[:L].astype(float),
        "spectrum": tail[L:].astype(float),
    }


class SynthEngine:
    """Render thread: neural overlap-add or a live waveguide, A/B switchable.

    Control threads call set_param/select_source; the engine adopts the
    latest values at window boundaries.  snapshot() is safe from any
    thread.
    """

    def __init__(self, state: symod.SynthState, f0=wg.DEFAULT_F0,
                 sample_rate=wg.SAMPLE_RATE, realtime=True):
        self.state = state
        self.sample_rate = float(sample_rate)
        self.f0 = float(f0)
        self.cycle_len = state.cycle_len
        self.hop = state.hop
        self.realtime = realtime
        self.param_names = self._make_param_names()
        self._raw = {name: 0.0 for name in self.param_names}
        for name in ("pressure", "position"):
            if name in self._raw:
                self._raw[name] = 64.0
        self.source = "neural"
        self._wgstate = wg.WaveguideState(f0, sample_rate)
        self._wg_ring = np.zeros(self.cycle_len)
        self._snapshot = None
        self._stop = threading.Event()
        self._thread = None
        self._publish_params()
        self._update_snapshot(np.zeros(self.cycle_len))

    def _make_param_names(self):
        cond = self.state.n_cond
        names = list(dsmod.BOWED_PARAM_NAMES[:cond])
        while len(names) < cond:
            names.append(f"y{len(names)}")
        names += [f"z{i}" for i in range(self.state.n_latent)]
        return names

    def param_range(self, name):
        if name.startswith("z"):
            return -1.0, 1.0
        return 0.0, 128.0

    def set_param(self, name, value, space="raw"):
        if name not in self._raw:
            raise ProtocolError(f"unknown parameter {name!r}")
        value = float(value)
        idx = self.param_names.index(name)
        if idx >= self.state.n_cond:            # latent, always [-1, 1]
            value = float(np.clip(value, -1.0, 1.0))
        else:
            lo = float(self.state.stats.param_lo[idx])
            hi = float(self.state.stats.param_hi[idx])
            if space == "scaled":
                value = float(dsmod.unscale_params(
                    np.clip(value, -1.0, 1.0), lo, hi))
            value = float(np.clip(value, lo, hi))
        self._raw[name] = value
        self._publish_params()

    def select_source(self, source):
        if source not in SOURCES:
            raise ProtocolError(f"unknown source {source!r}")
        self.source = source

    def params_snapshot(self):
        return dict(self._raw)

    def _publish_params(self):
        cond = self.state.n_cond
        y_raw = [self._raw[n] for n in self.param_names[:cond]]
        z = [self._raw[n] for n in self.param_names[cond:]]
        lo, hi = self.state.stats.param_lo, self.state.stats.param_hi
        y = [float(dsmod.scale_params(v, lo[i], hi[i]))
             for i, v in enumerate(y_raw)]
        self.state.mailbox.publish(np.array(z), np.array(y))

    def _update_snapshot(self, cycle):
        waveform = np.asarray(cycle, dtype=float)[-self.cycle_len:]
        spectrum = np.abs(np.fft.rfft(waveform))
        self._snapshot = {
            "timestamp": time.time(),
            "source": self.source,
            "params": [self._raw[n] for n in self.param_names],
            "waveform": waveform,
            "spectrum": spectrum,
        }

    def snapshot(self):
        return self._snapshot

    def render_hop(self):
        """One window hop of audio from the active source."""
        if self.source == "neural":
            block = symod.render_block(self.state, self.hop)
            self._update_snapshot(np.cumsum(symod.decode_cycle(self.state)))
            return block
        params = wg.BowedParams(
            pressure=self._raw.get("pressure", 64.0),
            position=self._raw.get("position", 64.0),
            velocity=100.0, frequency=self.f0, volume=100.0)
        block = wg.advance(self._wgstate, params, self.hop)
        self._wg_ring = np.concatenate(
            [self._wg_ring, block])[-self.cycle_len:]
        self._update_snapshot(self._wg_ring)
        return block

    def _loop(self):
        sink = _open_audio_sink(self.sample_rate)
        hop_seconds = self.hop / self.sample_rate
        next_deadline = time.monotonic()
        while not self._stop.is_set():
            block = self.render_hop()
            if sink is not None:
                sink.write(np.asarray(block, dtype=np.float32))
            next_deadline += hop_seconds
            if self.realtime:
                delay = next_deadline - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_deadline = time.monotonic()

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)


def _open_audio_sink(sample_rate):
    """Host audio output if the optional sounddevice backend exists."""
    import os
    try:
        import sounddevice
    except Exception:
        return None
    try:
        device = os.environ.get("SYNTHCLONE_AUDIO_DEVICE")
        stream = sounddevice.OutputStream(
            samplerate=sample_rate, channels=1, dtype="float32",
            device=int(device) if device else None)
        stream.start()
        return stream
    except Exception:
        return None


class ControlServer:
    """WebSocket endpoint bridging clients to one SynthEngine."""

    def __init__(self, engine: SynthEngine, host="127.0.0.1", port=0):
        self.engine = engine
        self.host = host
        self.requested_port = port
        self.port = None
        self._loop = None
        self._thread = None
        self._started = threading.Event()
        self._stopping = None
        self._error = None
        self._subscribers = set()

    async def _handle(self, ws):
        subscribed = False
        queue = None
        drain = None
        try:
            async for raw in ws:
                if isinstance(raw, bytes):
                    await ws.send(serialize_control(
                        {"kind": "error", "message": "binary not accepted"}))
                    continue
                try:
                    msg = parse_control(raw)
                    kind = msg["kind"]
                    if kind == "set_param":
                        self.engine.set_param(
                            msg["name"], msg["value"],
                            msg.get("space", "raw"))
                        await ws.send(serialize_control(
                            {"kind": "ack", "name": msg["name"]}))
                    elif kind == "select_source":
                        self.engine.select_source(msg["source"])
                        await ws.send(serialize_control(
                            {"kind": "ack", "source": msg["source"]}))
                    elif kind == "get_state":
                        await ws.send(serialize_control({
                            "kind": "state",
                            "source": self.engine.source,
                            "params": self.engine.params_snapshot(),
                        }))
                    elif kind == "subscribe_frames":
                        if not subscribed:
                            queue = asyncio.Queue(maxsize=4)
                            self._subscribers.add(queue)
                            drain = asyncio.get_running_loop().create_task(
                                self._drain(ws, queue))
                            subscribed = True
                        await ws.send(serialize_control(
                            {"kind": "ack", "subscribed": True}))
                except ProtocolError as exc:
                    await ws.send(serialize_control(
                        {"kind": "error", "message": str(exc)}))
        except Exception:
            pass   # peer vanished mid-reply; nothing to report to
        finally:
            if drain is not None:
                drain.cancel()
            if queue is not None:
                self._subscribers.discard(queue)

    async def _drain(self, ws, queue):
        try:
            while True:
                frame = await queue.get()
                await ws.send(frame)
        except (Exception, asyncio.CancelledError):
            self._subscribers.discard(queue)

    async def _frame_task(self):
        period = 1.0 / FRAME_RATE
        while True:
            snap = self.engine.snapshot()
            if snap is not None and self._subscribers:
                frame = encode_frame(
                    snap["timestamp"],
                    SOURCES.index(snap["source"]),
                    snap["params"], snap["waveform"], snap["spectrum"])
                for queue in list(self._subscribers):
                    try:
                        queue.put_nowait(frame)
                    except asyncio.QueueFull:
                        pass   # stalled subscriber: drop, never block
            await asyncio.sleep(period)

    async def _main(self):
        import websockets.asyncio.server as wserver

        self._stopping = asyncio.Event()
        async with wserver.serve(self._handle, self.host,
                                 self.requested_port) as server:
            self.port = server.sockets[0].getsockname()[1]
            task = asyncio.get_running_loop().create_task(self._frame_task())
            self._started.set()
            await self._stopping.wait()
            task.cancel()

    def start(self):
        """Run the endpoint on a background thread; returns when listening."""
        def runner():
            self._loop = asyncio.new_event_loop()
            asyncio.set_event_loop(self._loop)
            try:
                self._loop.run_until_complete(self._main())
            except Exception as exc:
                self._error = exc
            finally:
                self._started.set()
                self._loop.close()

        self._thread = threading.Thread(target=runner, daemon=True)
        self._thread.start()
        if not self._started.wait(timeout=10.0):
            raise RuntimeError("endpoint failed to start")
        if self._error is not None:
            raise self._error

    def stop(self):
        if self._loop is not None and self._stopping is not None:
            self._loop.call_soon_threadsafe(self._stopping.set)
        if self._thread is not None:
            self._thread.join(timeout=5.0)


def serve(checkpoint_path, port=8765, host="127.0.0.1", realtime=True):
    """Blocking entry point: engine + endpoint until interrupted."""
    state = symod.make_synth_from_checkpoint(checkpoint_path)
    engine = SynthEngine(state, realtime=realtime)
    engine.start()
    server = ControlServer(engine, host=host, port=port)
    server.start()
    print(f"listening on ws://{host}:{server.port}")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        engine.stop()


# ---------------------------------------------------------------------------
# parameter scripts for offline rendering

def parse_param_script(text):
    """Lines of '<seconds> name=value ...'; returns [(seconds, {name: value})]."""
    steps = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            seconds = float(parts[0])
            updates = {}
            for tok in parts[1:]:
                name, _, value = tok.partition("=")
                updates[name] = float(value)
        except ValueError as exc:
            raise ValueError(f"bad script line {lineno}: {line!r}") from exc
        steps.append((seconds, updates))
    return steps


def render_script(state: symod.SynthState, steps,
                  sample_rate=wg.SAMPLE_RATE):
    """Offline render of a parameter script to one signal."""
    engine = SynthEngine(state, sample_rate=sample_rate, realtime=False)
    chunks = []
    for seconds, updates in steps:
        for name, value in updates.items():
            engine.set_param(name, value)
        n = int(round(seconds * sample_rate))
        for _ in range(0, n, engine.hop):
            chunks.append(engine.render_hop())
    signal = np.concatenate(chunks) if chunks else np.zeros(0)
    total = int(round(sum(s for s, _ in steps) * sample_rate))
    return signal[:total]


# ---------------------------------------------------------------------------
# CLI

def _cmd_gen_data(args):
    if args.dataset == "bowed1":
        ds = dsmod.build_bowed1(grid_step=args.grid_step)
    elif args.dataset == "bowed2":
        ds = dsmod.build_bowed2(args.count, seed=args.seed)
    else:
        raise SystemExit(f"unknown dataset {args.dataset!r}")
    if args.half:
        ds = dsmod.filter_half(ds)
    dsmod.save(ds, args.out)
    print(f"{args.dataset}: {ds.count} records -> {args.out}")
    return 0


def _cmd_train(args):
    import hashlib

    ds = dsmod.load(args.dataset)
    cond = ex.parse_label(args.condition)
    cfg = ex.TrainConfig(lam=args.lam, batch_size=args.batch_size,
                         n_batches=args.batches, lr=args.lr, seed=args.seed)
    result = ex.train(cond, ds, cfg)
    with open(args.dataset, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    nets = {"encoder": result.encoder, "decoder": result.decoder}
    if result.discriminator is not None:
        nets["discriminator"] = result.discriminator
    meta = {
        "condition": cond.label, "n_latent": cond.n_latent,
        "m_cond": cond.m_cond, "hidden": cfg.hidden, "lam": cfg.lam,
        "seed": cfg.seed, "n_batches": cfg.n_batches,
        "dataset_sha256": digest,
    }
    nn.save_checkpoint(args.out, nets, ds.stats, meta=meta,
                       reference=ds.reference)
    hist_path = args.out + ".history"
    with open(hist_path, "w", encoding="utf-8") as f:
        h = result.history
        for i in range(len(h.e_loss)):
            row = [f"{h.e_loss[i]:.6g}"]
            if h.g_loss:
                row += [f"{h.g_loss[i]:.6g}", f"{h.d_loss[i]:.6g}"]
            f.write("\t".join(row) + "\n")
    final = float(np.mean(result.history.e_loss[-50:]))
    print(f"{cond.label}: E_loss {result.history.e_loss[0]:.4f} -> "
          f"{final:.4f}; checkpoint {args.out}, history {hist_path}")
    return 0


def _cmd_eval(args):
    ds1 = dsmod.load(args.dataset)
    ds2 = dsmod.load(args.dataset2) if args.dataset2 else None
    cfg = ex.TrainConfig(seed=args.seed)
    if args.suite:
        report = ex.run_condition_suite(ds1, ds2, cfg)
        print(ex.report_table(report))
        if args.out:
            ex.save_report(report, args.out)
            for label, entry in report.items():
                if isinstance(entry, dict) and "result" in entry:
                    ex.plot_history(entry["result"].history,
                                    f"{args.out}.{label}.loss.svg")
        return 0
    if not args.checkpoint:
        raise SystemExit("--checkpoint required without --suite")
    nets, stats, meta, reference = nn.load_checkpoint(args.checkpoint)
    if reference is not None and ds1.reference is None:
        ds1.reference = reference
    if args.metric == "recon":
        print(ex.eval_reconstruction(nets["encoder"], nets["decoder"], ds1))
    elif args.metric == "params":
        traj = ex.make_eval_trajectory()
        rms, skipped = ex.eval_param_estimation(nets["encoder"], ds1, traj)
        print(f"rms {rms:.3f} skipped {skipped:.3f}")
    elif args.metric == "latent":
        n_latent = int(meta.get("n_latent", 1))
        ls = ex.latent_stats(nets["encoder"], ds1, n_latent, seed=args.seed)
        print(f"ks {ls.ks} occupancy {ls.occupancy:.3f}")
        if args.out:
            ex.plot_latent_scatter(ls, args.out)
    else:
        raise SystemExit(f"unknown metric {args.metric!r}")
    return 0


def _cmd_synth(args):
    state = symod.make_synth_from_checkpoint(args.checkpoint)
    with open(args.script, encoding="utf-8") as f:
        steps = parse_param_script(f.read())
    signal = render_script(state, steps)
    peak = np.max(np.abs(signal)) if len(signal) else 0.0
    if peak > 0:
        signal = signal / peak * 0.9
    dsmod.write_wav(signal, args.out, sample_rate=int(wg.SAMPLE_RATE))
    print(f"{len(signal)} samples -> {args.out}")
    return 0


def _cmd_serve(args):
    serve(args.checkpoint, port=args.port, host=args.host)
    return 0


def _cmd_import(args):
    takes = []
    for item in args.wav:
        path, _, label = item.rpartition(":")
        if not path:
            path, label = label, ""
        audio, sr = dsmod.read_wav(path)
        takes.append((audio, float(label) if label else 0.0))
    labels = [t[1] for t in takes]
    ds = dsmod.build_imported(
        takes, sr, args.f0,
        label_lo=min(labels), label_hi=max(max(labels), min(labels) + 1.0))
    dsmod.save(ds, args.out)
    print(f"imported {ds.count} cycles of length {ds.cycle_len} -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="synthclone",
        description="bowed-string cloning: data, training, evaluation, synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build a training dataset")
    p.add_argument("--dataset", required=True, choices=["bowed1", "bowed2"])
    p.add_argument("--grid-step", type=int, default=4)
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--half", action="store_true",
                   help="keep only records with bow position < 64")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one experiment condition")
    p.add_argument("--condition", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate models or run the suite")
    p.add_argument("--suite", action="store_true")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset2")
    p.add_argument("--checkpoint")
    p.add_argument("--metric", default="recon",
                   choices=["recon", "params", "latent"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="offline render from a parameter script")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("serve", help="live engine + WebSocket endpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("import", help="dataset from periodic recordings")
    p.add_argument("--wav", action="append", required=True,
                   metavar="PATH[:LABEL]")
    p.add_argument("--f0", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_import)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
