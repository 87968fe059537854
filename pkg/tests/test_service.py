import json
import struct
import time

import numpy as np
import pytest
from websockets.sync.client import connect

from synthclone import dataset as dsmod
from synthclone import service as svc
from synthclone import synth as symod


class TestControlProtocol:
    @pytest.mark.parametrize("msg", [
        {"kind": "set_param", "name": "pressure", "value": 100},
        {"kind": "set_param", "name": "z0", "value": -0.5, "space": "raw"},
        {"kind": "select_source", "source": "waveguide"},
        {"kind": "get_state"},
        {"kind": "subscribe_frames"},
    ])
    def test_round_trip_identity(self, msg):
        assert svc.parse_control(svc.serialize_control(msg)) == msg

    @pytest.mark.parametrize("raw", [
        "not json", "[]", "{}", '{"kind": "dance"}',
        '{"kind": "set_param"}', '{"kind": "set_param", "name": "p"}',
        '{"kind": "set_param", "name": "p", "value": "loud"}',
        '{"kind": "select_source", "source": "theremin"}',
    ])
    def test_malformed_rejected(self, raw):
        with pytest.raises(svc.ProtocolError):
            svc.parse_control(raw)


class TestFrameCodec:
    def test_round_trip(self):
        params = [100.0, 64.0, -0.25]
        waveform = np.sin(np.linspace(0, 6, 200))
        spectrum = np.abs(np.fft.rfft(waveform))
        blob = svc.encode_frame(123.5, 1, params, waveform, spectrum)
        frame = svc.decode_frame(blob)
        assert frame["timestamp"] == 123.5
        assert frame["source"] == "waveguide"
        assert np.allclose(frame["params"], params, atol=1e-6)
        assert np.allclose(frame["waveform"], waveform, atol=1e-6)
        assert np.allclose(frame["spectrum"], spectrum, atol=1e-3)
        assert len(frame["spectrum"]) == len(frame["waveform"]) // 2 + 1

    def test_wire_layout(self):
        blob = svc.encode_frame(2.0, 0, [1.0], np.zeros(4), np.zeros(3))
        ts, flag, count = struct.unpack("<dII", blob[:16])
        assert (ts, flag, count) == (2.0, 0, 1)
        assert len(blob) == 16 + 4 * (1 + 4 + 3)

    @pytest.mark.parametrize("blob", [b"", b"\x00" * 15, b"\x00" * 17])
    def test_garbage_rejected(self, blob):
        with pytest.raises(svc.ProtocolError):
            svc.decode_frame(blob)


class TestEngine:
    def make_engine(self, tiny_ckpt, realtime=False):
        state = symod.make_synth_from_checkpoint(tiny_ckpt)
        return svc.SynthEngine(state, realtime=realtime)

    def test_param_names_cover_both_spaces(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        assert engine.param_names == ["pressure", "position", "z0"]

    def test_unknown_param_rejected(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        with pytest.raises(svc.ProtocolError):
            engine.set_param("vibrato", 1.0)

    def test_values_clamped(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        engine.set_param("pressure", 500.0)
        engine.set_param("z0", -7.0)
        snap = engine.params_snapshot()
        assert snap["pressure"] == 128.0
        assert snap["z0"] == -1.0

    def test_scaled_space_accepted(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        engine.set_param("position", 0.5, space="scaled")
        assert engine.params_snapshot()["position"] == pytest.approx(96.0)

    def test_set_param_latches_within_two_hops(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        engine.render_hop()
        engine.set_param("pressure", 100.0)
        engine.render_hop()
        engine.render_hop()
        _, y = engine.state.mailbox.read()
        assert np.array_equal(engine.state.current_y, y)
        assert dsmod.unscale_params(engine.state.current_y[0]) == \
            pytest.approx(100.0)

    def test_source_toggle_switches_snapshot_flag(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        engine.render_hop()
        assert engine.snapshot()["source"] == "neural"
        engine.select_source("waveguide")
        engine.render_hop()
        assert engine.snapshot()["source"] == "waveguide"
        with pytest.raises(svc.ProtocolError):
            engine.select_source("theremin")

    def test_both_sources_render_finite_hops(self, tiny_ckpt):
        engine = self.make_engine(tiny_ckpt)
        for source in ("neural", "waveguide", "neural"):
            engine.select_source(source)
            block = engine.render_hop()
            assert block.shape == (engine.hop,)
            assert np.all(np.isfinite(block))


@pytest.fixture(scope="module")
def live_server(tiny_ckpt):
    state = symod.make_synth_from_checkpoint(tiny_ckpt)
    engine = svc.SynthEngine(state, realtime=True)
    engine.start()
    server = svc.ControlServer(engine, port=0)
    server.start()
    yield server
    server.stop()
    engine.stop()


def ws_url(server):
    return f"ws://127.0.0.1:{server.port}"


class TestLiveEndpoint:
    def test_set_param_echoed_by_state(self, live_server):
        with connect(ws_url(live_server)) as ws:
            ws.send(json.dumps(
                {"kind": "set_param", "name": "pressure", "value": 100}))
            reply = json.loads(ws.recv(timeout=5))
            assert reply["kind"] == "ack"
            ws.send(json.dumps({"kind": "get_state"}))
            state = json.loads(ws.recv(timeout=5))
            assert state["kind"] == "state"
            assert state["params"]["pressure"] == 100.0

    def test_malformed_message_survives_connection(self, live_server):
        with connect(ws_url(live_server)) as ws:
            ws.send("{broken")
            reply = json.loads(ws.recv(timeout=5))
            assert reply["kind"] == "error"
            ws.send(json.dumps({"kind": "get_state"}))
            assert json.loads(ws.recv(timeout=5))["kind"] == "state"

    def test_unknown_param_rejected_over_wire(self, live_server):
        with connect(ws_url(live_server)) as ws:
            ws.send(json.dumps(
                {"kind": "set_param", "name": "nope", "value": 1}))
            reply = json.loads(ws.recv(timeout=5))
            assert reply["kind"] == "error"
            assert "nope" in reply["message"]

    def recv_frames(self, ws, n, timeout=10.0):
        frames = []
        deadline = time.time() + timeout
        while len(frames) < n and time.time() < deadline:
            msg = ws.recv(timeout=max(deadline - time.time(), 0.1))
            if isinstance(msg, bytes):
                frames.append(svc.decode_frame(msg))
        return frames

    def test_frames_stream_at_fixed_rate(self, live_server):
        with connect(ws_url(live_server)) as ws:
            ws.send(json.dumps({"kind": "subscribe_frames"}))
            ws.recv(timeout=5)   # ack
            t0 = time.time()
            frames = self.recv_frames(ws, 6)
            elapsed = time.time() - t0
            assert len(frames) == 6
            # 6 frames at 20 Hz should take roughly 0.3 s
            assert elapsed < 2.0
            stamps = [f["timestamp"] for f in frames]
            assert all(b >= a for a, b in zip(stamps, stamps[1:]))
            assert len(frames[0]["waveform"]) == 200
            assert len(frames[0]["spectrum"]) == 101

    def test_set_param_visible_in_frames_within_200ms(self, live_server):
        with connect(ws_url(live_server)) as ws:
            ws.send(json.dumps({"kind": "subscribe_frames"}))
            ws.recv(timeout=5)
            sent_at = time.time()
            ws.send(json.dumps(
                {"kind": "set_param", "name": "position", "value": 37.0}))
            deadline = sent_at + 5.0
            seen = None
            while time.time() < deadline:
                msg = ws.recv(timeout=5)
                if isinstance(msg, bytes):
                    frame = svc.decode_frame(msg)
                    if frame["params"][1] == pytest.approx(37.0):
                        seen = time.time()
                        break
            assert seen is not None
            assert seen - sent_at < 0.2

    def test_source_flag_follows_toggle(self, live_server):
        with connect(ws_url(live_server)) as ws:
            ws.send(json.dumps({"kind": "subscribe_frames"}))
            ws.recv(timeout=5)
            ws.send(json.dumps(
                {"kind": "select_source", "source": "waveguide"}))
            frames = self.recv_frames(ws, 4)
            assert frames[-1]["source"] == "waveguide"
            ws.send(json.dumps({"kind": "select_source", "source": "neural"}))
            frames = self.recv_frames(ws, 4)
            assert frames[-1]["source"] == "neural"

    def test_two_subscribers_share_the_broadcast(self, live_server):
        with connect(ws_url(live_server)) as a, \
                connect(ws_url(live_server)) as b:
            for ws in (a, b):
                ws.send(json.dumps({"kind": "subscribe_frames"}))
                ws.recv(timeout=5)
            fa = {f["timestamp"]: f for f in self.recv_frames(a, 6)}
            fb = {f["timestamp"]: f for f in self.recv_frames(b, 6)}
            common = set(fa) & set(fb)
            assert common
            for ts in common:
                assert np.array_equal(fa[ts]["waveform"], fb[ts]["waveform"])
                assert np.array_equal(fa[ts]["params"], fb[ts]["params"])

    def test_stalled_subscriber_does_not_stall_others(self, live_server):
        with connect(ws_url(live_server)) as stalled, \
                connect(ws_url(live_server)) as healthy:
            stalled.send(json.dumps({"kind": "subscribe_frames"}))
            healthy.send(json.dumps({"kind": "subscribe_frames"}))
            healthy.recv(timeout=5)
            # the stalled client never reads; the healthy one must keep
            # receiving a gap-free, advancing stream
            frames = self.recv_frames(healthy, 8)
            assert len(frames) == 8
            stamps = [f["timestamp"] for f in frames]
            assert stamps == sorted(stamps)

    def test_port_busy_raises(self, live_server, tiny_ckpt):
        state = symod.make_synth_from_checkpoint(tiny_ckpt)
        engine = svc.SynthEngine(state, realtime=False)
        clash = svc.ControlServer(engine, port=live_server.port)
        with pytest.raises(OSError):
            clash.start()


class TestParamScripts:
    def test_parse_script(self):
        steps = svc.parse_param_script(
            "0.5 pressure=80 z0=0.25\n# comment\n\n1.0 position=10\n")
        assert steps == [(0.5, {"pressure": 80.0, "z0": 0.25}),
                         (1.0, {"position": 10.0})]

    def test_bad_line_reported(self):
        with pytest.raises(ValueError):
            svc.parse_param_script("fast pressure=80")

    def test_render_duration_matches_script(self, tiny_ckpt):
        state = symod.make_synth_from_checkpoint(tiny_ckpt)
        steps = svc.parse_param_script("0.25 pressure=90\n0.25 z0=0.5\n")
        signal = svc.render_script(state, steps)
        assert len(signal) == 24000


class TestCli:
    def test_unknown_subcommand_usage_error(self, capsys):
        assert svc.main(["explode"]) != 0

    def test_unknown_flag_usage_error(self):
        assert svc.main(["gen-data", "--wat"]) != 0

    def test_gen_data_train_eval_synth(self, tmp_path, small_ds_file, capsys):
        ds_path = tmp_path / "tiny.sfd"
        rc = svc.main(["gen-data", "--dataset", "bowed2", "--count", "40",
                       "--seed", "2", "--out", str(ds_path)])
        assert rc == 0 and ds_path.exists()
        assert dsmod.load(ds_path).count == 40

        ckpt = tmp_path / "model.ckpt"
        rc = svc.main(["train", "--condition", "D1_Z2_Y",
                       "--dataset", small_ds_file, "--seed", "7",
                       "--batches", "30", "--out", str(ckpt)])
        assert rc == 0 and ckpt.exists()
        assert (tmp_path / "model.ckpt.history").exists()

        rc = svc.main(["eval", "--dataset", small_ds_file,
                       "--checkpoint", str(ckpt), "--metric", "recon"])
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()[-1]
        assert float(out) > 0.0

        script = tmp_path / "sweep.txt"
        script.write_text("0.1 pressure=90 position=30\n0.1 z0=0.8\n")
        wav = tmp_path / "out.wav"
        rc = svc.main(["synth", "--checkpoint", str(ckpt),
                       "--script", str(script), "--out", str(wav)])
        assert rc == 0
        audio, sr = dsmod.read_wav(wav)
        assert sr == 48000
        assert len(audio) == 9600   # 0.2 s script

    def test_import_subcommand(self, tmp_path):
        t = np.arange(48000)
        saw = 2.0 * ((t * 100.0 / 48000.0) % 1.0) - 1.0
        w0, w1 = tmp_path / "a.wav", tmp_path / "b.wav"
        dsmod.write_wav(saw, w0, 48000)
        dsmod.write_wav(-saw, w1, 48000)
        out = tmp_path / "voice.sfd"
        rc = svc.main(["import", "--wav", f"{w0}:0", "--wav", f"{w1}:1",
                       "--f0", "100", "--out", str(out)])
        assert rc == 0
        ds = dsmod.load(out)
        assert ds.n_params == 1
        assert ds.cycle_len == 959   # 2 * 48000/100 - 1

    def test_missing_file_reports_error(self, tmp_path, capsys):
        rc = svc.main(["eval", "--dataset", str(tmp_path / "none.sfd")])
        assert rc == 1
        assert "error" in capsys.readouterr().err
