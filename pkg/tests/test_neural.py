import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from synthclone import dataset as dsmod
from synthclone import neural as nn


def make_net(rng, in_dim=4, hidden=5, out_dim=3, **kw):
    return nn.init_mlp(in_dim, hidden, out_dim, rng, dtype=np.float64, **kw)


class TestForward:
    def test_zero_weights_emit_bias(self):
        rng = np.random.default_rng(0)
        net = make_net(rng)
        net.w_in[:] = 0.0
        net.w_out[:] = 0.0
        net.b_out[:] = 2.5
        out, _ = nn.forward(net, np.ones((7, 4)))
        assert np.allclose(out, 2.5)

    def test_relu_kills_negative_preactivations(self):
        rng = np.random.default_rng(1)
        net = make_net(rng)
        net.b_in[:] = -100.0
        net.w_in[:] = 0.0
        net.b_out[:] = -1.5
        out, _ = nn.forward(net, np.ones((3, 4)))
        assert np.allclose(out, -1.5)

    def test_batch_shape_contract(self):
        rng = np.random.default_rng(2)
        net = make_net(rng, in_dim=200, hidden=100, out_dim=3)
        out, _ = nn.forward(net, rng.normal(size=(50, 200)))
        assert out.shape == (50, 3)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        net = make_net(rng)
        with pytest.raises(ValueError):
            nn.forward(net, np.zeros((2, 5)))

    def test_nonfinite_output_detected(self):
        rng = np.random.default_rng(4)
        net = make_net(rng)
        net.w_out[:] = np.inf
        with pytest.raises(FloatingPointError):
            nn.forward(net, np.ones((1, 4)))


class TestBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        net = make_net(rng)
        out, cache = nn.forward(net, rng.normal(size=(5, 4)))
        grads, g_x = nn.backward(net, cache, np.zeros_like(out))
        assert all(np.all(g == 0.0) for g in grads.values())
        assert np.all(g_x == 0.0)

    def test_linear_region_is_chain_rule_on_affine_map(self):
        rng = np.random.default_rng(1)
        net = make_net(rng, activation="linear")
        x = rng.normal(size=(3, 4))
        out, cache = nn.forward(net, x)
        g = rng.normal(size=out.shape)
        _, g_x = nn.backward(net, cache, g)
        assert np.allclose(g_x, g @ net.w_out.T @ net.w_in.T)

    def test_mismatched_grad_shape(self):
        rng = np.random.default_rng(2)
        net = make_net(rng)
        _, cache = nn.forward(net, rng.normal(size=(2, 4)))
        with pytest.raises(ValueError):
            nn.backward(net, cache, np.zeros((3, 3)))

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_finite_difference_oracle(self, activation):
        rng = np.random.default_rng(10)
        for trial in range(3):
            assert gradcheck.check_loss_ae(rng, activation=activation) < 1e-5
            assert gradcheck.check_loss_g(rng, activation=activation) < 1e-5
            assert gradcheck.check_loss_d(rng, activation=activation) < 1e-5


class TestLosses:
    def test_perfect_reconstruction_is_zero(self):
        x = np.ones((2, 3))
        y = np.ones((2, 1))
        assert nn.loss_ae(x, x, y, y, 0.5) == 0.0

    def test_arithmetic_example(self):
        x = np.array([[1.0, -1.0]])
        x_hat = np.zeros((1, 2))
        y = np.array([[2.0]])
        y_hat = np.zeros((1, 1))
        assert nn.loss_ae(x, x_hat, y, y_hat, 0.5) == pytest.approx(4.0)

    def test_lambda_zero_is_pure_data_loss(self):
        x = np.array([[3.0]])
        y = np.array([[100.0]])
        assert nn.loss_ae(x, np.zeros((1, 1)), y, np.zeros((1, 1)), 0.0) == 9.0

    def test_loss_ae_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            args = [rng.normal(size=(4, 3)), rng.normal(size=(4, 3)),
                    rng.normal(size=(4, 2)), rng.normal(size=(4, 2))]
            assert nn.loss_ae(*args, 0.5) >= 0.0

    def test_loss_g_values(self):
        assert nn.loss_g(np.ones(4)) == 0.0
        assert nn.loss_g(np.array([0.5])) == pytest.approx(np.log(2.0))
        capped = nn.loss_g(np.array([0.0]))
        assert capped == pytest.approx(-np.log(nn.PROB_CLAMP))

    def test_loss_d_values(self):
        assert nn.loss_d(np.ones(3), np.zeros(3)) == 0.0
        chance = nn.loss_d(np.array([0.5]), np.array([0.5]))
        assert chance == pytest.approx(2.0 * np.log(2.0))

    def test_loss_d_label_swap_symmetry(self):
        p = np.array([0.3, 0.9])
        q = np.array([0.2, 0.6])
        assert nn.loss_d(p, q) == pytest.approx(nn.loss_d(1.0 - q, 1.0 - p))


class TestDiscriminate:
    def test_zero_weights_give_half(self):
        rng = np.random.default_rng(0)
        disc = make_net(rng, in_dim=2, out_dim=1)
        for t in disc.tensors().values():
            t[:] = 0.0
        prob, _ = nn.discriminate(disc, np.ones((5, 2)))
        assert np.allclose(prob, 0.5)

    def test_monotone_in_raw_output(self):
        raw = np.linspace(-5, 5, 11)
        p = nn.sigmoid(raw)
        assert np.all(np.diff(p) > 0)
        assert np.all((p > 0) & (p < 1))

    def test_shape(self):
        rng = np.random.default_rng(1)
        disc = make_net(rng, in_dim=3, out_dim=1)
        prob, _ = nn.discriminate(disc, rng.normal(size=(8, 3)))
        assert prob.shape == (8, 1)


class TestAdam:
    def test_first_step_magnitude(self):
        state = nn.AdamState()
        p = np.zeros(4)
        g = np.array([3.0, -2.0, 0.5, 10.0])
        nn.adam_step({"p": p}, {"p": g.copy()}, state, lr=0.001)
        assert np.allclose(p, -0.001 * np.sign(g), atol=1e-6)

    def test_zero_gradient_never_moves(self):
        state = nn.AdamState()
        p = np.full(3, 7.0)
        for _ in range(10):
            nn.adam_step({"p": p}, {"p": np.zeros(3)}, state, lr=0.1)
        assert np.allclose(p, 7.0)

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(0)
            state = nn.AdamState()
            p = np.ones(5)
            for _ in range(20):
                nn.adam_step({"p": p}, {"p": rng.normal(size=5)}, state, 0.01)
            return p
        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.adam_step({"p": np.zeros(3)}, {"p": np.zeros(4)},
                         nn.AdamState(), 0.01)


class TestCheckpoint:
    def make_stats(self, L):
        return dsmod.NormStats(np.arange(L, dtype=float), np.ones(L),
                               np.array([0.0]), np.array([128.0]))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        nets = {
            "encoder": nn.init_mlp(6, 5, 3, rng),
            "decoder": nn.init_mlp(3, 5, 6, rng, out_activation="linear"),
            "discriminator": nn.init_mlp(2, 5, 1, rng),
        }
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(path, nets, self.make_stats(6),
                           meta={"n_latent": 2, "seed": 1},
                           reference=np.arange(7.0))
        back, stats, meta, reference = nn.load_checkpoint(path)
        assert set(back) == set(nets)
        for role in nets:
            for name, t in nets[role].tensors().items():
                assert np.allclose(back[role].tensors()[name], t, atol=1e-7)
            assert back[role].activation == nets[role].activation
        assert meta["n_latent"] == "2"
        assert np.allclose(stats.mean, np.arange(6.0), atol=1e-6)
        assert np.allclose(reference, np.arange(7.0), atol=1e-6)

    def test_decoder_only_export(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "d.ckpt"
        nn.save_checkpoint(path, {"decoder": nn.init_mlp(3, 5, 6, rng)},
                           self.make_stats(6))
        back, _, _, reference = nn.load_checkpoint(path)
        assert set(back) == {"decoder"}
        assert reference is None

    def test_corruption_detected(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "c.ckpt"
        nn.save_checkpoint(path, {"decoder": nn.init_mlp(3, 4, 5, rng)},
                           self.make_stats(5))
        blob = bytearray(path.read_bytes())
        blob[-2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(nn.CheckpointFormatError):
            nn.load_checkpoint(path)

    def test_version_check(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "v.ckpt"
        nn.save_checkpoint(path, {"decoder": nn.init_mlp(3, 4, 5, rng)},
                           self.make_stats(5))
        blob = path.read_bytes().replace(b"version: 1", b"version: 8", 1)
        path.write_bytes(blob)
        with pytest.raises(nn.CheckpointFormatError):
            nn.load_checkpoint(path)


@settings(deadline=None, max_examples=30)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8),
       st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_forward_shape_and_finiteness(in_dim, hidden, out_dim, batch, seed):
    rng = np.random.default_rng(seed)
    net = nn.init_mlp(in_dim, hidden, out_dim, rng, dtype=np.float64)
    out, _ = nn.forward(net, rng.normal(size=(batch, in_dim)))
    assert out.shape == (batch, out_dim)
    assert np.all(np.isfinite(out))


@settings(deadline=None, max_examples=30)
@given(st.floats(-50.0, 50.0))
def test_sigmoid_stable_and_bounded(a):
    p = nn.sigmoid(np.array([a]))[0]
    assert 0.0 <= p <= 1.0
    assert np.isfinite(p)
