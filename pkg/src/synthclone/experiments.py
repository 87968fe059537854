"""Training orchestration and evaluation metrics.

Conditions follow the D/N{n}_Z{m}_Y naming: n latent dimensions, m
conditional dimensions, D = adversarially regularized, N = not.  A "_tanh"
suffix selects hyperbolic-tangent activations (which also hard-limit the
encoder's code to [-1, 1]).

Each batch runs up to three steps:
  1. autoencoder: data + parameter reconstruction loss, updates encoder
     and decoder;
  2. generator: fool the discriminator, updates encoder only;
  3. discriminator: separate prior samples from encodings, updates the
     discriminator only.
Steps 2 and 3 run only for adversarial conditions with at least one
latent dimension.  Each step draws its own batch; the prior is U(-1, 1).
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from . import dataset as dsmod
from . import neural as nn
from . import waveguide as wg

HIDDEN = 100


@dataclass(frozen=True)
class ExperimentCondition:
    n_latent: int
    m_cond: int
    adversarial: bool
    activation: str = "relu"

    def __post_init__(self):
        if self.n_latent < 0 or self.m_cond < 0 or self.n_latent + self.m_cond < 1:
            raise ValueError("need at least one code dimension")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def effective_adversarial(self):
        # nothing to regularize without latent dimensions
        return self.adversarial and self.n_latent >= 1

    @property
    def label(self):
        tag = "D" if self.adversarial else "N"
        s = f"{tag}{self.n_latent}_Z{self.m_cond}_Y"
        if self.activation == "tanh":
            s += "_tanh"
        return s


_LABEL_RE = re.compile(r"^([DN])(\d+)_Z(\d+)_Y(_tanh)?$")


def parse_label(label: str) -> ExperimentCondition:
    m = _LABEL_RE.match(label)
    if not m:
        raise ValueError(f"bad condition label {label!r}")
    return ExperimentCondition(
        n_latent=int(m.group(2)),
        m_cond=int(m.group(3)),
        adversarial=m.group(1) == "D",
        activation="tanh" if m.group(4) else "relu",
    )


@dataclass
class TrainConfig:
    lam: float = 0.5
    batch_size: int = 50
    n_batches: int = 4000
    lr: float = 0.001
    seed: int = 0
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.lam < 0 or self.batch_size < 1 or self.n_batches < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainHistory:
    e_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    p_real: list = field(default_factory=list)   # mean disc prob on prior
    p_fake: list = field(default_factory=list)   # mean disc prob on encodings


@dataclass
class TrainResult:
    condition: ExperimentCondition
    encoder: nn.Mlp
    decoder: nn.Mlp
    discriminator: nn.Mlp | None
    history: TrainHistory
    config: TrainConfig


def build_networks(cond: ExperimentCondition, data_dim, cfg: TrainConfig,
                   dtype=np.float32):
    rng = np.random.default_rng(cfg.seed)
    code = cond.n_latent + cond.m_cond
    enc_out_act = "tanh" if cond.activation == "tanh" else "linear"
    encoder = nn.init_mlp(data_dim, cfg.hidden, code, rng,
                          activation=cond.activation,
                          out_activation=enc_out_act, dtype=dtype)
    decoder = nn.init_mlp(code, cfg.hidden, data_dim, rng,
                          activation=cond.activation, dtype=dtype)
    discriminator = None
    if cond.effective_adversarial:
        discriminator = nn.init_mlp(cond.n_latent, cfg.hidden, 1, rng,
                                    activation=cond.activation, dtype=dtype)
    return encoder, decoder, discriminator, rng


def _ae_step(encoder, decoder, x, y, lam, n_latent):
    """Forward/backward for the reconstruction step.

    The decoder is driven by [E_z(x), y] with the true labels in the
    conditional slots, matching how the decoder is used at synthesis time;
    the encoder's conditional head trains against the labels directly.
    Both terms are averaged per element so the parameter loss is not
    drowned by the 100x larger data term.

    Returns (loss, encoder grads, decoder grads).
    """
    s, data_dim = x.shape
    m = 0 if y is None else y.shape[1]
    e, enc_cache = nn.forward(encoder, x)
    if m:
        code = np.concatenate([e[:, :n_latent], y], axis=1)
    else:
        code = e
    x_hat, dec_cache = nn.forward(decoder, code)
    w_x = 1.0 / (s * data_dim)
    g_x_hat = -2.0 * w_x * (x - x_hat)
    loss = w_x * float(np.sum((x - x_hat) ** 2))
    dec_grads, g_code = nn.backward(decoder, dec_cache, g_x_hat)
    g_e = np.zeros_like(e)
    g_e[:, :n_latent] = g_code[:, :n_latent]
    if m:
        y_hat = e[:, n_latent:]
        w_y = lam / (s * m)
        g_e[:, n_latent:] = -2.0 * w_y * (y - y_hat)
        loss += w_y * float(np.sum((y - y_hat) ** 2))
    else:
        g_e[:, n_latent:] = g_code[:, n_latent:]
    enc_grads, _ = nn.backward(encoder, enc_cache, g_e)
    return loss, enc_grads, dec_grads


def _gen_step(encoder, discriminator, x, n_latent):
    """Generator step: encoder gradients for fooling the discriminator."""
    e, enc_cache = nn.forward(encoder, x)
    z = e[:, :n_latent]
    prob, disc_cache = nn.discriminate(discriminator, z)
    loss = nn.loss_g(prob)
    g_raw = nn.loss_g_grad_raw(prob)
    _, g_z = nn.backward(discriminator, disc_cache, g_raw)
    g_e = np.zeros_like(e)
    g_e[:, :n_latent] = g_z
    enc_grads, _ = nn.backward(encoder, enc_cache, g_e)
    return loss, enc_grads, float(prob.mean())


def _disc_step(encoder, discriminator, x, z_prior, n_latent):
    """Discriminator step: gradients for separating prior from encodings."""
    e, _ = nn.forward(encoder, x)
    z_fake = e[:, :n_latent]
    p_real, cache_r = nn.discriminate(discriminator, z_prior)
    p_fake, cache_f = nn.discriminate(discriminator, z_fake)
    loss = nn.loss_d(p_real, p_fake)
    g_real, g_fake = nn.loss_d_grad_raw(p_real, p_fake)
    grads_r, _ = nn.backward(discriminator, cache_r, g_real)
    grads_f, _ = nn.backward(discriminator, cache_f, g_fake)
    grads = {k: grads_r[k] + grads_f[k] for k in grads_r}
    return loss, grads, float(p_real.mean()), float(p_fake.mean())


def train(cond: ExperimentCondition, ds: dsmod.CycleDataset,
          cfg: TrainConfig) -> TrainResult:
    dtype = np.float32
    encoder, decoder, discriminator, rng = build_networks(
        cond, ds.cycle_len, cfg, dtype)
    data = ds.data.astype(dtype)
    params = ds.params[:, :cond.m_cond].astype(dtype)
    n = cond.n_latent
    s = cfg.batch_size

    adam_ae = nn.AdamState()
    adam_g = nn.AdamState()
    adam_d = nn.AdamState()
    history = TrainHistory()

    for _ in range(cfg.n_batches):
        idx = rng.integers(0, ds.count, s)
        x = data[idx]
        y = params[idx] if cond.m_cond else None
        loss, enc_grads, dec_grads = _ae_step(
            encoder, decoder, x, y, cfg.lam, n)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"{cond.label}: reconstruction loss diverged")
        combined = {f"enc.{k}": v for k, v in encoder.tensors().items()}
        combined.update({f"dec.{k}": v for k, v in decoder.tensors().items()})
        grads = {f"enc.{k}": v for k, v in enc_grads.items()}
        grads.update({f"dec.{k}": v for k, v in dec_grads.items()})
        nn.adam_step(combined, grads, adam_ae, cfg.lr)
        history.e_loss.append(loss)

        if cond.effective_adversarial:
            idx = rng.integers(0, ds.count, s)
            g_loss, enc_grads, _ = _gen_step(
                encoder, discriminator, data[idx], n)
            nn.adam_step(encoder.tensors(), enc_grads, adam_g, cfg.lr)

            idx = rng.integers(0, ds.count, s)
            z_prior = rng.uniform(-1.0, 1.0, (s, n)).astype(dtype)
            d_loss, disc_grads, p_real, p_fake = _disc_step(
                encoder, discriminator, data[idx], z_prior, n)
            nn.adam_step(discriminator.tensors(), disc_grads, adam_d, cfg.lr)
            if not (np.isfinite(g_loss) and np.isfinite(d_loss)):
                raise FloatingPointError(
                    f"{cond.label}: adversarial loss diverged")
            history.g_loss.append(g_loss)
            history.d_loss.append(d_loss)
            history.p_real.append(p_real)
            history.p_fake.append(p_fake)

    return TrainResult(cond, encoder, decoder, discriminator, history, cfg)


# ---------------------------------------------------------------------------
# evaluation

def encode(encoder: nn.Mlp, data: np.ndarray) -> np.ndarray:
    out, _ = nn.forward(encoder, data.astype(encoder.w_in.dtype))
    return out


def eval_reconstruction(encoder, decoder, ds: dsmod.CycleDataset) -> float:
    """Mean over records of per-element mean squared error, normalized units."""
    e = encode(encoder, ds.data)
    x_hat, _ = nn.forward(decoder, e)
    err = x_hat.astype(np.float64) - ds.data
    return float(np.mean(err ** 2))


def make_eval_trajectory(n_steps=600, pressure_range=(0.0, 128.0),
                         position_range=(0.0, 128.0), f0=wg.DEFAULT_F0):
    """Three smooth segments: pressure only, position only, then both.

    Each segment is a half-sine ramp (lo -> hi -> lo).  Returns a list of
    BowedParams, one per control step.
    """
    if n_steps < 3:
        raise ValueError("need at least one step per segment")
    p_lo, p_hi = pressure_range
    q_lo, q_hi = position_range
    p_mid = 0.5 * (p_lo + p_hi)
    q_mid = 0.5 * (q_lo + q_hi)
    seg = n_steps // 3
    traj = []
    for i in range(n_steps):
        k = min(i // seg, 2)
        t = (i - k * seg) / max(seg - 1, 1)
        ramp = np.sin(np.pi * t)
        if k == 0:
            pressure = p_lo + (p_hi - p_lo) * ramp
            position = q_mid
        elif k == 1:
            pressure = p_mid
            position = q_lo + (q_hi - q_lo) * ramp
        else:
            pressure = p_lo + (p_hi - p_lo) * ramp
            position = q_lo + (q_hi - q_lo) * np.sin(0.5 * np.pi * t)
        traj.append(wg.BowedParams(
            pressure=float(np.clip(pressure, 0, 128)),
            position=float(np.clip(position, 0, 128)),
            velocity=100.0, frequency=f0, volume=100.0))
    return traj


def eval_param_estimation(encoder, ds: dsmod.CycleDataset, trajectory,
                          step_seconds=0.01, capture_every=5,
                          sample_rate=wg.SAMPLE_RATE):
    """RMS error (0..128 units) of encoder estimates along fresh audio.

    The waveguide runs continuously along the trajectory; every
    capture_every control steps the last two-period window is extracted,
    aligned against the training reference cycle, normalized with the
    training stats, and encoded.  Unstable windows (RMS < 1e-5) are
    skipped; their fraction is returned alongside the RMS.
    """
    if ds.reference is None:
        raise ValueError("dataset carries no reference cycle for alignment")
    f0 = float(ds.meta.get("f0", wg.DEFAULT_F0))
    cycle_len = wg.two_period_length(f0, sample_rate)
    step_samples = int(round(step_seconds * sample_rate))
    state = wg.WaveguideState(f0, sample_rate)
    m = ds.n_params
    lo, hi = ds.stats.param_lo, ds.stats.param_hi
    ref = ds.reference
    buf = np.zeros(cycle_len)
    sq_err = []
    skipped = 0
    total = 0
    # settle before estimating
    wg.advance(state, trajectory[0], int(sample_rate // 2))
    for i, params in enumerate(trajectory):
        out = wg.advance(state, params, step_samples)
        if step_samples >= cycle_len:
            buf = out[-cycle_len:].copy()
        else:
            buf = np.concatenate([buf[step_samples:], out])
        if (i + 1) % capture_every:
            continue
        total += 1
        if float(np.sqrt(np.mean(buf ** 2))) < 1e-5:
            skipped += 1
            continue
        shift = dsmod.circular_shift_to(buf, ref)
        diff = dsmod.differentiate(np.roll(buf, shift))
        norm = dsmod.normalize(diff, ds.stats)
        code = encode(encoder, norm[None, :])[0]
        y_hat = code[-m:]
        est = dsmod.unscale_params(y_hat, lo, hi)
        truth = np.array([params.pressure, params.position])[:m]
        sq_err.append((est[:m] - truth) ** 2)
    if not sq_err:
        raise ValueError("no stable windows along trajectory")
    rms = float(np.sqrt(np.mean(np.concatenate(sq_err))))
    return rms, skipped / max(total, 1)


@dataclass
class LatentStats:
    ks: np.ndarray            # per-latent-dimension KS statistic vs U(-1,1)
    correlations: np.ndarray  # pairwise Pearson matrix over latent dims
    occupancy: float          # occupied fraction of a 10x10 grid on [-1,1]^2
    z: np.ndarray             # the encoded sample itself


def latent_stats(encoder, ds: dsmod.CycleDataset, n_latent, sample_n=3000,
                 seed=0) -> LatentStats:
    if n_latent < 1:
        raise ValueError("latent statistics need n_latent >= 1")
    rng = np.random.default_rng(seed)
    if sample_n >= ds.count:
        sample = ds.data
    else:
        sample = ds.data[rng.choice(ds.count, sample_n, replace=False)]
    z = encode(encoder, sample)[:, :n_latent].astype(np.float64)
    uniform_cdf = sstats.uniform(loc=-1.0, scale=2.0).cdf
    ks = np.array([sstats.kstest(z[:, j], uniform_cdf).statistic
                   for j in range(n_latent)])
    corr = np.corrcoef(z.T) if n_latent > 1 else np.ones((1, 1))
    corr = np.atleast_2d(corr)
    occupancy = 1.0
    if n_latent >= 2:
        hist, _, _ = np.histogram2d(
            z[:, 0], z[:, 1], bins=10, range=[[-1, 1], [-1, 1]])
        occupancy = float(np.count_nonzero(hist)) / 100.0
    return LatentStats(ks=ks, correlations=corr, occupancy=occupancy, z=z)


def latent_sweep(ds, latent_counts, adversarial_flags, cfg: TrainConfig,
                 m_cond=2):
    """Reconstruction MSE per (latent count, adversarial flag) cell."""
    table = {}
    for n in latent_counts:
        for adv in adversarial_flags:
            cond = ExperimentCondition(n, m_cond, adv)
            result = train(cond, ds, cfg)
            table[(n, adv)] = eval_reconstruction(
                result.encoder, result.decoder, ds)
    return table


SUITE_LABELS = ("D1_Z2_Y", "D0_Z2_Y", "N1_Z2_Y", "D2_Z0_Y", "N2_Z0_Y",
                "D2_Z0_Y_tanh", "N2_Z0_Y_tanh")


def run_condition_suite(ds1, ds2, cfg: TrainConfig, labels=SUITE_LABELS):
    """Train every condition on ds1 and collect all metrics.

    ds2, when given, adds a parameter-estimation comparison row for the
    D1_Z2_Y condition.  Failures are recorded per cell; the suite
    continues.
    """
    report = {}
    for label in labels:
        cond = parse_label(label)
        entry = {"label": label}
        try:
            t0 = time.time()
            result = train(cond, ds1, cfg)
            entry["train_seconds"] = time.time() - t0
            entry["e_loss_first"] = result.history.e_loss[0]
            entry["e_loss_final"] = float(np.mean(result.history.e_loss[-50:]))
            if result.history.g_loss:
                entry["g_loss_final"] = float(np.mean(result.history.g_loss[-50:]))
                entry["d_loss_final"] = float(np.mean(result.history.d_loss[-50:]))
            entry["recon_mse"] = eval_reconstruction(
                result.encoder, result.decoder, ds1)
            if cond.n_latent >= 1:
                ls = latent_stats(result.encoder, ds1, cond.n_latent,
                                  seed=cfg.seed)
                entry["ks"] = ls.ks.tolist()
                entry["occupancy"] = ls.occupancy
                if cond.n_latent >= 2:
                    entry["pearson_z0_z1"] = float(ls.correlations[0, 1])
            entry["result"] = result
        except Exception as exc:   # cell failure must not kill the suite
            entry["error"] = f"{type(exc).__name__}: {exc}"
        report[label] = entry

    if ds2 is not None and "D1_Z2_Y" in report and "result" in report["D1_Z2_Y"]:
        try:
            cond = parse_label("D1_Z2_Y")
            res2 = train(cond, ds2, cfg)
            traj = make_eval_trajectory()
            rms1, _ = eval_param_estimation(
                report["D1_Z2_Y"]["result"].encoder, ds1, traj)
            rms2, _ = eval_param_estimation(res2.encoder, ds2, traj)
            report["param_estimation"] = {
                "rms_ds1": rms1, "rms_ds2": rms2}
        except Exception as exc:
            report["param_estimation"] = {
                "error": f"{type(exc).__name__}: {exc}"}
    return report


def report_table(report) -> str:
    cols = ("label", "e_loss_final", "recon_mse", "occupancy",
            "pearson_z0_z1", "error")
    lines = ["\t".join(cols)]
    for label, entry in report.items():
        if not isinstance(entry, dict) or "label" not in entry:
            continue
        row = []
        for c in cols:
            v = entry.get(c, "")
            row.append(f"{v:.5g}" if isinstance(v, float) else str(v))
        lines.append("\t".join(row))
    return "\n".join(lines)


def save_report(report, path):
    """Manifest-style key:value dump of all scalar metrics."""
    lines = []
    for label, entry in report.items():
        if not isinstance(entry, dict):
            continue
        for key, value in entry.items():
            if key == "result":
                continue
            lines.append(f"{label}.{key}: {value}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def plot_history(history: TrainHistory, path):
    """Loss curves as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(history.e_loss, label="E_loss", lw=0.8)
    if history.g_loss:
        ax.plot(history.g_loss, label="G_loss", lw=0.8)
        ax.plot(history.d_loss, label="D_loss", lw=0.8)
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_latent_scatter(ls: LatentStats, path, title=""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    if ls.z.shape[1] >= 2:
        ax.scatter(ls.z[:, 0], ls.z[:, 1], s=2, alpha=0.4)
        ax.add_patch(plt.Rectangle((-1, -1), 2, 2, fill=False,
                                   edgecolor="red"))
        ax.set_xlabel("z0")
        ax.set_ylabel("z1")
    else:
        ax.hist(ls.z[:, 0], bins=40)
        ax.set_xlabel("z0")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
