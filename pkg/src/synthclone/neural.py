"""Single-hidden-layer networks with manual gradients and Adam.

All three networks share one shape: out = act(x . w_in + b_in) . w_out
+ b_out, with an optional squashing of the output (used to hard-limit the
encoder's code when running the tanh variant).  Gradients are computed
analytically; the test suite checks them against central finite
differences.

Training runs in float32 for speed; the gradient-check harness uses
float64.
"""

from __future__ import annotations

import hashlib
from base64 import b64decode, b64encode
from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-12
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _act(name, x):
    if name == "relu":
        return np.maximum(0.0, x)
    if name == "tanh":
        return np.tanh(x)
    if name == "linear":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, pre, post):
    if name == "relu":
        return (pre > 0.0).astype(pre.dtype)
    if name == "tanh":
        return 1.0 - post * post
    if name == "linear":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    activation: str = "relu"
    out_activation: str = "linear"

    @property
    def in_dim(self):
        return self.w_in.shape[0]

    @property
    def out_dim(self):
        return self.w_out.shape[1]

    def tensors(self):
        return {"w_in": self.w_in, "b_in": self.b_in,
                "w_out": self.w_out, "b_out": self.b_out}


def init_mlp(in_dim, hidden, out_dim, rng, activation="relu",
             out_activation="linear", dtype=np.float32) -> Mlp:
    """Seeded weight init, zero biases.

    ReLU nets get He-normal weights (sqrt(2/fan_in)); tanh nets get
    Glorot-uniform (+-sqrt(6/(fan_in+fan_out))).
    """
    def weights(fan_in, fan_out):
        if activation == "relu":
            scale = np.sqrt(2.0 / max(fan_in, 1))
            return (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype)
        bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
        return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)

    return Mlp(
        w_in=weights(in_dim, hidden),
        b_in=np.zeros(hidden, dtype=dtype),
        w_out=weights(hidden, out_dim),
        b_out=np.zeros(out_dim, dtype=dtype),
        activation=activation,
        out_activation=out_activation,
    )


def forward(net: Mlp, x: np.ndarray):
    """Returns (output, cache) for a batch of row vectors."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(
            f"input shape {x.shape} does not match in_dim {net.in_dim}")
    # finiteness is checked explicitly below; silence numpy's inf/nan noise
    with np.errstate(invalid="ignore", over="ignore"):
        pre = x @ net.w_in + net.b_in
        hidden = _act(net.activation, pre)
        raw = hidden @ net.w_out + net.b_out
        out = _act(net.out_activation, raw)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network output")
    cache = (x, pre, hidden, raw, out)
    return out, cache


def backward(net: Mlp, cache, grad_out):
    """Gradients of the forwarded function w.r.t. all tensors and the input."""
    x, pre, hidden, raw, out = cache
    if grad_out.shape != out.shape:
        raise ValueError("grad_out shape does not match cached output")
    with np.errstate(invalid="ignore", over="ignore"):
        g_raw = grad_out * _act_grad(net.out_activation, raw, out)
        g_w_out = hidden.T @ g_raw
        g_b_out = g_raw.sum(axis=0)
        g_hidden = g_raw @ net.w_out.T
        g_pre = g_hidden * _act_grad(net.activation, pre, hidden)
        g_w_in = x.T @ g_pre
        g_b_in = g_pre.sum(axis=0)
        g_x = g_pre @ net.w_in.T
    grads = {"w_in": g_w_in, "b_in": g_b_in,
             "w_out": g_w_out, "b_out": g_b_out}
    return grads, g_x


# ---------------------------------------------------------------------------
# losses

def loss_ae(x, x_hat, y, y_hat, lam):
    """Sum-squared data residual plus lam * sum-squared parameter residual."""
    value = float(np.sum((x - x_hat) ** 2))
    if y is not None and y.size:
        value += lam * float(np.sum((y - y_hat) ** 2))
    return value


def loss_ae_grads(x, x_hat, y, y_hat, lam):
    """Gradients of loss_ae w.r.t. x_hat and y_hat."""
    g_x_hat = -2.0 * (x - x_hat)
    g_y_hat = None
    if y is not None and y.size:
        g_y_hat = -2.0 * lam * (y - y_hat)
    return g_x_hat, g_y_hat


def sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def discriminate(disc: Mlp, z):
    """Probability that each row of z came from the prior."""
    raw, cache = forward(disc, z)
    return sigmoid(raw), cache


def loss_g(d_e_prob):
    """Generator fooling loss: -sum log p."""
    p = np.clip(d_e_prob, PROB_CLAMP, 1.0)
    return float(-np.sum(np.log(p)))


def loss_d(d_z_prob, d_e_prob):
    """Discriminator loss: -sum(log p_real + log(1 - p_fake))."""
    pz = np.clip(d_z_prob, PROB_CLAMP, 1.0)
    pe = np.clip(d_e_prob, 0.0, 1.0 - PROB_CLAMP)
    return float(-np.sum(np.log(pz) + np.log(1.0 - pe)))


def loss_g_grad_raw(d_e_prob):
    """d loss_g / d (discriminator raw output), per element."""
    return d_e_prob - 1.0


def loss_d_grad_raw(d_z_prob, d_e_prob):
    """Gradients of loss_d w.r.t. the raw outputs on real and fake batches."""
    return d_z_prob - 1.0, d_e_prob


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(tensors: dict, grads: dict, state: AdamState, lr):
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, param in tensors.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        g = g.astype(param.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            param.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoints

def _encode_tensors(named):
    lines = []
    blobs = []
    for name, arr in named:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        lines.append(f"tensor.{name}: {','.join(str(d) for d in arr.shape)}")
        blobs.append(arr.tobytes())
    return lines, b"".join(blobs)


def save_checkpoint(path, nets: dict, stats, meta=None, reference=None):
    """Write networks + normalization stats as manifest + f32 payload.

    nets maps role name ('encoder', 'decoder', 'discriminator') to Mlp.
    A decoder-only file is just nets={'decoder': ...}.
    """
    named = []
    acts = {}
    for role in sorted(nets):
        net = nets[role]
        acts[role] = f"{net.activation}/{net.out_activation}"
        for tname, arr in net.tensors().items():
            named.append((f"{role}.{tname}", arr))
    named.append(("stats.mean", stats.mean))
    named.append(("stats.std", stats.std))
    named.append(("stats.param_lo", stats.param_lo))
    named.append(("stats.param_hi", stats.param_hi))
    tensor_lines, payload = _encode_tensors(named)
    digest = hashlib.sha256(payload).hexdigest()
    lines = [f"version: {CHECKPOINT_VERSION}", f"sha256: {digest}"]
    for role, act in acts.items():
        lines.append(f"activation.{role}: {act}")
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key}: {value}")
    if reference is not None:
        ref = np.asarray(reference, dtype="<f4").tobytes()
        lines.append(f"reference: {b64encode(ref).decode('ascii')}")
    lines.extend(tensor_lines)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        f.write(payload)


def load_checkpoint(path):
    """Returns (nets, stats, meta, reference)."""
    from .dataset import NormStats

    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"\n\n")
    if end < 0:
        raise CheckpointFormatError("missing manifest terminator")
    fields = []
    mapping = {}
    for line in blob[:end].decode("utf-8").splitlines():
        key, _, value = line.partition(":")
        fields.append((key.strip(), value.strip()))
        mapping[key.strip()] = value.strip()
    if int(mapping.get("version", -1)) != CHECKPOINT_VERSION:
        raise CheckpointFormatError("unsupported checkpoint version")
    payload = blob[end + 2:]
    if hashlib.sha256(payload).hexdigest() != mapping.get("sha256"):
        raise CheckpointFormatError("payload digest mismatch")

    tensors = {}
    offset = 0
    for key, value in fields:
        if not key.startswith("tensor."):
            continue
        shape = tuple(int(d) for d in value.split(",") if d)
        size = int(np.prod(shape)) if shape else 1
        raw = payload[offset:offset + size * 4]
        if len(raw) != size * 4:
            raise CheckpointFormatError("truncated payload")
        tensors[key[7:]] = np.frombuffer(raw, dtype="<f4").reshape(
            shape).astype(np.float32).copy()
        offset += size * 4

    nets = {}
    roles = {k.split(".")[0] for k in tensors if not k.startswith("stats.")}
    for role in roles:
        act, _, out_act = mapping.get(
            f"activation.{role}", "relu/linear").partition("/")
        nets[role] = Mlp(
            w_in=tensors[f"{role}.w_in"], b_in=tensors[f"{role}.b_in"],
            w_out=tensors[f"{role}.w_out"], b_out=tensors[f"{role}.b_out"],
            activation=act, out_activation=out_act or "linear")
    stats = NormStats(
        mean=tensors["stats.mean"].astype(np.float64),
        std=tensors["stats.std"].astype(np.float64),
        param_lo=tensors["stats.param_lo"].astype(np.float64),
        param_hi=tensors["stats.param_hi"].astype(np.float64))
    meta = {k[5:]: v for k, v in mapping.items() if k.startswith("meta.")}
    reference = None
    if "reference" in mapping:
        reference = np.frombuffer(
            b64decode(mapping["reference"]), dtype="<f4").astype(np.float64)
    return nets, stats, meta, reference
