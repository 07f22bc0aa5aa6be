"""VAE speech models: MLP encoder/decoder (and prior net for the AV kind).

Each model defines
  prior       p(z | v)    = N(xi(v), diag(exp(log_lam(v))))   (N(0, I) for the A kind)
  likelihood  p(s | z, v) = N_c(0, diag(exp(dec(z, v))))
and an encoder q(z | s, v) fed with the standardized log power spectrum.
All backward passes are written by hand so inference can differentiate the
decoder with respect to z without an autodiff framework.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from swvae.numerics import AdamState, NumericalError, adam_step, check_finite

log = logging.getLogger(__name__)

AUDIO = "audio"
AUDIOVISUAL = "audiovisual"
KINDS = (AUDIO, AUDIOVISUAL)

LOG_POWER_FLOOR = 1e-10
LOG_VAR_MAX = 700.0  # exp overflows float64 just above 709


# --------------------------------------------------------------------------
# MLP


class Mlp:
    """Fully connected net, ``act`` on hidden layers and linear output.

    Parameters live in one flat vector ``theta``; ``weights``/``biases``
    are views into it, so optimizers and checkpoints see a single array.
    """

    ACTIVATIONS = ("tanh", "identity")

    def __init__(self, sizes, act: str = "tanh", theta: np.ndarray | None = None):
        if act not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {self.sizes}")
        self.act = act
        n = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        if theta is None:
            theta = np.zeros(n)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ValueError(f"theta must have {n} entries, got {theta.shape}")
        self.theta = theta.copy()
        self._bind()

    def _bind(self):
        self.weights, self.biases = [], []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.theta[off : off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.theta[off : off + b])
            off += b

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, act: str = "tanh") -> "Mlp":
        net = cls(sizes, act)
        for W in net.weights:
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
        return net

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.act, self.theta)

    def __deepcopy__(self, memo):
        # weights/biases must stay views of the copied theta
        return self.copy()

    def set_theta(self, theta: np.ndarray) -> None:
        self.theta[...] = theta

    def _activate(self, a):
        return np.tanh(a) if self.act == "tanh" else a

    def forward(self, x: np.ndarray):
        """Return (output, cache). ``x`` has shape (..., n_in)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Mlp expects {self.n_in} inputs, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h = x.reshape(-1, self.n_in)
        hs = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = self._activate(h)
            hs.append(h)
        return h.reshape(*lead, self.n_out), (lead, hs)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray, want_params: bool = True):
        """Backprop ``grad_out`` (same shape as the output).

        Returns (grad wrt input, flat grad wrt theta or None).
        """
        lead, hs = cache
        g = np.asarray(grad_out, dtype=np.float64).reshape(-1, self.n_out)
        grads = [] if want_params else None
        for i in range(len(self.weights) - 1, -1, -1):
            if want_params:
                grads.append(g.sum(axis=0))
                grads.append((hs[i].T @ g).ravel())
            g = g @ self.weights[i].T
            if i > 0 and self.act == "tanh":
                g = g * (1.0 - hs[i] ** 2)
        flat = np.concatenate(grads[::-1]) if want_params else None
        return g.reshape(*lead, self.n_in), flat


# --------------------------------------------------------------------------
# Gaussian helpers


def gaussian_kl(mean_q, logvar_q, mean_p, logvar_p) -> np.ndarray:
    """KL(N(mean_q, e^logvar_q) || N(mean_p, e^logvar_p)), summed over the last axis."""
    var_ratio = np.exp(logvar_q - logvar_p)
    sq = (mean_q - mean_p) ** 2 * np.exp(-logvar_p)
    return 0.5 * np.sum(logvar_p - logvar_q + var_ratio + sq - 1.0, axis=-1)


def gaussian_kl_grads(mean_q, logvar_q, mean_p, logvar_p):
    """Partial derivatives of :func:`gaussian_kl` wrt its four arguments."""
    inv_p = np.exp(-logvar_p)
    diff = mean_q - mean_p
    var_q = np.exp(logvar_q)
    d_mq = diff * inv_p
    d_lq = 0.5 * (var_q * inv_p - 1.0)
    d_mp = -d_mq
    d_lp = 0.5 * (1.0 - (var_q + diff**2) * inv_p)
    return d_mq, d_lq, d_mp, d_lp


# --------------------------------------------------------------------------
# model


@dataclass
class VaeModel:
    kind: str
    n_bins: int
    latent_dim: int
    encoder: Mlp
    decoder: Mlp
    prior: Mlp | None = None
    visual_dim: int = 0
    model_id: int = 0
    in_mean: np.ndarray = field(default=None, repr=False)
    in_std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        F, L, V = self.n_bins, self.latent_dim, self.visual_dim
        av = self.kind == AUDIOVISUAL
        if av and V < 1:
            raise ValueError("audio-visual model needs visual_dim >= 1")
        if not av:
            self.visual_dim = V = 0
            if self.prior is not None:
                raise ValueError("audio-only model has a fixed N(0, I) prior")
        if self.encoder.n_in != F + V or self.encoder.n_out != 2 * L:
            raise ValueError("encoder shape does not match (F + V) -> 2L")
        if self.decoder.n_in != L + V or self.decoder.n_out != F:
            raise ValueError("decoder shape does not match (L + V) -> F")
        if av and (self.prior is None or self.prior.n_in != V or self.prior.n_out != 2 * L):
            raise ValueError("prior net shape does not match V -> 2L")
        self.in_mean = np.zeros(F) if self.in_mean is None else np.asarray(self.in_mean, float)
        self.in_std = np.ones(F) if self.in_std is None else np.asarray(self.in_std, float)

    @classmethod
    def create(
        cls,
        kind: str,
        n_bins: int,
        rng: np.random.Generator,
        latent_dim: int = 16,
        hidden: int = 128,
        visual_dim: int = 8,
        model_id: int = 0,
    ) -> "VaeModel":
        V = visual_dim if kind == AUDIOVISUAL else 0
        enc = Mlp.init([n_bins + V, hidden, 2 * latent_dim], rng)
        dec = Mlp.init([latent_dim + V, hidden, n_bins], rng)
        prior = Mlp.init([V, hidden, 2 * latent_dim], rng) if V else None
        return cls(kind, n_bins, latent_dim, enc, dec, prior, V, model_id)

    @property
    def is_av(self) -> bool:
        return self.kind == AUDIOVISUAL

    def copy(self) -> "VaeModel":
        return copy.deepcopy(self)

    def nets(self) -> list[Mlp]:
        return [self.encoder, self.decoder] + ([self.prior] if self.prior else [])

    def _check_v(self, v, lead):
        if self.is_av:
            if v is None:
                raise ValueError("audio-visual model requires a visual input")
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (*lead, self.visual_dim):
                raise ValueError(
                    f"visual input shape {v.shape} does not match {(*lead, self.visual_dim)}"
                )
            return v
        if v is not None:
            raise ValueError("audio-only model takes no visual input")
        return None

    def encoder_input(self, power: np.ndarray, v=None) -> np.ndarray:
        power = np.asarray(power, dtype=np.float64)
        if power.shape[-1] != self.n_bins:
            raise ValueError(f"expected {self.n_bins} bins, got {power.shape[-1]}")
        if np.any(power < 0):
            raise ValueError("power spectrum must be nonnegative")
        v = self._check_v(v, power.shape[:-1])
        x = (np.log(power + LOG_POWER_FLOOR) - self.in_mean) / self.in_std
        return x if v is None else np.concatenate([x, v], axis=-1)

    def decoder_input(self, z: np.ndarray, v=None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"expected latent dim {self.latent_dim}, got {z.shape[-1]}")
        v = self._check_v(v, z.shape[:-1])
        return z if v is None else np.concatenate([z, v], axis=-1)

    def prior_params(self, v=None, lead=()):
        """(xi, log_lambda) of p(z | v); zeros for the audio-only kind."""
        if not self.is_av:
            zeros = np.zeros((*lead, self.latent_dim))
            return zeros, zeros.copy()
        v = self._check_v(v, np.shape(v)[:-1])
        out = self.prior(v)
        L = self.latent_dim
        return out[..., :L], out[..., L:]


def encode(model: VaeModel, power_spectrum: np.ndarray, v=None):
    """Mean and log-variance of q(z | s[, v]) from |s|^2."""
    out = model.encoder(model.encoder_input(power_spectrum, v))
    L = model.latent_dim
    mean, log_var = out[..., :L], out[..., L:]
    check_finite("encoder output", out)
    return mean, log_var


def decode_log_variance(model: VaeModel, z: np.ndarray, v=None) -> np.ndarray:
    """log sigma^2(z, v), the raw decoder output."""
    out = model.decoder(model.decoder_input(z, v))
    if not np.all(np.isfinite(out)) or np.any(out > LOG_VAR_MAX):
        raise NumericalError("decoder produced a non-finite or overflowing log-variance")
    return out


def decode_variance(model: VaeModel, z: np.ndarray, v=None) -> np.ndarray:
    """Per-bin speech variance sigma^2(z, v) = exp(decoder output)."""
    with np.errstate(over="ignore"):
        var = np.exp(model.decoder(model.decoder_input(z, v)))
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        raise NumericalError("decoder produced a non-finite or non-positive variance")
    return var


def decode_variance_grad_z(model: VaeModel, z: np.ndarray, v=None):
    """sigma^2(z, v) plus a closure mapping dloss/dsigma^2 to dloss/dz."""
    logvar, cache = model.decoder.forward(model.decoder_input(z, v))
    with np.errstate(over="ignore"):
        var = np.exp(logvar)
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        raise NumericalError("decoder produced a non-finite or non-positive variance")
    L = model.latent_dim

    def vjp(upstream: np.ndarray) -> np.ndarray:
        g_in, _ = model.decoder.backward(cache, upstream * var, want_params=False)
        return g_in[..., :L]

    return var, vjp


# --------------------------------------------------------------------------
# training


def neg_elbo(model: VaeModel, power: np.ndarray, v, eps: np.ndarray, grads: bool = False):
    """Mean negative ELBO over a batch (constants dropped) and optional grads.

    Reconstruction is the complex-Gaussian negative log-likelihood
    sum_f log sigma_f^2 + |s_f|^2 / sigma_f^2; a single reparameterized
    sample ``z = mu + exp(lv / 2) * eps`` is used. Returns
    (loss, recon, kl, flat gradient over [encoder, decoder, prior] or None).
    """
    N = power.shape[0]
    L = model.latent_dim
    enc_out, enc_cache = model.encoder.forward(model.encoder_input(power, v))
    mu, lv = enc_out[:, :L], enc_out[:, L:]
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    dec_out, dec_cache = model.decoder.forward(model.decoder_input(z, v))
    inv_var = np.exp(-dec_out)
    recon = np.sum(dec_out + power * inv_var, axis=1)
    if model.is_av:
        pr_out, pr_cache = model.prior.forward(v)
        xi, llam = pr_out[:, :L], pr_out[:, L:]
    else:
        xi = np.zeros_like(mu)
        llam = np.zeros_like(mu)
    kl = gaussian_kl(mu, lv, xi, llam)
    loss = float(np.mean(recon + kl))
    if not np.isfinite(loss):
        raise NumericalError("negative ELBO is non-finite")
    if not grads:
        return loss, float(np.mean(recon)), float(np.mean(kl)), None

    g_dec = (1.0 - power * inv_var) / N
    g_dec_in, g_dec_theta = model.decoder.backward(dec_cache, g_dec)
    g_z = g_dec_in[:, :L]
    d_mq, d_lq, d_mp, d_lp = gaussian_kl_grads(mu, lv, xi, llam)
    g_mu = g_z + d_mq / N
    g_lv = g_z * eps * 0.5 * std + d_lq / N
    _, g_enc_theta = model.encoder.backward(enc_cache, np.concatenate([g_mu, g_lv], axis=1))
    parts = [g_enc_theta, g_dec_theta]
    if model.is_av:
        _, g_pr_theta = model.prior.backward(pr_cache, np.concatenate([d_mp, d_lp], axis=1) / N)
        parts.append(g_pr_theta)
    return loss, float(np.mean(recon)), float(np.mean(kl)), np.concatenate(parts)


def _get_theta(model: VaeModel) -> np.ndarray:
    return np.concatenate([net.theta for net in model.nets()])


def _set_theta(model: VaeModel, theta: np.ndarray) -> None:
    off = 0
    for net in model.nets():
        n = net.theta.size
        net.set_theta(theta[off : off + n])
        off += n


@dataclass
class TrainResult:
    model: VaeModel
    losses: list[float]


def fit_input_normalization(model: VaeModel, power: np.ndarray) -> None:
    lp = np.log(power + LOG_POWER_FLOOR)
    model.in_mean = lp.mean(axis=0)
    model.in_std = lp.std(axis=0) + 1e-3


def train_vae(
    model: VaeModel,
    clean_power: np.ndarray,
    vis: np.ndarray | None,
    epochs: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    batch_size: int = 64,
    init_from_data: bool = True,
    keep_best: bool = True,
) -> TrainResult:
    """Fit a VAE to N x F clean power frames (and N x V visual frames).

    ``losses[0]`` is the loss before training and ``losses[k]`` the loss
    after epoch k, both evaluated on the full set with one frozen noise
    draw, so the curve is comparable across epochs. With ``keep_best`` the
    returned weights are those of the lowest point on that curve (Adam at a
    fixed rate occasionally spikes late in training).
    """
    power = np.asarray(clean_power, dtype=np.float64)
    if power.ndim != 2 or power.shape[0] == 0:
        raise ValueError("training set must be a nonempty N x F array")
    if power.shape[1] != model.n_bins:
        raise ValueError(f"expected {model.n_bins} bins, got {power.shape[1]}")
    if model.is_av:
        if vis is None or np.shape(vis) != (power.shape[0], model.visual_dim):
            raise ValueError("audio-visual training needs an N x V visual array")
        vis = np.asarray(vis, dtype=np.float64)
    elif vis is not None:
        raise ValueError("audio-only model takes no visual input")

    model = model.copy()
    if init_from_data:
        fit_input_normalization(model, power)
        model.decoder.biases[-1][...] = np.log(power + LOG_POWER_FLOOR).mean(axis=0)

    N = power.shape[0]
    L = model.latent_dim
    eval_eps = rng.standard_normal((N, L))

    def full_loss():
        return neg_elbo(model, power, vis, eval_eps)[0]

    losses = [full_loss()]
    log.info("train_vae[%s] epoch 0 loss %.4f", model.kind, losses[0])
    theta = _get_theta(model)
    best = theta.copy()
    state = AdamState.like(theta, lr)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(N)
        for start in range(0, N, batch_size):
            idx = order[start : start + batch_size]
            eps = rng.standard_normal((idx.size, L))
            vb = vis[idx] if model.is_av else None
            _, _, _, g = neg_elbo(model, power[idx], vb, eps, grads=True)
            theta = adam_step(theta, g, state)
            _set_theta(model, theta)
        loss = full_loss()
        if not np.isfinite(loss):
            raise NumericalError(f"train_vae diverged at epoch {epoch}")
        if loss < min(losses):
            best = theta.copy()
        losses.append(loss)
        log.debug("train_vae[%s] epoch %d loss %.4f", model.kind, epoch, loss)
    if keep_best:
        _set_theta(model, best)
    log.info("train_vae[%s] %d epochs, final loss %.4f, best %.4f", model.kind, epochs, losses[-1], min(losses))
    return TrainResult(model, losses)


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SWVAECKP"
CKPT_VERSION = 1
_KIND_CODE = {AUDIO: 0, AUDIOVISUAL: 1}
_ACT_CODE = {"tanh": 0, "identity": 1}


def _pack_mlp(buf: io.BytesIO, net: Mlp) -> None:
    buf.write(struct.pack("<II", _ACT_CODE[net.act], len(net.sizes)))
    buf.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
    buf.write(struct.pack("<Q", net.theta.size))
    buf.write(net.theta.astype("<f8").tobytes())


def _unpack_mlp(buf: io.BytesIO) -> Mlp:
    act_code, n_sizes = struct.unpack("<II", buf.read(8))
    sizes = struct.unpack(f"<{n_sizes}I", buf.read(4 * n_sizes))
    (n,) = struct.unpack("<Q", buf.read(8))
    theta = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
    act = {v: k for k, v in _ACT_CODE.items()}[act_code]
    return Mlp(sizes, act, theta)


def model_to_bytes(model: VaeModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(
        struct.pack(
            "<IIIIII",
            CKPT_VERSION,
            _KIND_CODE[model.kind],
            model.model_id,
            model.n_bins,
            model.latent_dim,
            model.visual_dim,
        )
    )
    for net in model.nets():
        _pack_mlp(buf, net)
    buf.write(model.in_mean.astype("<f8").tobytes())
    buf.write(model.in_std.astype("<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(raw: bytes) -> VaeModel:
    buf = io.BytesIO(raw)
    if buf.read(8) != CKPT_MAGIC:
        raise ValueError("not a VAE checkpoint (bad magic)")
    version, kind_code, model_id, F, L, V = struct.unpack("<IIIIII", buf.read(24))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    kind = {v: k for k, v in _KIND_CODE.items()}[kind_code]
    enc = _unpack_mlp(buf)
    dec = _unpack_mlp(buf)
    prior = _unpack_mlp(buf) if kind == AUDIOVISUAL else None
    in_mean = np.frombuffer(buf.read(8 * F), dtype="<f8").astype(np.float64)
    in_std = np.frombuffer(buf.read(8 * F), dtype="<f8").astype(np.float64)
    return VaeModel(kind, F, L, enc, dec, prior, V, model_id, in_mean, in_std)


def save_model(path, model: VaeModel, metadata: dict | None = None) -> None:
    """Binary checkpoint at ``path`` plus ``<path>.json`` metadata if given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    if metadata is not None:
        meta = {"kind": model.kind, "model_id": model.model_id, **metadata}
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(meta, indent=2, sort_keys=True)
        )


def load_model(path) -> VaeModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return model_from_bytes(path.read_bytes())
