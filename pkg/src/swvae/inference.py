"""Variational EM for switching-VAE speech enhancement.

Each frame t has a switch m_t over M pretrained VAE speech models, a latent
code z_t and the clean STFT frame s_t; the noise is N_c(0, diag(WH)). The
posterior is approximated by r^s(s | m) r^z(z | m) r^m(m) and refined by
alternating

    E-z   Adam ascent on (c_tm, log Omega_tm) of r^z(z_t | m)
    E-s   per-model Wiener posterior (eta, nu) from the Monte-Carlo
          harmonic-mean speech variance gamma
    E-m   emission costs g_t(m) -> forward-backward over the switch
    M     IS-NMF multiplicative updates of W, H and Baum-Welch for the chain

The enhanced spectrogram is sum_m r^m(m_t) eta^m_t.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from swvae.hmm import HmmParams, SwitchPosterior, forward_backward, update_hmm
from swvae.nmf import NmfState, is_divergence, posterior_power, update_h, update_w
from swvae.numerics import AdamState, NumericalError, adam_step, make_rng
from swvae.vae import VaeModel, decode_log_variance, decode_variance_grad_z, encode, gaussian_kl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnhancerConfig:
    n_samples: int = 20
    em_iterations: int = 200
    ez_iterations: int = 10
    ez_lr: float = 0.05
    seed: int = 0
    nmf_rank: int = 8
    var_floor: float = 1e-10
    skip_weight: float = 1e-6
    hmm_stickiness: float = 2.0
    early_stop: bool = False
    early_stop_tol: float = 1e-6
    early_stop_window: int = 10

    def __post_init__(self):
        for name in ("n_samples", "em_iterations", "nmf_rank", "early_stop_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ez_iterations < 0:
            raise ValueError("ez_iterations must be >= 0")
        if not self.ez_lr > 0:
            raise ValueError("ez_lr must be positive")


@dataclass
class ModelPosterior:
    """Variational quantities for one model m over all frames."""

    c: np.ndarray  # T x L latent means
    log_omega: np.ndarray  # T x L latent log-variances
    xi: np.ndarray  # T x L prior means
    log_lam: np.ndarray  # T x L prior log-variances
    samples: np.ndarray = None  # D x T x L
    gamma: np.ndarray = None  # T x F
    mean_log_var: np.ndarray = None  # T x F, mean_d log sigma^2(z^(d))
    eta: np.ndarray = None  # T x F complex
    nu: np.ndarray = None  # T x F
    adam: AdamState = None  # persists across E-z steps, over [c | log_omega]


@dataclass
class PosteriorState:
    models: list[ModelPosterior]
    switch: SwitchPosterior

    @property
    def n_models(self) -> int:
        return len(self.models)

    def eta(self) -> np.ndarray:
        return np.stack([mp.eta for mp in self.models])

    def nu(self) -> np.ndarray:
        return np.stack([mp.nu for mp in self.models])


def _visual_for(model: VaeModel, v):
    return v if model.is_av else None


def _tile_visual(model: VaeModel, v, lead):
    if not model.is_av:
        return None
    return np.broadcast_to(v, (*lead, v.shape[-1]))


# --------------------------------------------------------------------------
# elementary steps


def gamma_mc(model: VaeModel, samples: np.ndarray, v=None, floor: float = 1e-10):
    """Harmonic mean over D samples of the decoder variance.

    ``samples`` is D x ... x L; ``v`` (if the model is audio-visual) has the
    trailing shape ... x V and is shared by all samples. Returns
    (gamma, mean log-variance), each ... x F.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim < 2 or samples.shape[0] < 1:
        raise ValueError("need D >= 1 samples stacked on the first axis")
    log_var = decode_log_variance(model, samples, _tile_visual(model, v, samples.shape[:-1]))
    log_var = np.maximum(log_var, np.log(floor))
    gamma = 1.0 / np.mean(np.exp(-log_var), axis=0)
    return np.maximum(gamma, floor), np.mean(log_var, axis=0)


def e_s_step(x: np.ndarray, gamma: np.ndarray, noise_var: np.ndarray, floor: float = 1e-10):
    """Wiener posterior of s: eta = gamma/(gamma+n) x, nu = gamma n/(gamma+n)."""
    gamma = np.maximum(gamma, floor)
    noise_var = np.maximum(noise_var, floor)
    total = gamma + noise_var
    eta = (gamma / total) * x
    nu = gamma * noise_var / total
    return eta, nu


def e_z_objective(c, log_omega, eps, model: VaeModel, v, power, weight, xi=None, log_lam=None):
    """Single-sample E-z objective and its gradients wrt c and log Omega.

    With z = c + exp(log_omega / 2) * eps, the objective per frame is
        weight * [ sum_f (-log sigma_f^2(z) - power_f / sigma_f^2(z))
                   - KL(N(c, Omega) || N(xi, Lambda)) ]
    where ``power`` = |eta|^2 + nu. Inputs may carry leading frame axes;
    ``weight`` broadcasts over them. Returns (objective, d/dc, d/dlog_omega).
    """
    c = np.asarray(c, dtype=np.float64)
    log_omega = np.asarray(log_omega, dtype=np.float64)
    if xi is None or log_lam is None:
        xi, log_lam = model.prior_params(_visual_for(model, v), lead=c.shape[:-1])
    weight = np.asarray(weight, dtype=np.float64)
    std = np.exp(0.5 * log_omega)
    z = c + std * eps
    var, vjp = decode_variance_grad_z(model, z, _visual_for(model, v))
    recon = -np.sum(np.log(var) + power / var, axis=-1)
    kl = gaussian_kl(c, log_omega, xi, log_lam)
    obj = weight * (recon - kl)
    # d recon / d sigma^2 = -1/sigma^2 + power/sigma^4
    g_z = vjp(-1.0 / var + power / var**2)
    inv_lam = np.exp(-log_lam)
    w = weight[..., None]
    g_c = w * (g_z - (c - xi) * inv_lam)
    g_lo = w * (g_z * eps * 0.5 * std - 0.5 * (np.exp(log_omega) * inv_lam - 1.0))
    return obj, g_c, g_lo


def refresh_samples(mp: ModelPosterior, model: VaeModel, v, D: int, rng, floor: float) -> None:
    T, L = mp.c.shape
    eps = rng.standard_normal((D, T, L))
    mp.samples = mp.c + np.exp(0.5 * mp.log_omega) * eps
    mp.gamma, mp.mean_log_var = gamma_mc(model, mp.samples, _visual_for(model, v), floor)


def e_z_step(state: PosteriorState, models, v, cfg: EnhancerConfig, rng) -> PosteriorState:
    """Adam ascent on every active (t, m), then redraw the D samples.

    The Adam moments live in the model posterior and carry over between EM
    iterations; frames below ``skip_weight`` leave both params and moments
    untouched.
    """
    r = state.switch.marginals
    for m, (mp, model) in enumerate(zip(state.models, models)):
        active = np.flatnonzero(r[:, m] >= cfg.skip_weight)
        if cfg.ez_iterations > 0 and active.size:
            L = mp.c.shape[1]
            power = np.abs(mp.eta[active]) ** 2 + mp.nu[active]
            va = v[active] if model.is_av else None
            xi, log_lam = mp.xi[active], mp.log_lam[active]
            weight = r[active, m]
            params = np.concatenate([mp.c[active], mp.log_omega[active]], axis=1)
            if mp.adam is None:
                mp.adam = AdamState(lr=cfg.ez_lr, shape=(mp.c.shape[0], 2 * L))
            opt = AdamState(
                lr=cfg.ez_lr,
                shape=params.shape,
                step=mp.adam.step,
                m=mp.adam.m[active],
                v=mp.adam.v[active],
            )
            for _ in range(cfg.ez_iterations):
                eps = rng.standard_normal((active.size, L))
                _, g_c, g_lo = e_z_objective(
                    params[:, :L], params[:, L:], eps, model, va, power, weight, xi, log_lam
                )
                params = adam_step(params, -np.concatenate([g_c, g_lo], axis=1), opt)
            mp.adam.step = opt.step
            mp.adam.m[active] = opt.m
            mp.adam.v[active] = opt.v
            mp.c[active] = params[:, :L]
            mp.log_omega[active] = params[:, L:]
        refresh_samples(mp, model, v, cfg.n_samples, rng, cfg.var_floor)
    return state


def emission_costs(state: PosteriorState, x: np.ndarray, nmf: NmfState, floor: float = 1e-10) -> np.ndarray:
    """g_t(m) for all frames and models, T x M.

    g = E_z[KL(r^s || p(s | z))] - E_s[log p(x | s)] + KL(r^z || p(z)) with
    the z-expectation replaced by the cached Monte-Carlo samples.
    """
    wh = nmf.wh().T
    cols = []
    for mp in state.models:
        nu = np.maximum(mp.nu, floor)
        abs_eta2 = np.abs(mp.eta) ** 2
        kl_s = np.sum(mp.mean_log_var - np.log(nu) + (nu + abs_eta2) / mp.gamma - 1.0, axis=1)
        nll_x = np.sum(np.log(np.pi * wh) + (np.abs(x - mp.eta) ** 2 + nu) / wh, axis=1)
        kl_z = gaussian_kl(mp.c, mp.log_omega, mp.xi, mp.log_lam)
        cols.append(kl_s + nll_x + kl_z)
    return np.stack(cols, axis=1)


def g_t(state: PosteriorState, x: np.ndarray, nmf: NmfState, t: int, m: int) -> float:
    """Emission cost of model ``m`` at frame ``t``."""
    return float(emission_costs(state, x, nmf)[t, m])


def e_m_step(state: PosteriorState, x: np.ndarray, nmf: NmfState, hmm: HmmParams, floor: float = 1e-10):
    costs = emission_costs(state, x, nmf, floor)
    if not np.all(np.isfinite(costs)):
        raise NumericalError("non-finite emission costs in E-m step")
    state.switch = forward_backward(hmm, -costs)
    return state, costs


def m_step(state: PosteriorState, x: np.ndarray, nmf: NmfState, hmm: HmmParams):
    """One H update, one W update, then Baum-Welch for (lambda, tau)."""
    V = posterior_power(x, state.switch.marginals, state.eta(), state.nu())
    nmf = update_w(update_h(nmf, V), V)
    return nmf, update_hmm(state.switch, hmm), V


def uniform_switch(T: int, M: int) -> SwitchPosterior:
    return SwitchPosterior(
        np.full((T, M), 1.0 / M), np.full((max(T - 1, 0), M, M), 1.0 / M**2), float("nan")
    )


def init_posterior(x, v, models, nmf: NmfState, cfg: EnhancerConfig, rng) -> PosteriorState:
    """Encoder-based initialization of r^z, sampled gamma, Wiener r^s, uniform r^m."""
    x = np.asarray(x)
    T, F = x.shape
    if nmf.W.shape[0] != F or nmf.H.shape[1] != T:
        raise ValueError(f"NMF shapes {nmf.W.shape}, {nmf.H.shape} do not match x {x.shape}")
    power = np.abs(x) ** 2
    wh = nmf.wh().T
    posts = []
    for model in models:
        if model.n_bins != F:
            raise ValueError(f"model has {model.n_bins} bins, spectrogram has {F}")
        vm = _visual_for(model, v)
        if model.is_av and (v is None or v.shape[0] != T):
            raise ValueError("visual sequence is not aligned with the spectrogram")
        c, lv = encode(model, power, vm)
        xi, log_lam = model.prior_params(vm, lead=(T,))
        mp = ModelPosterior(c.copy(), lv.copy(), xi, log_lam)
        refresh_samples(mp, model, v, cfg.n_samples, rng, cfg.var_floor)
        mp.eta, mp.nu = e_s_step(x, mp.gamma, wh, cfg.var_floor)
        posts.append(mp)
    return PosteriorState(posts, uniform_switch(T, len(models)))


def wiener_violations(state: PosteriorState, x: np.ndarray, nmf: NmfState) -> int:
    """Count entries breaking |eta| <= |x| or 0 < nu < min(gamma, WH)."""
    wh = nmf.wh().T
    ax = np.abs(x)
    bad = 0
    for mp in state.models:
        bad += int(np.count_nonzero(np.abs(mp.eta) > ax))
        bad += int(np.count_nonzero(~((mp.nu > 0) & (mp.nu < np.minimum(mp.gamma, wh)))))
    return bad


# --------------------------------------------------------------------------
# driver


@dataclass
class Diagnostics:
    records: list[dict] = field(default_factory=list)
    lam: list[float] = None
    tau: list[list[float]] = None
    config: dict = None

    def to_jsonl(self) -> str:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.records]
        lines.append(json.dumps({"final": {"lambda": self.lam, "tau": self.tau}, "config": self.config}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @property
    def elbo(self) -> list[float]:
        return [rec["elbo"] for rec in self.records]

    @property
    def violations(self) -> int:
        return sum(rec["wiener_violations"] for rec in self.records)


@dataclass
class EnhanceResult:
    s_hat: np.ndarray  # T x F complex
    state: PosteriorState
    nmf: NmfState
    hmm: HmmParams
    diagnostics: Diagnostics
    r_trajectory: list[np.ndarray]


def combine(state: PosteriorState) -> np.ndarray:
    """sum_m r^m(m_t) eta^m_t."""
    r = state.switch.marginals
    out = r[:, 0, None] * state.models[0].eta
    for m in range(1, state.n_models):
        out = out + r[:, m, None] * state.models[m].eta
    return out


def enhance(
    x: np.ndarray,
    v,
    models,
    cfg: EnhancerConfig | None = None,
    nmf: NmfState | None = None,
    hmm: HmmParams | None = None,
    keep_trajectory: bool = False,
) -> EnhanceResult:
    """Run the full variational EM on a T x F mixture STFT ``x``.

    ``v`` is the T x V visual sequence (ignored by audio-only models).
    """
    cfg = cfg or EnhancerConfig()
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 2:
        raise ValueError("mixture spectrogram must be T x F")
    if not models:
        raise ValueError("need at least one model")
    if v is not None:
        v = np.asarray(v, dtype=np.float64)
    T, F = x.shape
    M = len(models)
    rng = make_rng(cfg.seed)
    if nmf is None:
        nmf = NmfState.init_random(np.abs(x.T) ** 2, cfg.nmf_rank, rng, cfg.var_floor)
    if hmm is None:
        hmm = HmmParams.random(M, rng, cfg.hmm_stickiness)
    state = init_posterior(x, v, models, nmf, cfg, rng)
    diag = Diagnostics(config=asdict(cfg))
    traj = []
    for it in range(cfg.em_iterations):
        try:
            state = e_z_step(state, models, v, cfg, rng)
            wh = nmf.wh().T
            for mp in state.models:
                mp.eta, mp.nu = e_s_step(x, mp.gamma, wh, cfg.var_floor)
            violations = wiener_violations(state, x, nmf)
            state, _ = e_m_step(state, x, nmf, hmm, cfg.var_floor)
            elbo = state.switch.log_normalizer
            nmf, hmm, V = m_step(state, x, nmf, hmm)
            div = is_divergence(np.maximum(V, cfg.var_floor), nmf.wh())
        except (NumericalError, FloatingPointError) as exc:
            raise NumericalError(f"EM iteration {it}: {exc}") from exc
        if not (np.isfinite(elbo) and np.isfinite(div)):
            raise NumericalError(f"EM iteration {it}: non-finite ELBO surrogate or divergence")
        mean_r = state.switch.marginals.mean(axis=0)
        diag.records.append(
            {
                "iteration": it,
                "elbo": elbo,
                "mean_r": mean_r.tolist(),
                "is_divergence": div,
                "wiener_violations": violations,
            }
        )
        if keep_trajectory:
            traj.append(state.switch.marginals.copy())
        log.debug("EM %d: elbo %.6g, mean r %s", it, elbo, np.round(mean_r, 3))
        if cfg.early_stop and it >= cfg.early_stop_window:
            prev = diag.records[it - cfg.early_stop_window]["elbo"]
            if abs(elbo - prev) <= cfg.early_stop_tol * abs(prev):
                log.info("early stop at EM iteration %d", it)
                break
    diag.lam = hmm.lam.tolist()
    diag.tau = hmm.tau.tolist()
    return EnhanceResult(combine(state), state, nmf, hmm, diag, traj)
