"""Variational objectives and their gradient machinery.

Four estimators share one decoder:

* VAE    - Gaussian encoder, single-sample ELBO with closed-form KL.
* IWAE   - Gaussian encoder, importance-weighted ELBO (optionally DReG).
* AVB    - implicit encoder, discriminator contrasts q(z|x) against the prior.
* IWAVB  - implicit encoder with adaptive contrast: the discriminator sees
           standardized draws and models only shape deviations from a moment
           matched Gaussian; weights combine its logit with the analytic
           pieces of the surrogate posterior density.

Row layout is respondent-major everywhere: sample (i, s, r) lives at row
(i*S + s)*R + r, so reshaping to (B*S, R) lines importance samples up per
respondent/MC draw.

Gradient routing relies on two facts: stop_gradient() detaches values, and
every network/decoder can run "frozen" (parameters wrapped as constants), so
a single backward pass per tape yields exactly the gradients one parameter
group should receive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from . import grm as grm_mod
from .diffkernel import Tape, Tensor2
from .grm import GrmParams, GrmValues, ResponseMatrix, response_selectors
from .nets import BlackBoxEncoder, Discriminator, GaussianEncoder

_LOG_2PI = math.log(2.0 * math.pi)

VALID_KINDS = ("VAE", "IWAE", "AVB", "IWAVB")


class DegeneratePosteriorError(RuntimeError):
    """Adaptive-contrast moment estimate collapsed (sigma-hat ~ 0)."""


class UnsupportedDimensionError(ValueError):
    """Quadrature oracle only covers one and two latent dimensions."""


@dataclass
class EstimatorConfig:
    kind: str = "IWAE"
    R: int = 25
    S: int = 1
    adaptive_contrast: bool | None = None
    dreg: bool = True

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"kind must be one of {VALID_KINDS}, got {self.kind!r}")
        if self.R < 1 or self.S < 1:
            raise ValueError("R and S must be >= 1")
        if self.kind == "VAE" and self.R != 1:
            raise ValueError("VAE requires R = 1")
        if self.adaptive_contrast is None:
            self.adaptive_contrast = self.kind == "IWAVB"
        if self.kind == "IWAVB" and not self.adaptive_contrast:
            raise ValueError("IWAVB always uses adaptive contrast")
        if self.kind in ("VAE", "IWAE") and self.adaptive_contrast:
            raise ValueError("adaptive contrast applies only to AVB/IWAVB")

    @property
    def adversarial(self) -> bool:
        return self.kind in ("AVB", "IWAVB")


@dataclass
class WeightBundle:
    """Per-batch importance-weight pieces (forward values, not graph)."""

    log_w: np.ndarray                 # (B*S, R)
    w_tilde: np.ndarray               # (B*S, R), rows sum to 1
    z: np.ndarray                     # (B*S*R, P)
    z_std: np.ndarray | None = None   # standardized draws (AC mode)
    mu_hat: np.ndarray | None = None  # (B, P)
    sigma_hat: np.ndarray | None = None


def normalized_weights(log_w_rows: np.ndarray) -> np.ndarray:
    """Softmax over each row of (B*S, R) log-weights."""
    m = log_w_rows.max(axis=1, keepdims=True)
    e = np.exp(log_w_rows - m)
    return e / e.sum(axis=1, keepdims=True)


def tile_rows(a: np.ndarray, times: int) -> np.ndarray:
    return np.repeat(a, times, axis=0) if times > 1 else a


def moment_estimates(z_draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean/std over axis 1 of (B, draws, P); gradients blocked
    by construction (plain arrays).  Raises when any coordinate collapses."""
    mu = z_draws.mean(axis=1)
    sigma = z_draws.std(axis=1)
    if np.any(sigma <= 1e-6):
        i, p = np.argwhere(sigma <= 1e-6)[0]
        raise DegeneratePosteriorError(
            f"posterior std ~ 0 for respondent {i}, coordinate {p}")
    return mu, sigma


# ---------------------------------------------------------------------------
# Gaussian-encoder path


def gaussian_logq(tape: Tape | None, z: Tensor2, mu: Tensor2, sigma: Tensor2,
                  stop_params: bool = False) -> Tensor2:
    """log N(z; mu, diag sigma^2) per row; optionally detach (mu, sigma)
    so the only encoder dependence left runs through z (DReG path)."""
    if stop_params:
        mu = dk.stop_gradient(tape, mu)
        sigma = dk.stop_gradient(tape, sigma)
    resid = dk.div(tape, dk.sub(tape, z, mu), sigma)
    quad = dk.sum_rows(tape, dk.square(tape, resid))
    logsig = dk.sum_rows(tape, dk.log(tape, sigma))
    out = dk.mul(tape, quad, -0.5)
    out = dk.sub(tape, out, logsig)
    return dk.add(tape, out, -0.5 * z.cols * _LOG_2PI)


def gaussian_log_weights(tape: Tape | None, x: np.ndarray, feats: np.ndarray,
                         encoder: GaussianEncoder, params: GrmParams,
                         R: int, S: int, u: np.ndarray,
                         stop_q_params: bool = False,
                         frozen_decoder: bool = False,
                         frozen_encoder: bool = False) -> dict:
    """log w = log p(x, z) - log q(z | x) for reparameterized draws.

    u has B*S*R rows; returns graph tensors plus the batch size triple.
    """
    B = x.shape[0]
    tile = S * R
    feats_t = dk.const(tile_rows(feats, tile))
    z, mu, sigma = encoder.encode(tape, feats_t, dk.const(u), frozen=frozen_encoder)
    logq = gaussian_logq(tape, z, mu, sigma, stop_params=stop_q_params)
    eff = params.effective(tape, frozen=frozen_decoder)
    sel = response_selectors(x, params.categories)
    logp = grm_mod.joint_logprob(tape, eff, z, sel, tile=tile)
    log_w = dk.sub(tape, logp, logq)
    return {"z": z, "mu": mu, "sigma": sigma, "logq": logq, "logp": logp,
            "log_w": log_w, "B": B, "R": R, "S": S}


def elbo_gaussian(tape: Tape | None, x: np.ndarray, feats: np.ndarray,
                  encoder: GaussianEncoder, params: GrmParams,
                  u: np.ndarray, S: int = 1, kl: str = "closed",
                  frozen_decoder: bool = False) -> Tensor2:
    """Per-respondent ELBO (B, 1).

    kl="closed" uses the analytic KL against N(0, I); kl="mc" evaluates
    log p(x, z) - log q(z | x) at the drawn z, which is the R=1 importance
    weight on the same draws.
    """
    B = x.shape[0]
    if kl == "mc":
        bundle = gaussian_log_weights(tape, x, feats, encoder, params, 1, S, u,
                                      frozen_decoder=frozen_decoder)
        return iw_elbo_from_log_w(tape, bundle["log_w"], B, 1, S)
    feats_t = dk.const(tile_rows(feats, S))
    z, mu, sigma = encoder.encode(tape, feats_t, dk.const(u))
    eff = params.effective(tape, frozen=frozen_decoder)
    sel = response_selectors(x, params.categories)
    recon = grm_mod.conditional_loglik(tape, eff, z, sel, tile=S)
    # KL(N(mu, sigma^2) || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - 1 - 2 log sigma)
    kl_terms = dk.sub(tape, dk.add(tape, dk.square(tape, mu), dk.square(tape, sigma)), 1.0)
    kl_terms = dk.sub(tape, kl_terms, dk.mul(tape, dk.log(tape, sigma), 2.0))
    kl_row = dk.mul(tape, dk.sum_rows(tape, kl_terms), 0.5)
    per_draw = dk.sub(tape, recon, kl_row)
    per_resp = dk.reshape(tape, per_draw, B, S)
    return dk.mul(tape, dk.sum_rows(tape, per_resp), 1.0 / S)


# ---------------------------------------------------------------------------
# adversarial path


def avb_log_weights(tape: Tape | None, x: np.ndarray, feats: np.ndarray,
                    encoder: BlackBoxEncoder, disc: Discriminator,
                    params: GrmParams, config: EstimatorConfig,
                    eps: np.ndarray, moment_eps: np.ndarray | None = None,
                    moments: tuple[np.ndarray, np.ndarray] | None = None,
                    frozen_disc: bool = True,
                    frozen_decoder: bool = False,
                    frozen_encoder: bool = False) -> tuple[dict, WeightBundle]:
    """Importance weights with the discriminator standing in for log q.

    Adaptive contrast: log q(z|x) is estimated as
        T(x, z_std) - 0.5 ||z_std||^2 - (P/2) log 2pi - sum_p log sigma_hat_p
    with z_std = (z - mu_hat) / sigma_hat and the moment estimates treated as
    constants.  Plain mode contrasts against the prior instead:
        log q(z|x) = T(x, z) + log p(z).

    The discriminator runs frozen by default: its parameters must not
    receive gradients from the weight path (they train on the
    classification loss only).
    """
    B = x.shape[0]
    R, S = config.R, config.S
    tile = S * R
    P = encoder.latent_dim
    feats_t_arr = tile_rows(feats, tile)
    feats_t = dk.const(feats_t_arr)
    z = encoder.encode(tape, feats_t, dk.const(eps), frozen=frozen_encoder)
    eff = params.effective(tape, frozen=frozen_decoder)
    sel = response_selectors(x, params.categories)
    logp = grm_mod.joint_logprob(tape, eff, z, sel, tile=tile)

    if config.adaptive_contrast:
        if moments is not None:
            mu_hat, sigma_hat = moments
        else:
            z_draws = z.data.reshape(B, tile, P)
            if moment_eps is not None:
                extra_per = moment_eps.shape[0] // B
                z_extra = encoder.encode_values(
                    tile_rows(feats, extra_per), moment_eps).reshape(B, extra_per, P)
                z_draws = np.concatenate([z_draws, z_extra], axis=1)
            mu_hat, sigma_hat = moment_estimates(z_draws)
        mu_t = dk.const(tile_rows(mu_hat, tile))
        sig_t = dk.const(tile_rows(sigma_hat, tile))
        z_std = dk.div(tape, dk.sub(tape, z, mu_t), sig_t)
        t_out = disc.forward(tape, feats_t, z_std, frozen=frozen_disc)
        norm2 = dk.sum_rows(tape, dk.square(tape, z_std))
        logq = dk.sub(tape, t_out, dk.mul(tape, norm2, 0.5))
        logq = dk.add(tape, logq, -0.5 * P * _LOG_2PI)
        log_sig = np.log(sigma_hat).sum(axis=1, keepdims=True)
        logq = dk.sub(tape, logq, dk.const(tile_rows(log_sig, tile)))
        z_std_vals = z_std.data
    else:
        mu_hat = sigma_hat = None
        z_std = z
        z_std_vals = z.data
        t_out = disc.forward(tape, feats_t, z, frozen=frozen_disc)
        prior = grm_mod.prior_logpdf(tape, eff, z)
        logq = dk.add(tape, t_out, prior)

    log_w = dk.sub(tape, logp, logq)
    rows = log_w.data.reshape(B * S, R)
    bundle = WeightBundle(log_w=rows, w_tilde=normalized_weights(rows),
                          z=z.data, z_std=z_std_vals,
                          mu_hat=mu_hat, sigma_hat=sigma_hat)
    graph = {"z": z, "z_std": z_std, "log_w": log_w, "logp": logp, "logq": logq,
             "t_out": t_out, "feats_t": feats_t_arr, "B": B, "R": R, "S": S}
    return graph, bundle


def avb_discriminator_loss(tape: Tape | None, disc: Discriminator,
                           feats: np.ndarray | None, z_q: np.ndarray,
                           zeta: np.ndarray) -> Tensor2:
    """Binary-classification loss (to minimize) on encoder vs prior samples.

    Encoder samples arrive as plain arrays: the discriminator step must not
    move the encoder.  Per pair the loss is softplus(-T_q) + softplus(T_p),
    which is log 4 at T = 0 and tends to 0 under perfect separation.
    """
    x_t = dk.const(feats) if feats is not None and disc.response_dim > 0 else None
    t_q = disc.forward(tape, x_t, dk.const(z_q))
    t_p = disc.forward(tape, x_t, dk.const(zeta))
    loss_q = dk.tmean(tape, dk.log1p_exp(tape, dk.mul(tape, t_q, -1.0)))
    loss_p = dk.tmean(tape, dk.log1p_exp(tape, t_p))
    return dk.add(tape, loss_q, loss_p)


# ---------------------------------------------------------------------------
# importance-weighted reductions


def iw_elbo_from_log_w(tape: Tape | None, log_w: Tensor2, B: int, R: int, S: int) -> Tensor2:
    """(1/S) sum_s log[(1/R) sum_r w] per respondent, in log space; (B, 1)."""
    mat = dk.reshape(tape, log_w, B * S, R)
    lse = dk.add(tape, dk.logsumexp_rows(tape, mat), -math.log(R))
    per = dk.reshape(tape, lse, B, S)
    return dk.mul(tape, dk.sum_rows(tape, per), 1.0 / S)


def dreg_phi_surrogate(tape: Tape | None, log_w: Tensor2,
                       w_tilde: np.ndarray, B: int, S: int) -> Tensor2:
    """Scalar whose encoder gradient is sum_r w_tilde^2 dlog w/dz dz/dphi.

    log_w must be built with the explicit q-parameter paths stopped (and the
    decoder frozen when decoder gradients come from another pass); w_tilde is
    treated as a constant.
    """
    w2 = np.ascontiguousarray((w_tilde ** 2).reshape(-1, 1))
    weighted = dk.mul(tape, log_w, dk.const(w2))
    return dk.mul(tape, dk.tsum(tape, weighted), 1.0 / (B * S))


def iw_elbo(tape: Tape | None, x: np.ndarray, feats: np.ndarray, encoder,
            params: GrmParams, config: EstimatorConfig, noise: np.ndarray,
            disc: Discriminator | None = None,
            moment_eps: np.ndarray | None = None,
            moments: tuple[np.ndarray, np.ndarray] | None = None,
            frozen_decoder: bool = False) -> Tensor2:
    """Per-respondent IW-ELBO (B, 1) for either encoder family."""
    B = x.shape[0]
    if isinstance(encoder, GaussianEncoder):
        bundle = gaussian_log_weights(tape, x, feats, encoder, params,
                                      config.R, config.S, noise,
                                      frozen_decoder=frozen_decoder)
        return iw_elbo_from_log_w(tape, bundle["log_w"], B, config.R, config.S)
    if disc is None:
        raise ValueError("adversarial estimators need a discriminator")
    graph, _ = avb_log_weights(tape, x, feats, encoder, disc, params, config,
                               noise, moment_eps=moment_eps, moments=moments,
                               frozen_decoder=frozen_decoder)
    return iw_elbo_from_log_w(tape, graph["log_w"], B, config.R, config.S)


# ---------------------------------------------------------------------------
# oracles and evaluation


def logmeanexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log of the mean of exponentials along one axis."""
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).mean(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def gaussian_log_weight_values(x: ResponseMatrix, params: GrmParams,
                               encoder: GaussianEncoder, rng: np.random.Generator,
                               n_draws: int, block_rows: int = 500_000) -> np.ndarray:
    """(N, n_draws) log importance weights on the plain-array path.

    Used by evaluation-style checks where the tape would only add overhead.
    """
    from .nets import encode_responses

    values = params.values()
    data = x.data
    N = data.shape[0]
    feats, _ = encode_responses(data, params.categories)
    mu, sigma = encoder.heads_values(feats)
    P = values.n_factors
    out = np.empty((N, n_draws))
    block = max(1, block_rows // n_draws)
    for s in range(0, N, block):
        e = min(N, s + block)
        nb = e - s
        u = rng.standard_normal((nb * n_draws, P))
        z = np.repeat(mu[s:e], n_draws, axis=0) + np.repeat(sigma[s:e], n_draws, axis=0) * u
        logq = (-0.5 * (u * u).sum(axis=1)
                - np.repeat(np.log(sigma[s:e]).sum(axis=1), n_draws)
                - 0.5 * P * _LOG_2PI)
        logp = grm_mod.joint_logprob_values(np.repeat(data[s:e], n_draws, axis=0), z, values)
        out[s:e] = (logp - logq).reshape(nb, n_draws)
    return out


def marginal_loglik_quadrature(x: ResponseMatrix | np.ndarray, values: GrmValues,
                               nodes: int = 101) -> np.ndarray:
    """Gauss-Hermite log marginal likelihood per respondent; P <= 2 only."""
    P = values.n_factors
    if P > 2:
        raise UnsupportedDimensionError(f"quadrature oracle supports P <= 2, got P={P}")
    if nodes < 21:
        raise ValueError("use at least 21 quadrature nodes")
    data = x.data if isinstance(x, ResponseMatrix) else np.asarray(x, dtype=np.int64)
    t, w = np.polynomial.hermite.hermgauss(nodes)
    chol = np.linalg.cholesky(values.factor_corr)
    if P == 1:
        grid = math.sqrt(2.0) * t.reshape(-1, 1) * chol[0, 0]
        logw = np.log(w) - 0.5 * math.log(math.pi)
    else:
        tt = np.array(np.meshgrid(t, t, indexing="ij")).reshape(2, -1).T
        grid = (math.sqrt(2.0) * tt) @ chol.T
        ww = np.outer(w, w).reshape(-1)
        logw = np.log(ww) - math.log(math.pi)
    logp_grid = grm_mod.category_logprob(grid, values)      # (G, M, C)
    M = data.shape[1]
    sel = logp_grid[:, np.arange(M)[None, :], np.maximum(data, 0)]  # (G, N, M)
    sel = np.where((data != grm_mod.MISSING)[None, :, :], sel, 0.0)
    ll = sel.sum(axis=2)                                    # (G, N)
    total = ll + logw[:, None]
    m = total.max(axis=0)
    return m + np.log(np.exp(total - m).sum(axis=0))


@dataclass
class HeldoutReport:
    total: float
    per_respondent_mean: float
    n_respondents: int
    r_eval: int
    surrogate_density: bool = False
    per_respondent: np.ndarray = field(default=None, repr=False)


def heldout_loglik(x_holdout: ResponseMatrix, params: GrmParams, encoder,
                   rng: np.random.Generator, R_eval: int = 5000,
                   disc: Discriminator | None = None,
                   adaptive_contrast: bool = True,
                   feats: np.ndarray | None = None,
                   block_rows: int = 200_000) -> HeldoutReport:
    """Importance-sampled marginal log-likelihood of withheld respondents.

    Gaussian encoders use their exact density; adversarial fits use the
    trained discriminator's density surrogate (an estimate, not a bound,
    flagged in the report).
    """
    from .nets import encode_responses  # local import to avoid cycle at module load

    values = params.values()
    x = x_holdout.data
    H = x.shape[0]
    if feats is None:
        feats, _ = encode_responses(x, params.categories)
    P = values.n_factors
    gaussian = isinstance(encoder, GaussianEncoder)
    block = max(1, block_rows // R_eval)
    per_resp = np.empty(H)
    for start in range(0, H, block):
        stop = min(H, start + block)
        nb = stop - start
        fb = np.repeat(feats[start:stop], R_eval, axis=0)
        if gaussian:
            mu, sigma = encoder.heads_values(feats[start:stop])
            u = rng.standard_normal((nb * R_eval, P))
            z = np.repeat(mu, R_eval, axis=0) + np.repeat(sigma, R_eval, axis=0) * u
            logq = (-0.5 * (u * u).sum(axis=1)
                    - np.repeat(np.log(sigma).sum(axis=1), R_eval)
                    - 0.5 * P * _LOG_2PI)
        else:
            eps = rng.standard_normal((nb * R_eval, encoder.noise_dim))
            z = encoder.encode_values(fb, eps)
            if adaptive_contrast:
                draws = z.reshape(nb, R_eval, P)
                mu_hat, sigma_hat = moment_estimates(draws)
                z_std = (z - np.repeat(mu_hat, R_eval, axis=0)) / np.repeat(sigma_hat, R_eval, axis=0)
                t_vals = disc.forward_values(fb, z_std)[:, 0]
                logq = (t_vals - 0.5 * (z_std * z_std).sum(axis=1)
                        - 0.5 * P * _LOG_2PI
                        - np.repeat(np.log(sigma_hat).sum(axis=1), R_eval))
            else:
                t_vals = disc.forward_values(fb, z)[:, 0]
                logq = t_vals + grm_mod.prior_logpdf_values(z, values)
        logp = grm_mod.joint_logprob_values(np.repeat(x[start:stop], R_eval, axis=0), z, values)
        log_w = (logp - logq).reshape(nb, R_eval)
        m = log_w.max(axis=1)
        per_resp[start:stop] = m + np.log(np.exp(log_w - m[:, None]).mean(axis=1))
    return HeldoutReport(total=float(per_resp.sum()),
                         per_respondent_mean=float(per_resp.mean()),
                         n_respondents=H, r_eval=R_eval,
                         surrogate_density=not gaussian,
                         per_respondent=per_resp)
