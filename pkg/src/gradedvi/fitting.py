"""Training loop: per-step gradient computation for all four estimators,
cyclical learning rates, windowed convergence monitoring, and the FitResult
artifact.

Each step runs one or two tapes.  The encoder pass freezes the decoder (and
discriminator) so only phi gradients flow; the decoder/discriminator pass
reuses the same latent draws as constants, so theta gets the
importance-weighted path and psi gets the classification loss.  This keeps
every parameter group's gradient exactly as the update rules prescribe while
sharing one set of noise draws per iteration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffkernel as dk
from . import grm as grm_mod
from .diffkernel import Tape
from .estimators import (
    EstimatorConfig,
    avb_discriminator_loss,
    avb_log_weights,
    dreg_phi_surrogate,
    elbo_gaussian,
    gaussian_log_weights,
    iw_elbo_from_log_w,
    normalized_weights,
)
from .grm import GrmParams, ResponseMatrix, init_params, response_selectors, simple_structure_mask
from .nets import BlackBoxEncoder, Discriminator, GaussianEncoder, encode_responses
from .optim import AdamW, ClrSchedule, ConvergenceMonitor, NumericalError
from .rngutil import substream


class ConfigError(ValueError):
    """Invalid fit configuration."""


@dataclass
class FitConfig:
    estimator: str = "IWAE"
    n_factors: int = 1
    R: int = 25
    S: int = 1
    batch_size: int = 128
    base_lr: float = 1e-3          # encoder + decoder
    disc_base_lr: float = 1e-2     # discriminator learns faster
    max_lr_factor: float = 5.0
    clr_step_size: int = 2000
    window: int = 100
    patience: int = 500
    min_delta: float = 1e-3
    max_iterations: int = 50_000
    encoder_hidden: list[int] | None = None
    disc_hidden: list[int] = field(default_factory=lambda: [256, 128])
    noise_dim: int | None = None
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    seed: int = 0
    dreg: bool = True
    adaptive_contrast: bool | None = None
    loading_structure: str = "exploratory"
    loading_positivity: bool = False
    holdout_fraction: float = 0.25
    r_eval: int = 5000

    def validate(self) -> None:
        if self.estimator not in ("VAE", "IWAE", "AVB", "IWAVB"):
            raise ConfigError(f"estimator: unknown kind {self.estimator!r}")
        if self.n_factors < 1:
            raise ConfigError("n_factors: must be >= 1")
        if self.R < 1 or (self.estimator == "VAE" and self.R != 1):
            raise ConfigError("R: must be >= 1 (and exactly 1 for VAE)")
        if self.S < 1:
            raise ConfigError("S: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.base_lr < 0 or self.disc_base_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.max_lr_factor < 1:
            raise ConfigError("max_lr_factor: must be >= 1")
        if self.clr_step_size < 1:
            raise ConfigError("clr_step_size: must be >= 1")
        if self.window < 1 or self.patience < 1:
            raise ConfigError("window and patience must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations: must be >= 1")
        if self.loading_structure not in ("exploratory", "simple"):
            raise ConfigError(f"loading_structure: {self.loading_structure!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction: must be in (0, 1)")
        if self.r_eval < 1:
            raise ConfigError("r_eval: must be >= 1")

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(kind=self.estimator, R=self.R, S=self.S,
                               adaptive_contrast=self.adaptive_contrast,
                               dreg=self.dreg)

    def resolved_encoder_hidden(self) -> list[int]:
        if self.encoder_hidden is not None:
            return list(self.encoder_hidden)
        return [128] if self.estimator in ("AVB", "IWAVB") else [100]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class FitState:
    config: FitConfig
    est: EstimatorConfig
    params: GrmParams
    encoder: GaussianEncoder | BlackBoxEncoder
    disc: Discriminator | None
    opt_theta: AdamW
    opt_phi: AdamW
    opt_psi: AdamW | None
    noise_rng: np.random.Generator
    t: int = 0


@dataclass
class FitResult:
    params: GrmParams
    encoder: GaussianEncoder | BlackBoxEncoder
    disc: Discriminator | None
    trace: dict
    status: str
    iterations: int
    wall_time: float
    config: FitConfig
    feature_missing_block: bool

    def to_json_dict(self) -> dict:
        """Deterministic artifact: everything except wall-clock time (which
        lives in the run manifest so reruns stay byte-identical)."""
        return {
            "schema_version": 1,
            "estimator": self.config.estimator,
            "config": self.config.to_dict(),
            "params": self.params.to_dict(),
            "networks": {
                "encoder": self.encoder.to_dict(),
                "discriminator": self.disc.to_dict() if self.disc is not None else None,
                "feature_missing_block": self.feature_missing_block,
            },
            "trace": self.trace,
            "convergence": {"status": self.status, "iterations": self.iterations},
        }


def split_holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/holdout split; |holdout| = round(fraction * n)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("holdout fraction must be in (0, 1)")
    perm = substream(seed, "holdout").permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def _build_networks(config: FitConfig, feat_dim: int, rng: np.random.Generator):
    P = config.n_factors
    hidden = config.resolved_encoder_hidden()
    if config.estimator in ("VAE", "IWAE"):
        encoder = GaussianEncoder.build(feat_dim, hidden, P, rng)
        disc = None
    else:
        noise_dim = config.noise_dim if config.noise_dim is not None else P
        encoder = BlackBoxEncoder.build(feat_dim, hidden, P, noise_dim, rng)
        disc = Discriminator.build(feat_dim, P, list(config.disc_hidden), rng)
    return encoder, disc


def init_state(responses: ResponseMatrix, config: FitConfig) -> tuple[FitState, np.ndarray, bool]:
    """Parameters, networks and optimizers for a fresh fit; returns the
    encoded feature matrix alongside the state."""
    config.validate()
    est = config.estimator_config()
    M = responses.n_items
    P = config.n_factors
    if config.loading_structure == "simple":
        mask = simple_structure_mask(M, P)
    else:
        mask = np.ones((M, P))
    params = init_params(M, P, responses.categories, seed=config.seed,
                         loading_mask=mask, loading_positivity=config.loading_positivity)
    feats, has_missing = encode_responses(responses.data, responses.categories)
    encoder, disc = _build_networks(config, feats.shape[1], substream(config.seed, "net-init"))
    kw = dict(beta1=config.beta1, beta2=config.beta2,
              weight_decay=config.weight_decay, eps=config.eps_stab)
    state = FitState(
        config=config, est=est, params=params, encoder=encoder, disc=disc,
        opt_theta=AdamW(params.parameters(), **kw),
        opt_phi=AdamW(encoder.parameters(), **kw),
        opt_psi=AdamW(disc.parameters(), **kw) if disc is not None else None,
        noise_rng=substream(config.seed, "noise"),
    )
    return state, feats, has_missing


def training_step(state: FitState, x_batch: np.ndarray, feats_batch: np.ndarray,
                  lr_gen: float, lr_disc: float) -> dict:
    """One optimizer step on a mini-batch; returns diagnostics.

    Gradients: theta and phi ascend the estimator objective (IW-ELBO or
    ELBO, DReG surrogate for phi when enabled); psi descends the
    discriminator classification loss.  With zero learning rates the state
    is a fixed point.
    """
    est = state.est
    params = state.params
    encoder = state.encoder
    b = x_batch.shape[0]
    R, S = est.R, est.S
    tile = R * S
    P = encoder.latent_dim
    rng = state.noise_rng

    state.opt_theta.zero_grad()
    state.opt_phi.zero_grad()
    if state.opt_psi is not None:
        state.opt_psi.zero_grad()

    if est.kind == "VAE":
        u = rng.standard_normal((b * S, P))
        tape = Tape()
        per = elbo_gaussian(tape, x_batch, feats_batch, encoder, params, u, S=S, kl="closed")
        root = dk.mul(tape, dk.tmean(tape, per), -1.0)
        tape.backward(root)
        diag = {"iw_elbo": float(per.data.mean()), "disc_loss": math.nan}
    elif est.kind == "IWAE":
        u = rng.standard_normal((b * tile, P))
        if est.dreg:
            tape1 = Tape()
            g1 = gaussian_log_weights(tape1, x_batch, feats_batch, encoder, params,
                                      R, S, u, stop_q_params=True, frozen_decoder=True)
            w_tilde = normalized_weights(g1["log_w"].data.reshape(b * S, R))
            sur = dreg_phi_surrogate(tape1, g1["log_w"], w_tilde, b, S)
            tape1.backward(dk.mul(tape1, sur, -1.0))

            tape2 = Tape()
            eff = params.effective(tape2)
            sel = response_selectors(x_batch, params.categories)
            logp = grm_mod.joint_logprob(tape2, eff, dk.const(g1["z"].data), sel, tile=tile)
            log_w = dk.sub(tape2, logp, dk.const(g1["logq"].data))
            per = iw_elbo_from_log_w(tape2, log_w, b, R, S)
            tape2.backward(dk.mul(tape2, dk.tmean(tape2, per), -1.0))
        else:
            tape = Tape()
            g1 = gaussian_log_weights(tape, x_batch, feats_batch, encoder, params, R, S, u)
            per = iw_elbo_from_log_w(tape, g1["log_w"], b, R, S)
            tape.backward(dk.mul(tape, dk.tmean(tape, per), -1.0))
        diag = {"iw_elbo": float(per.data.mean()), "disc_loss": math.nan}
    else:  # AVB / IWAVB
        eps = rng.standard_normal((b * tile, encoder.noise_dim))
        zeta = rng.standard_normal((b * tile, P))
        moment_eps = None
        if est.adaptive_contrast and tile < 8:
            moment_eps = rng.standard_normal((b * (8 - tile), encoder.noise_dim))

        # pass 1: encoder gradients only (decoder and discriminator frozen)
        tape1 = Tape()
        graph1, bundle = avb_log_weights(
            tape1, x_batch, feats_batch, encoder, state.disc, params, est, eps,
            moment_eps=moment_eps, frozen_disc=True, frozen_decoder=True)
        if est.dreg:
            sur = dreg_phi_surrogate(tape1, graph1["log_w"], bundle.w_tilde, b, S)
        else:
            sur = dk.tmean(tape1, iw_elbo_from_log_w(tape1, graph1["log_w"], b, R, S))
        tape1.backward(dk.mul(tape1, sur, -1.0))

        # pass 2: decoder + discriminator on the same draws, held constant
        tape2 = Tape()
        eff2 = params.effective(tape2)
        sel = response_selectors(x_batch, params.categories)
        z_const = dk.const(bundle.z)
        if est.adaptive_contrast:
            # the surrogate log q is entirely constant w.r.t. theta
            logp2 = grm_mod.joint_logprob(tape2, eff2, z_const, sel, tile=tile)
            log_w2 = dk.sub(tape2, logp2, dk.const(graph1["logq"].data))
        else:
            # prior terms cancel between log p(x,z) and the q surrogate,
            # so build log w = conditional - T directly (Sigma gets no pull)
            cond2 = grm_mod.conditional_loglik(tape2, eff2, z_const, sel, tile=tile)
            log_w2 = dk.sub(tape2, cond2, dk.const(graph1["t_out"].data))
        per = iw_elbo_from_log_w(tape2, log_w2, b, R, S)
        obj = dk.mul(tape2, dk.tmean(tape2, per), -1.0)
        dloss = avb_discriminator_loss(tape2, state.disc, graph1["feats_t"],
                                       bundle.z_std, zeta)
        tape2.backward(dk.add(tape2, obj, dloss))
        diag = {"iw_elbo": float(per.data.mean()), "disc_loss": float(dloss.item())}

    state.opt_theta.step(lr_gen)
    state.opt_phi.step(lr_gen)
    if state.opt_psi is not None:
        state.opt_psi.step(lr_disc)
    state.t += 1
    diag["lr_encoder"] = lr_gen
    diag["lr_disc"] = lr_disc if state.opt_psi is not None else math.nan
    return diag


def fit(responses: ResponseMatrix, config: FitConfig, step_callback=None) -> FitResult:
    """Train to convergence (windowed patience rule) or the iteration cap."""
    start = time.perf_counter()
    state, feats, has_missing = init_state(responses, config)
    N = responses.n_respondents
    B = min(config.batch_size, N)
    sched_gen = ClrSchedule(config.base_lr, config.base_lr * config.max_lr_factor,
                            config.clr_step_size)
    sched_disc = ClrSchedule(config.disc_base_lr, config.disc_base_lr * config.max_lr_factor,
                             config.clr_step_size)
    monitor = ConvergenceMonitor(patience=config.patience, min_delta=config.min_delta,
                                 window=config.window)
    batch_rng = substream(config.seed, "batches")

    trace = {"iteration": [], "batch_iw_elbo": [], "disc_loss": [],
             "lr_encoder": [], "lr_disc": []}
    window_buf: list[float] = []
    status = "max_iterations"
    perm = batch_rng.permutation(N)
    pos = 0
    iterations = 0

    for t in range(config.max_iterations):
        if pos + B > N:
            perm = batch_rng.permutation(N)
            pos = 0
        idx = perm[pos:pos + B]
        pos += B
        lr_gen = sched_gen.lr(t)
        lr_disc = sched_disc.lr(t)
        diag = training_step(state, responses.data[idx], feats[idx], lr_gen, lr_disc)
        iterations = t + 1
        if not math.isfinite(diag["iw_elbo"]):
            raise NumericalError(
                f"non-finite objective at iteration {t}; last good iteration {t - 1}")
        trace["iteration"].append(t)
        trace["batch_iw_elbo"].append(diag["iw_elbo"])
        trace["disc_loss"].append(diag["disc_loss"])
        trace["lr_encoder"].append(diag["lr_encoder"])
        trace["lr_disc"].append(diag["lr_disc"])
        if step_callback is not None:
            step_callback(state, t)
        window_buf.append(diag["iw_elbo"])
        if len(window_buf) == config.window:
            avg = float(np.mean(window_buf))
            window_buf.clear()
            if monitor.update(avg) == "converged":
                status = "converged"
                break

    return FitResult(params=state.params, encoder=state.encoder, disc=state.disc,
                     trace=trace, status=status, iterations=iterations,
                     wall_time=time.perf_counter() - start, config=config,
                     feature_missing_block=has_missing)
