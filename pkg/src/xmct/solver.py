"""Alternating test-time adaptation / diffusion prediction / cross-modal
refinement reconstruction loop, plus the unimodal baseline (refinement hook
disabled).

Structure of one reverse step at countdown t (mapped onto the trained
schedule by a uniform stride):

1. adapt: Num_steps SGD updates of the denoiser weights on the
   data-consistency loss of K randomly drawn slices,
2. predict: Tweedie estimate followed by a few projected gradient steps on
   ||y - Ax||^2 in image space, clipped to [0, 1],
3. refine: when t is even and above the guard, replace the estimate with the
   cross-modal network output (identity otherwise),
4. renoise to the next level.

The backward pass of the adaptation loss treats the inner data-consistency
steps and the clip as identity (straight-through): gradients flow to the
weights through the Tweedie term only. Updates are plain SGD with a
global-norm gradient cap for stability at high noise levels.

All randomness is derived from (seed, context, t), never from a sequential
stream, so disabling the refinement hook is bit-identical to running it with
an identity model.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets, tomo
from .diffusion import DenoiserParams, NoiseSchedule, as_denoiser_fn, build_denoiser, renoise
from .errors import AdaptationError, ConfigError, ShapeError, SolverAbort
from .metrics import psnr
from .seeding import derive_rng, derive_seed
from .xmodal import TranslationModel, apply_translation_batch, build_translator


@dataclass
class SolverConfig:
    t_prime: int = 10
    num_adapt_steps: int = 10
    adapt_lr: float = 1e-3
    minibatch_k: int = 4
    inner_dc_steps: int = 5
    dc_step_scale: float = 1.0
    grad_clip_norm: float = 10.0
    crossmodal_enabled: bool = False
    crossmodal_period: int = 2
    crossmodal_min_t: int = 2
    fbp_filter: str = "hann"
    predict_chunk: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.t_prime < 1:
            raise ConfigError("solver: t_prime must be >= 1")
        if self.minibatch_k < 1:
            raise ConfigError("solver: minibatch_k must be >= 1")
        if self.num_adapt_steps < 0:
            raise ConfigError("solver: num_adapt_steps must be >= 0")
        if self.adapt_lr < 0:
            raise ConfigError("solver: adapt_lr must be >= 0")
        if self.crossmodal_period < 1:
            raise ConfigError("solver: crossmodal_period must be >= 1")
        if self.inner_dc_steps < 0:
            raise ConfigError("solver: inner_dc_steps must be >= 0")


@dataclass
class StepRecord:
    step: int                 # 1-based loop counter
    t: int                    # algorithm countdown, t_prime .. 1
    sched_index: int          # mapped trained-schedule timestep
    adapt_losses: list
    refine_step: bool         # cadence predicate (pure function of t)
    psnr: float | None = None


@dataclass
class SolverState:
    t: int
    latent: np.ndarray
    theta: DenoiserParams
    trace: list = field(default_factory=list)


def schedule_index(t, sched: NoiseSchedule, t_prime: int) -> int:
    """Uniform stride mapping of solver countdown t onto the trained schedule."""
    if not 0 <= t <= t_prime:
        raise ConfigError(f"solver countdown {t} outside [0, {t_prime}]")
    return (t * sched.timesteps) // t_prime


def refinement_fires(t, config: SolverConfig) -> bool:
    """Cadence predicate: every `crossmodal_period`-th countdown above the
    guard (defaults reproduce: t even and t > 1)."""
    return (t % config.crossmodal_period == 0) and (t >= config.crossmodal_min_t)


def _as_stack(y_main):
    """Accept a list of Sinograms or a raw (depth, angles, bins) array plus
    geometry; return (stack, geometry)."""
    if isinstance(y_main, tomo.Sinogram):
        y_main = [y_main]
    if isinstance(y_main, (list, tuple)):
        geom = y_main[0].geometry
        for s in y_main:
            if s.geometry != geom:
                raise ShapeError("all sinograms in a stack must share geometry")
        return np.stack([s.values for s in y_main]), geom
    raise ConfigError("y_main must be a Sinogram or a sequence of Sinograms")


def init_latent(y_main, geom, sched: NoiseSchedule, t_prime, seed,
                fbp_filter="hann"):
    """Noisy latent at the starting level: scaled FBP plus matched noise."""
    stack, geom_ = (y_main, geom) if isinstance(y_main, np.ndarray) else _as_stack(y_main)
    fbp = tomo.fbp_volume(stack, geom_, fbp_filter)
    idx = schedule_index(t_prime, sched, t_prime)
    eps = derive_rng("solver-init", seed).standard_normal(fbp.shape)
    ab = sched.alpha_bar[idx]
    return np.sqrt(ab) * fbp + np.sqrt(1.0 - ab) * eps


def dc_step_size(geom, scale=1.0) -> float:
    """Step size for gradient descent on ||Ax - y||^2 (Lipschitz-safe)."""
    return scale / (2.0 * tomo.operator_norm_sq(geom))


def _dc_refine(x_batch, y_batch, geom, steps, step_size):
    """Projected gradient descent on the data term, clipped to [0, 1]."""
    x = np.clip(x_batch, 0.0, 1.0)
    for _ in range(steps):
        resid = tomo.project_volume(x, geom) - y_batch
        grad = 2.0 * tomo.backproject_volume(resid, geom)
        x = np.clip(x - step_size * grad, 0.0, 1.0)
    return x


def diff_solver_predict(latent, t_sched, denoiser, y_stack, geom,
                        sched: NoiseSchedule, inner_dc_steps=5,
                        step_size=None, chunk=8):
    """Clean-volume prediction: chunked Tweedie estimate, then image-space
    data-consistency refinement."""
    if t_sched < 1:
        raise ConfigError("diff_solver_predict needs a schedule timestep >= 1")
    latent = np.asarray(latent, dtype=np.float64)
    single = latent.ndim == 2
    lat = latent[None] if single else latent
    ys = y_stack[None] if single else y_stack
    fn = as_denoiser_fn(denoiser)
    ab = sched.alpha_bar[t_sched]
    x0 = np.empty_like(lat)
    for lo in range(0, lat.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        eps = np.asarray(fn(lat[sl].astype(np.float32), t_sched), dtype=np.float64)
        x0[sl] = (lat[sl] - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    out = _dc_refine(x0, ys, geom, inner_dc_steps,
                     dc_step_size(geom) if step_size is None else step_size)
    return out[0] if single else out


def data_consistency_loss(x_batch, y_batch, theta, t_sched, geom,
                          sched: NoiseSchedule, inner_dc_steps=5,
                          step_size=None) -> float:
    """Mean over the batch of ||y_i - A z_i||^2 where z is the solver's
    prediction from slice i."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 3 or x_batch.shape[0] != np.asarray(y_batch).shape[0]:
        raise ShapeError("x_batch and y_batch must be matching 3D stacks")
    z = diff_solver_predict(x_batch, t_sched, theta, y_batch, geom, sched,
                            inner_dc_steps, step_size, chunk=x_batch.shape[0])
    resid = tomo.project_volume(z, geom) - y_batch
    return float(np.sum(resid ** 2) / x_batch.shape[0])


def _clip_gradient(flat, max_norm):
    norm = float(np.linalg.norm(flat))
    if max_norm > 0 and norm > max_norm:
        return flat * (max_norm / norm), norm
    return flat, norm


def _adapt_net(net, latent, y_stack, t, t_sched, geom, sched, config, step_size):
    """Run Num_steps adaptation updates on the live net; returns loss log.

    Straight-through gradient: forward builds the Tweedie estimate on the
    tape; the refinement (projected DC steps + clip) happens outside the
    tape and its image-space gradient 2/K * A^T(Az - y) is injected back at
    the Tweedie node.
    """
    depth = latent.shape[0]
    if config.minibatch_k > depth:
        raise ConfigError(
            f"solver: minibatch_k {config.minibatch_k} exceeds slice count {depth}")
    params = net.params()
    losses = []
    ab = sched.alpha_bar[t_sched]
    sq, s1 = np.sqrt(ab), np.sqrt(1.0 - ab)
    for i in range(1, config.num_adapt_steps + 1):
        idx = np.sort(derive_rng(config.seed, "mc", t, i).choice(
            depth, size=config.minibatch_k, replace=False))
        xb = latent[idx]
        yb = y_stack[idx]
        xb32 = xb.astype(np.float32)
        ad.zero_grad(params)
        eps_t = net(xb32, t_sched)
        x0_t = ad.scale(ad.sub(ad.leaf(xb32),
                               ad.scale(ad.reshape(eps_t, xb32.shape), s1)), 1.0 / sq)
        x0 = x0_t.data.astype(np.float64)
        z = _dc_refine(x0, yb, geom, config.inner_dc_steps, step_size)
        resid = tomo.project_volume(z, geom) - yb
        losses.append(float(np.sum(resid ** 2) / config.minibatch_k))
        if config.adapt_lr == 0.0:
            continue
        g_img = (2.0 / config.minibatch_k) * tomo.backproject_volume(resid, geom)
        # straight-through covers the DC refinement only; the clip keeps its
        # true (gating) Jacobian, otherwise saturated pixels would inject
        # gradient with no feedback on the loss and the weights run away
        g_img = g_img * ((x0 > 0.0) & (x0 < 1.0))
        ad.dot_with_const(x0_t, g_img.astype(np.float32)).backward()
        flat_g = np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for p in params])
        if not np.all(np.isfinite(flat_g)):
            raise AdaptationError(f"non-finite adaptation gradient at inner step {i}",
                                  step=i, last_theta=nets.pack(net))
        flat_g, _ = _clip_gradient(flat_g, config.grad_clip_norm)
        nets.unpack(net, nets.pack(net) - np.float32(config.adapt_lr) * flat_g)
    return losses


def adapt_weights(state: SolverState, y_main, config: SolverConfig, *,
                  geom=None, sched: NoiseSchedule):
    """Spec surface over `_adapt_net`: takes the solver state, returns the
    adapted parameter vector and the per-step loss log."""
    y_stack, geom_ = (y_main, geom) if isinstance(y_main, np.ndarray) else _as_stack(y_main)
    net = build_denoiser(state.theta)
    t_sched = schedule_index(state.t, sched, config.t_prime)
    losses = _adapt_net(net, state.latent, y_stack, state.t, t_sched, geom_,
                        sched, config, dc_step_size(geom_, config.dc_step_scale))
    return DenoiserParams(arch=dict(state.theta.arch), theta=nets.pack(net)), losses


def _refine_crossmodal(x0, y_aux_image, model, chunk):
    if isinstance(model, TranslationModel):
        net = build_translator(model)
        out = np.empty_like(x0)
        for lo in range(0, x0.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            out[sl] = apply_translation_batch(model, x0[sl], y_aux_image[sl], net=net)
        return out
    return np.asarray(model(x0, y_aux_image), dtype=np.float64)


def reconstruct(y_main, y_aux_image, theta0: DenoiserParams,
                config: SolverConfig, xmodal_model=None, *,
                sched: NoiseSchedule, ground_truth=None):
    """Full reverse loop; returns (volume, SolverState with per-step trace).

    `xmodal_model` may be a TranslationModel or any callable
    (estimate_stack, aux_stack) -> refined_stack. With
    config.crossmodal_enabled = False the refinement branch is never taken
    and the run is exactly the unimodal baseline.
    """
    y_stack, geom = _as_stack(y_main)
    if config.crossmodal_enabled:
        if xmodal_model is None or y_aux_image is None:
            raise ConfigError(
                "crossmodal_enabled requires both xmodal_model and y_aux_image")
        y_aux_image = np.asarray(y_aux_image, dtype=np.float64)
        if y_aux_image.shape[0] != y_stack.shape[0]:
            raise ShapeError("y_aux_image depth does not match y_main")

    net = build_denoiser(theta0)
    step_size = dc_step_size(geom, config.dc_step_scale)
    latent = init_latent(y_stack, geom, sched, config.t_prime, config.seed,
                         config.fbp_filter)
    state = SolverState(t=config.t_prime, latent=latent, theta=theta0.copy())

    for step, t in enumerate(range(config.t_prime, 0, -1), start=1):
        t_sched = schedule_index(t, sched, config.t_prime)
        try:
            losses = _adapt_net(net, state.latent, y_stack, t, t_sched, geom,
                                sched, config, step_size)
            x0 = diff_solver_predict(state.latent, t_sched, net, y_stack, geom,
                                     sched, config.inner_dc_steps, step_size,
                                     config.predict_chunk)
            fires = refinement_fires(t, config)
            if fires and config.crossmodal_enabled:
                x0 = _refine_crossmodal(x0, y_aux_image, xmodal_model,
                                        config.predict_chunk)
            next_sched = schedule_index(t - 1, sched, config.t_prime)
            state.latent = renoise(x0, next_sched,
                                   derive_seed(config.seed, "renoise", t), sched)
        except (AdaptationError, ShapeError) as exc:
            state.theta = DenoiserParams(dict(theta0.arch), nets.pack(net))
            raise SolverAbort(f"reconstruction aborted at countdown t={t}: {exc}",
                              state=state) from exc
        state.t = t - 1
        quality = None
        if ground_truth is not None:
            quality = float(np.mean([psnr(x0[d], ground_truth[d])
                                     for d in range(x0.shape[0])]))
        state.trace.append(StepRecord(step=step, t=t, sched_index=t_sched,
                                      adapt_losses=losses, refine_step=fires,
                                      psnr=quality))
    state.theta = DenoiserParams(dict(theta0.arch), nets.pack(net))
    return state.latent, state
