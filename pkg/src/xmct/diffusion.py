"""Denoising diffusion prior: schedule, noising, training, Tweedie, renoising.

The schedule stores arrays of length T+1 with index 0 reserved for the clean
boundary (alpha_bar[0] = 1), so `noising_sample(x, 0, ...)` is the identity
and timestep t in [1, T] indexes the t-th diffusion step directly.

Learned math runs in float32; the denoiser can be swapped for any callable
(x_batch, t) -> eps_batch, which is how oracle denoisers are injected in
tests.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, DomainError, ShapeError, TrainingError
from .seeding import derive_rng

DEFAULT_ARCH = {"kind": "denoiser", "base": 12, "levels": 3, "emb_dim": 24, "in_ch": 1}


@dataclass
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray          # beta[0] unused (0), beta[1..T] in (0, 1)
    alpha: np.ndarray         # 1 - beta
    alpha_bar: np.ndarray     # running product, alpha_bar[0] = 1

    def describe(self):
        return {"timesteps": int(self.timesteps),
                "beta_start": float(self.beta[1]),
                "beta_end": float(self.beta[self.timesteps])}


def make_schedule(timesteps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if timesteps < 1:
        raise ConfigError("schedule: timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"schedule: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.zeros(timesteps + 1)
    beta[1:] = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, sched, lo=0):
    t = int(t)
    if not lo <= t <= sched.timesteps:
        raise DomainError(f"timestep {t} outside [{lo}, {sched.timesteps}]")
    return t


def noising_sample(x0, t, eps, sched: NoiseSchedule):
    """sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps."""
    t = _check_t(t, sched)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} disagree")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def renoise(x0_est, t_next, seed, sched: NoiseSchedule):
    """Re-inject noise at level t_next with a seed-derived draw; t_next = 0
    returns the estimate unchanged."""
    t_next = _check_t(t_next, sched)
    x0_est = np.asarray(x0_est)
    if t_next == 0:
        return x0_est
    eps = derive_rng("renoise", seed).standard_normal(x0_est.shape)
    return noising_sample(x0_est, t_next, eps, sched)


@dataclass
class DenoiserParams:
    """Flat float32 parameter vector plus its architecture descriptor."""

    arch: dict
    theta: np.ndarray

    def copy(self):
        return DenoiserParams(arch=dict(self.arch), theta=self.theta.copy())


def build_denoiser(params: DenoiserParams, dtype=np.float32) -> nets.DenoiserNet:
    net = nets.build_net(params.arch, dtype=dtype)
    nets.unpack(net, params.theta)
    return net


def init_denoiser_params(arch=None, seed=0) -> DenoiserParams:
    arch = dict(DEFAULT_ARCH if arch is None else arch)
    net = nets.build_net(arch, seed=seed)
    return DenoiserParams(arch=arch, theta=nets.pack(net))


def as_denoiser_fn(denoiser, dtype=np.float32):
    """Normalize DenoiserParams / net / callable to (x_batch, t) -> eps_batch."""
    if isinstance(denoiser, DenoiserParams):
        net = build_denoiser(denoiser, dtype)
        return lambda xb, t: net.predict(xb, t)
    if isinstance(denoiser, nets.DenoiserNet):
        return lambda xb, t: denoiser.predict(xb, t)
    if callable(denoiser):
        return denoiser
    raise ConfigError(f"cannot interpret {type(denoiser).__name__} as a denoiser")


def tweedie_estimate(xt, t, denoiser, sched: NoiseSchedule):
    """Closed-form clean-image estimate from a noisy latent and the predicted
    noise: (xt - sqrt(1 - alpha_bar[t]) * eps(xt, t)) / sqrt(alpha_bar[t])."""
    t = _check_t(t, sched, lo=1)
    ab = sched.alpha_bar[t]
    if ab == 0.0:
        raise DomainError(f"alpha_bar[{t}] = 0: Tweedie estimate is singular")
    xt = np.asarray(xt)
    batched = xt.ndim == 3
    xb = xt if batched else xt[None]
    eps = np.asarray(as_denoiser_fn(denoiser)(xb.astype(np.float32), t), dtype=np.float64)
    if eps.shape != xb.shape:
        raise ShapeError(f"denoiser returned {eps.shape}, expected {xb.shape}")
    x0 = (xb - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    return x0 if batched else x0[0]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 4
    lr: float = 1e-3
    seed: int = 0
    momentum: float = 0.0     # prior default is momentum-free
    grad_clip: float = 5.0    # global-norm cap keeping plain SGD stable


@dataclass
class TrainResult:
    params: DenoiserParams
    steps: int
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    optimizer_state: np.ndarray | None = None


def train_denoiser(dataset, sched: NoiseSchedule, config: TrainConfig,
                   arch=None, start: TrainResult | None = None) -> TrainResult:
    """Denoising score matching: minimize E ||eps - eps_theta(x_t, t)||^2 by SGD.

    Batch composition, timestep draws and noise draws are all derived from
    (seed, step index), so training resumed from a checkpoint continues the
    exact trajectory of an uninterrupted run.
    """
    stackable = [np.asarray(im, dtype=np.float32) for im in dataset]
    if not stackable:
        raise ConfigError("training dataset is empty")
    images = np.stack(stackable)
    if images.ndim != 3:
        raise ShapeError(f"dataset must stack to (count, H, W), got {images.shape}")
    count = images.shape[0]

    if start is not None:
        arch = start.params.arch
        net = build_denoiser(start.params)
        step = start.steps
    else:
        arch = dict(DEFAULT_ARCH if arch is None else arch)
        net = nets.build_net(arch, seed=derive_rng(config.seed, "init").integers(2 ** 31))
        step = 0
    params = net.params()
    opt = nets.SGD(params, lr=config.lr, momentum=config.momentum)
    if start is not None and start.optimizer_state is not None:
        opt.load_state_vector(start.optimizer_state)

    steps_per_epoch = max(1, (count + config.batch - 1) // config.batch)
    total_steps = config.epochs * steps_per_epoch
    ab = sched.alpha_bar.astype(np.float32)
    step_losses = []
    epoch_losses = []
    epoch_acc = []

    while step < total_steps:
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        order = derive_rng(config.seed, "epoch", epoch).permutation(count)
        idx = order[pos * config.batch:(pos + 1) * config.batch]
        if idx.size == 0:
            idx = order[-config.batch:]
        rng = derive_rng(config.seed, "step", step)
        x0 = images[idx]
        t = rng.integers(1, sched.timesteps + 1, size=idx.size)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        coef = ab[t][:, None, None]
        xt = np.sqrt(coef) * x0 + np.sqrt(1.0 - coef) * eps

        snapshot = nets.pack(net)
        opt.zero_grad()
        loss = ad.mse_loss(net(xt, t), eps[..., None])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingError(
                f"training loss became non-finite at step {step}",
                last_params=DenoiserParams(arch=dict(arch), theta=snapshot), step=step)
        loss.backward()
        nets.clip_gradients(params, config.grad_clip)
        opt.step()
        if not all(np.all(np.isfinite(p.data)) for p in params):
            raise TrainingError(
                f"parameters became non-finite at step {step}",
                last_params=DenoiserParams(arch=dict(arch), theta=snapshot), step=step)
        step_losses.append(loss_val)
        epoch_acc.append(loss_val)
        step += 1
        if step % steps_per_epoch == 0:
            epoch_losses.append(float(np.mean(epoch_acc)))
            epoch_acc = []

    if epoch_acc:
        epoch_losses.append(float(np.mean(epoch_acc)))
    return TrainResult(
        params=DenoiserParams(arch=dict(arch), theta=nets.pack(net)),
        steps=step,
        epoch_losses=epoch_losses,
        step_losses=step_losses,
        optimizer_state=opt.state_vector(),
    )
