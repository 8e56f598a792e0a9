"""Cross-modal consistency network: (estimate, degraded aux) -> ideal main.

Training minimizes pixelwise L1 against the ideal reconstruction, with an
optional least-squares adversarial term (off by default; the regression loss
alone serves the consistency role at desk scale). The model records its
training resolution and refuses to run at any other size rather than
silently resampling.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import psnr
from .seeding import derive_rng

DEFAULT_ARCH = {"kind": "translator", "base": 16, "in_ch": 2}


@dataclass
class TranslationModel:
    """Trained translator: architecture, flat weights, training-config echo."""

    arch: dict
    theta: np.ndarray
    resolution: int
    train_echo: dict = field(default_factory=dict)

    def copy(self):
        return TranslationModel(dict(self.arch), self.theta.copy(),
                                self.resolution, dict(self.train_echo))


def build_translator(model: TranslationModel) -> nets.TranslationNet:
    net = nets.build_net(model.arch)
    nets.unpack(net, model.theta)
    return net


def init_translation_model(resolution, arch=None, seed=0) -> TranslationModel:
    arch = dict(DEFAULT_ARCH if arch is None else arch)
    net = nets.build_net(arch, seed=seed)
    return TranslationModel(arch=arch, theta=nets.pack(net), resolution=int(resolution))


def apply_translation(model: TranslationModel, estimate, aux) -> np.ndarray:
    """Deterministic forward pass; output in [0, 1]."""
    return apply_translation_batch(model, np.asarray(estimate)[None],
                                   np.asarray(aux)[None])[0]


def apply_translation_batch(model: TranslationModel, estimates, auxes,
                            net=None) -> np.ndarray:
    est = np.asarray(estimates)
    aux = np.asarray(auxes)
    expected = (model.resolution, model.resolution)
    if est.ndim != 3 or aux.ndim != 3 or est.shape != aux.shape or est.shape[1:] != expected:
        raise ShapeError(
            f"translator trained at {expected}, got estimate {est.shape} / aux {aux.shape}")
    if net is None:
        net = build_translator(model)
    return net.predict(est, aux).astype(np.float64)


@dataclass
class XmodalTrainConfig:
    epochs: int = 20
    batch: int = 8
    lr: float = 0.03
    momentum: float = 0.0
    adversarial_weight: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class XmodalTrainResult:
    model: TranslationModel
    steps: int
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    optimizer_state: np.ndarray | None = None


class _PatchDiscriminator:
    """Tiny conv discriminator scoring /4-resolution patches (LSGAN)."""

    def __init__(self, seed):
        rng = derive_rng(seed, "disc-init")
        dt = np.float32
        self.c1 = nets.Conv(rng, 2, 12, dt)
        self.c2 = nets.Conv(rng, 12, 24, dt)
        self.c3 = nets.Conv(rng, 24, 1, dt)

    def params(self):
        return self.c1.params() + self.c2.params() + self.c3.params()

    def __call__(self, x):
        h = ad.silu(self.c1(x if isinstance(x, ad.Tensor) else ad.leaf(x)))
        h = ad.silu(self.c2(ad.avg_pool2(h)))
        return self.c3(ad.avg_pool2(h))


def _stack_batch(samples, idx):
    dm = np.stack([samples[i].degraded_main for i in idx]).astype(np.float32)
    da = np.stack([samples[i].degraded_aux for i in idx]).astype(np.float32)
    im = np.stack([samples[i].ideal_main for i in idx]).astype(np.float32)
    return dm, da, im


def train_translation(dataset, config: XmodalTrainConfig, arch=None,
                      start: XmodalTrainResult | None = None) -> XmodalTrainResult:
    """L1 regression (plus optional LSGAN term) from PairedSamples.

    Randomness is derived per (seed, step), so resumed runs reproduce the
    uninterrupted trajectory.
    """
    if not dataset:
        raise ConfigError("translator training dataset is empty")
    if config.adversarial_weight < 0:
        raise ConfigError("adversarial_weight must be >= 0")
    res = dataset[0].ideal_main.shape[0]
    count = len(dataset)

    if start is not None:
        arch = start.model.arch
        net = build_translator(start.model)
        step = start.steps
    else:
        arch = dict(DEFAULT_ARCH if arch is None else arch)
        net = nets.build_net(arch, seed=derive_rng(config.seed, "init").integers(2 ** 31))
        step = 0
    opt = nets.SGD(net.params(), lr=config.lr, momentum=config.momentum)
    if start is not None and start.optimizer_state is not None:
        opt.load_state_vector(start.optimizer_state)

    use_gan = config.adversarial_weight > 0
    if use_gan:
        disc = _PatchDiscriminator(config.seed)
        disc_opt = nets.SGD(disc.params(), lr=config.lr * 0.5, momentum=config.momentum)

    steps_per_epoch = max(1, (count + config.batch - 1) // config.batch)
    total_steps = config.epochs * steps_per_epoch
    step_losses = []
    epoch_losses = []
    acc = []

    while step < total_steps:
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        order = derive_rng(config.seed, "epoch", epoch).permutation(count)
        idx = order[pos * config.batch:(pos + 1) * config.batch]
        if idx.size == 0:
            idx = order[-config.batch:]
        dm, da, im = _stack_batch(dataset, idx)

        snapshot = nets.pack(net)
        opt.zero_grad()
        out = net(dm, da)
        loss = ad.l1_loss(out, im[..., None])
        if use_gan:
            # discriminator update on detached generator output
            fake_in = np.stack([dm, out.data[..., 0]], axis=-1)
            real_in = np.stack([dm, im], axis=-1)
            disc_opt.zero_grad()
            d_loss = ad.add(ad.mse_loss(disc(fake_in), np.zeros((1,), np.float32)),
                            ad.mse_loss(disc(real_in), np.ones((1,), np.float32)))
            d_loss.backward()
            disc_opt.step()
            # generator adversarial term (gradient flows through `out` only)
            g_fake = disc(_pair_channels(dm, out))
            loss = ad.add(loss, ad.scale(
                ad.mse_loss(g_fake, np.ones_like(g_fake.data)), config.adversarial_weight))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingError(
                f"translator loss became non-finite at step {step}",
                last_params=TranslationModel(dict(arch), snapshot, res), step=step)
        loss.backward()
        nets.clip_gradients(net.params(), config.grad_clip)
        opt.step()
        if not all(np.all(np.isfinite(p.data)) for p in net.params()):
            raise TrainingError(
                f"translator parameters became non-finite at step {step}",
                last_params=TranslationModel(dict(arch), snapshot, res), step=step)
        step_losses.append(loss_val)
        acc.append(loss_val)
        step += 1
        if step % steps_per_epoch == 0:
            epoch_losses.append(float(np.mean(acc)))
            acc = []

    if acc:
        epoch_losses.append(float(np.mean(acc)))
    echo = {"epochs": config.epochs, "batch": config.batch, "lr": config.lr,
            "momentum": config.momentum,
            "adversarial_weight": config.adversarial_weight, "seed": config.seed,
            "channel_order": ["estimate", "aux"]}
    model = TranslationModel(arch=dict(arch), theta=nets.pack(net),
                             resolution=res, train_echo=echo)
    return XmodalTrainResult(model=model, steps=step, epoch_losses=epoch_losses,
                             step_losses=step_losses,
                             optimizer_state=opt.state_vector())


def _pair_channels(cond_np, gen_tensor):
    """(N,H,W) condition + (N,H,W,1) generated Tensor -> (N,H,W,2) Tensor with
    gradient flowing only through the generated channel."""
    cond = np.asarray(cond_np, dtype=gen_tensor.data.dtype)
    n, h, w = cond.shape
    base = np.zeros((n, h, w, 2), dtype=gen_tensor.data.dtype)
    base[..., 0] = cond
    mask = np.zeros((1, 1, 1, 2), dtype=gen_tensor.data.dtype)
    mask[..., 1] = 1.0
    wide = ad.mul(_tile2(gen_tensor), ad.leaf(mask))
    return ad.add(wide, ad.leaf(base))


def _tile2(t):
    """(N,H,W,1) -> (N,H,W,2) by duplicating the single channel."""
    data = np.concatenate([t.data, t.data], axis=-1)

    def bw(g):
        if t.requires_grad:
            t._accum(g[..., :1] + g[..., 1:])

    return ad.Tensor(data, (t,), bw)


def validation_split(count, val_fraction, seed):
    """Deterministic (train_idx, val_idx) split."""
    n_val = max(1, int(round(count * val_fraction))) if count > 1 else 0
    order = derive_rng(seed, "val-split").permutation(count)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def validation_gate(model: TranslationModel, val_samples):
    """Per-pair PSNR before/after translation on a validation set."""
    net = build_translator(model)
    before = []
    after = []
    for s in val_samples:
        out = apply_translation_batch(model, s.degraded_main[None],
                                      s.degraded_aux[None], net=net)[0]
        before.append(psnr(s.degraded_main, s.ideal_main))
        after.append(psnr(out, s.ideal_main))
    before = np.asarray(before)
    after = np.asarray(after)
    return {
        "pairs": len(val_samples),
        "frac_improved": float(np.mean(after > before)) if len(before) else 0.0,
        "mean_psnr_before": float(before.mean()) if len(before) else 0.0,
        "mean_psnr_after": float(after.mean()) if len(before) else 0.0,
    }
