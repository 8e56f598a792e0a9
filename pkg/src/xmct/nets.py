"""Network definitions on top of the autodiff ops.

Two architectures share one layer vocabulary:

* DenoiserNet: small U-shaped noise predictor with sinusoidal timestep
  embedding injected as a per-channel bias in every residual block
  (~100k parameters at the default width).
* TranslationNet: 2-in/1-out convolutional encoder-decoder with a sigmoid
  output squash, used for cross-modal refinement.

Parameters live in an ordered list of Tensors; `pack`/`unpack` convert to and
from a single flat vector for checkpoints and finite-difference tests.
"""

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .seeding import derive_rng


def sinusoidal_embedding(t, dim, dtype=np.float32):
    """Standard sin/cos positional features of integer timesteps t (N,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class Conv:
    def __init__(self, rng, c_in, c_out, dtype, k=3, w_scale=1.0):
        std = w_scale * np.sqrt(2.0 / (c_in * k * k))
        self.w = ad.Tensor(rng.normal(0.0, std, (k, k, c_in, c_out)).astype(dtype),
                           requires_grad=True)
        self.b = ad.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class Dense:
    def __init__(self, rng, d_in, d_out, dtype):
        std = np.sqrt(2.0 / d_in)
        self.w = ad.Tensor(rng.normal(0.0, std, (d_in, d_out)).astype(dtype),
                           requires_grad=True)
        self.b = ad.Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.dense(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class ResBlock:
    """conv-silu-conv-silu with residual add; optional timestep bias.

    The second conv starts at zero so every block is the identity at
    initialization; activations then stay bounded regardless of depth, which
    keeps plain-SGD training stable."""

    def __init__(self, rng, channels, dtype, emb_dim=None):
        self.conv1 = Conv(rng, channels, channels, dtype)
        self.conv2 = Conv(rng, channels, channels, dtype, w_scale=0.0)
        self.time = Dense(rng, emb_dim, channels, dtype) if emb_dim else None

    def __call__(self, h, emb=None):
        y = self.conv1(h)
        if self.time is not None:
            tb = self.time(emb)
            y = ad.add(y, ad.reshape(tb, (tb.shape[0], 1, 1, tb.shape[1])))
        y = ad.silu(y)
        y = ad.silu(self.conv2(y))
        return ad.add(y, h)

    def params(self):
        out = self.conv1.params() + self.conv2.params()
        if self.time is not None:
            out += self.time.params()
        return out


class DenoiserNet:
    """U-shaped convolutional noise predictor conditioned on the timestep."""

    def __init__(self, base=12, levels=3, emb_dim=24, in_ch=1,
                 dtype=np.float32, seed=0):
        if levels < 2:
            raise ConfigError("denoiser: levels must be >= 2")
        self.arch = {"kind": "denoiser", "base": int(base), "levels": int(levels),
                     "emb_dim": int(emb_dim), "in_ch": int(in_ch)}
        self.dtype = np.dtype(dtype)
        rng = derive_rng(seed, "denoiser-init")
        chans = [base * (1 << l) for l in range(levels)]
        self.emb_dim = emb_dim
        self.emb1 = Dense(rng, emb_dim, emb_dim, dtype)
        self.emb2 = Dense(rng, emb_dim, emb_dim, dtype)
        self.stem = Conv(rng, in_ch, chans[0], dtype)
        self.enc_blocks = [ResBlock(rng, chans[0], dtype, emb_dim)]
        self.down_convs = []
        for l in range(1, levels):
            self.down_convs.append(Conv(rng, chans[l - 1], chans[l], dtype))
            self.enc_blocks.append(ResBlock(rng, chans[l], dtype, emb_dim))
        self.up_convs = []
        self.dec_blocks = []
        for l in range(levels - 2, -1, -1):
            self.up_convs.append(Conv(rng, chans[l + 1], chans[l], dtype))
            self.dec_blocks.append(ResBlock(rng, chans[l], dtype, emb_dim))
        self.head = Conv(rng, chans[0], in_ch, dtype, w_scale=0.1)

    def params(self):
        out = self.emb1.params() + self.emb2.params() + self.stem.params()
        for blk in self.enc_blocks:
            out += blk.params()
        for c in self.down_convs:
            out += c.params()
        for c, blk in zip(self.up_convs, self.dec_blocks):
            out += c.params() + blk.params()
        return out + self.head.params()

    def __call__(self, x, t):
        """x: (N, H, W) image batch (array or NHWC Tensor); t: scalar or (N,)
        timesteps. Returns the predicted noise as an (N, H, W, 1) Tensor."""
        if not isinstance(x, ad.Tensor):
            x = np.asarray(x, dtype=self.dtype)
            if x.ndim == 3:
                x = x[..., None]
            x = ad.leaf(x)
        n = x.shape[0]
        t = np.broadcast_to(np.atleast_1d(t), (n,))
        emb = ad.leaf(sinusoidal_embedding(t, self.emb_dim, self.dtype))
        emb = ad.silu(self.emb1(emb))
        emb = ad.silu(self.emb2(emb))
        h = self.stem(x)
        skips = []
        h = self.enc_blocks[0](h, emb)
        for conv, blk in zip(self.down_convs, self.enc_blocks[1:]):
            skips.append(h)
            h = conv(ad.avg_pool2(h))
            h = blk(h, emb)
        for conv, blk in zip(self.up_convs, self.dec_blocks):
            h = conv(ad.upsample2(h))
            h = ad.add(h, skips.pop())
            h = blk(h, emb)
        return self.head(h)

    def predict(self, x, t):
        """Inference convenience: (N, H, W) in, (N, H, W) out."""
        return self(x, t).data[..., 0]


class TranslationNet:
    """Encoder-decoder mapping (estimate, aux) channels to a refined image."""

    def __init__(self, base=16, in_ch=2, dtype=np.float32, seed=0):
        self.arch = {"kind": "translator", "base": int(base), "in_ch": int(in_ch)}
        self.dtype = np.dtype(dtype)
        rng = derive_rng(seed, "translator-init")
        self.stem = Conv(rng, in_ch, base, dtype)
        self.enc = ResBlock(rng, base, dtype)
        self.down = Conv(rng, base, 2 * base, dtype)
        self.mid1 = ResBlock(rng, 2 * base, dtype)
        self.mid2 = ResBlock(rng, 2 * base, dtype)
        self.up = Conv(rng, 2 * base, base, dtype)
        self.dec = ResBlock(rng, base, dtype)
        self.head = Conv(rng, base, 1, dtype, w_scale=0.1)
        # start the sigmoid near the dark background that dominates CT
        # slices; a 0.5 start drives the whole map into saturation under L1
        self.head.b.data = np.full(1, -2.2, dtype=dtype)

    def params(self):
        out = self.stem.params() + self.enc.params() + self.down.params()
        out += self.mid1.params() + self.mid2.params() + self.up.params()
        return out + self.dec.params() + self.head.params()

    def __call__(self, estimate, aux=None):
        """Either a prepared (N, H, W, 2) Tensor/array, or two (N, H, W)
        batches in (estimate, aux) channel order."""
        if aux is not None:
            x = np.stack([np.asarray(estimate, dtype=self.dtype),
                          np.asarray(aux, dtype=self.dtype)], axis=-1)
        else:
            x = estimate
        if not isinstance(x, ad.Tensor):
            x = ad.leaf(np.asarray(x, dtype=self.dtype))
        h = ad.silu(self.stem(x))
        h = self.enc(h)
        d = self.down(ad.avg_pool2(h))
        d = self.mid2(self.mid1(d))
        u = self.up(ad.upsample2(d))
        u = self.dec(ad.add(u, h))
        return ad.sigmoid(self.head(u))

    def predict(self, estimate, aux):
        """(N, H, W) batches in, (N, H, W) refined batch out."""
        return self(estimate, aux).data[..., 0]


def build_net(arch, dtype=np.float32, seed=0):
    kind = arch.get("kind")
    if kind == "denoiser":
        return DenoiserNet(base=arch["base"], levels=arch["levels"],
                           emb_dim=arch["emb_dim"], in_ch=arch["in_ch"],
                           dtype=dtype, seed=seed)
    if kind == "translator":
        return TranslationNet(base=arch["base"], in_ch=arch["in_ch"],
                              dtype=dtype, seed=seed)
    raise ConfigError(f"unknown architecture kind {kind!r}")


def num_params(net):
    return sum(p.data.size for p in net.params())


def pack(net) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in net.params()])


def unpack(net, flat):
    flat = np.asarray(flat, dtype=net.dtype)
    if flat.size != num_params(net):
        raise ConfigError(
            f"parameter vector has {flat.size} entries, architecture needs {num_params(net)}")
    pos = 0
    for p in net.params():
        n = p.data.size
        p.data = flat[pos:pos + n].reshape(p.data.shape).copy()
        pos += n


def clip_gradients(params, max_norm):
    """Scale all gradients so their global norm is at most max_norm.
    Returns the pre-clip norm. No-op when max_norm <= 0."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class SGD:
    """Plain SGD with optional momentum. Deterministic given the call order."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self):
        if self.lr == 0.0:
            return
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.velocity is not None:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            p.data = p.data - p.data.dtype.type(self.lr) * g

    def zero_grad(self):
        ad.zero_grad(self.params)

    def state_vector(self):
        """Momentum buffers flattened, for checkpoint resume."""
        if self.velocity is None:
            return None
        return np.concatenate([v.ravel() for v in self.velocity])

    def load_state_vector(self, flat):
        if self.velocity is None:
            return
        pos = 0
        for i, p in enumerate(self.params):
            n = p.data.size
            self.velocity[i] = np.asarray(flat[pos:pos + n],
                                          dtype=p.data.dtype).reshape(p.data.shape).copy()
            pos += n
