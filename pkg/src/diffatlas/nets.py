"""Noise-predictor U-Net (joint / conditional modes) and the feedforward
segmentation net.

Both nets share one backbone: two stride-2 downsamplings with encoder widths
base/2*base/4*base, two conv blocks per level, skip concatenation on the way
up, channel_norm + silu per block. The noise predictor adds a sinusoidal
timestep embedding projected per block; the final 1x1 conv is zero-initialized
so an untrained model outputs exactly zero.
"""

import math

import numpy as np

from .rng import Rng
from .tensor import (
    Tape,
    Tensor,
    activate,
    bias_add_nc,
    channel_means,
    channel_norm,
    concat_channels,
    concat_features,
    conv2d,
    linear,
    upsample2x,
)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; emb[2i] = sin(t / 10000^(2i/dim)), emb[2i+1] = cos.

    Accepts a scalar timestep (returns [dim]) or a sequence (returns [N, dim]).
    """
    if dim % 2 != 0:
        raise ValueError(f"time_embedding dim must be even, got {dim}")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, 2.0 * i / dim)
    ang = ts[:, None] * freq[None, :]
    emb = np.empty((ts.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    emb = emb.astype(np.float32)
    return emb[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else emb


class _Block:
    """conv3x3 -> channel_norm -> (+ time projection) -> silu."""

    def __init__(self, name, cin, cout, stride, temb_dim, rng, params):
        self.stride = stride
        self.temb_dim = temb_dim
        fan_in = cin * 9
        self.w = Tensor(rng.gaussian((cout, cin, 3, 3)) * np.float32(math.sqrt(2.0 / fan_in)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.gain = Tensor(np.ones(cout, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        params[f"{name}.w"] = self.w
        params[f"{name}.b"] = self.b
        params[f"{name}.gain"] = self.gain
        params[f"{name}.bias"] = self.bias
        if temb_dim:
            self.tw = Tensor(rng.gaussian((cout, temb_dim)) * np.float32(math.sqrt(1.0 / temb_dim)),
                             requires_grad=True)
            self.tb = Tensor(np.zeros(cout, np.float32), requires_grad=True)
            params[f"{name}.tw"] = self.tw
            params[f"{name}.tb"] = self.tb

    def __call__(self, x, temb, tape):
        y = conv2d(x, self.w, self.b, pad=1, stride=self.stride, tape=tape)
        y = channel_norm(y, self.gain, self.bias, tape)
        if self.temb_dim:
            proj = linear(temb, self.tw, self.tb, tape)
            y = bias_add_nc(y, proj, tape)
        return activate(y, "silu", tape)


class _Backbone:
    def __init__(self, in_channels, out_channels, base_width, temb_dim, rng):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.base_width = base_width
        self.temb_dim = temb_dim
        self.params = {}
        p = self.params
        w0, w1, w2 = base_width, base_width * 2, base_width * 4
        blk = lambda name, cin, cout, stride=1: _Block(name, cin, cout, stride, temb_dim, rng, p)
        self.enc0a = blk("enc0a", in_channels, w0)
        self.enc0b = blk("enc0b", w0, w0)
        self.down0 = blk("down0", w0, w1, stride=2)
        self.enc1a = blk("enc1a", w1, w1)
        self.enc1b = blk("enc1b", w1, w1)
        self.down1 = blk("down1", w1, w2, stride=2)
        self.mida = blk("mida", w2, w2)
        self.midb = blk("midb", w2, w2)
        self.up1 = blk("up1", w2, w1)
        self.dec1 = blk("dec1", w1 * 2, w1)
        self.up0 = blk("up0", w1, w0)
        self.dec0 = blk("dec0", w0 * 2, w0)
        # zero-initialized 1x1 head: untrained output is exactly zero
        self.head_w = Tensor(np.zeros((out_channels, w0, 1, 1), np.float32), requires_grad=True)
        self.head_b = Tensor(np.zeros(out_channels, np.float32), requires_grad=True)
        p["head.w"] = self.head_w
        p["head.b"] = self.head_b
        if temb_dim:
            # global-mean bypass: the per-map spatial normalization in every
            # block erases spatial-constant input components, so the reverse
            # chain could not regulate channel means without this path.
            # Zero-init of the second layer keeps the untrained output zero.
            gdim = in_channels + temb_dim
            gh = 32
            self.gm_w1 = Tensor(rng.gaussian((gh, gdim)) * np.float32(math.sqrt(2.0 / gdim)),
                                requires_grad=True)
            self.gm_b1 = Tensor(np.zeros(gh, np.float32), requires_grad=True)
            self.gm_w2 = Tensor(np.zeros((out_channels, gh), np.float32), requires_grad=True)
            self.gm_b2 = Tensor(np.zeros(out_channels, np.float32), requires_grad=True)
            p["gmean.w1"] = self.gm_w1
            p["gmean.b1"] = self.gm_b1
            p["gmean.w2"] = self.gm_w2
            p["gmean.b2"] = self.gm_b2

    def forward(self, x: np.ndarray, t=None, tape: Tape = None) -> Tensor:
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected [N,{self.in_channels},H,W] input, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {x.shape[2:]}")
        n = x.shape[0]
        xt = Tensor(x.astype(np.float32, copy=False))
        temb = None
        if self.temb_dim:
            ts = np.full(n, t, dtype=np.float64) if np.isscalar(t) else np.asarray(t, np.float64)
            if ts.shape != (n,):
                raise ValueError(f"need one timestep per sample, got {ts.shape} for N={n}")
            temb = Tensor(time_embedding(ts, self.temb_dim))
        e0 = self.enc0b(self.enc0a(xt, temb, tape), temb, tape)
        e1 = self.enc1b(self.enc1a(self.down0(e0, temb, tape), temb, tape), temb, tape)
        m = self.midb(self.mida(self.down1(e1, temb, tape), temb, tape), temb, tape)
        d1 = self.up1(upsample2x(m, tape), temb, tape)
        d1 = self.dec1(concat_channels(d1, e1, tape), temb, tape)
        d0 = self.up0(upsample2x(d1, tape), temb, tape)
        d0 = self.dec0(concat_channels(d0, e0, tape), temb, tape)
        out = conv2d(d0, self.head_w, self.head_b, pad=0, stride=1, tape=tape)
        if self.temb_dim:
            gfeat = concat_features(channel_means(xt, tape), temb, tape)
            gh = activate(linear(gfeat, self.gm_w1, self.gm_b1, tape), "silu", tape)
            out = bias_add_nc(out, linear(gh, self.gm_w2, self.gm_b2, tape), tape)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class NoisePredictor:
    """eps-prediction U-Net over the (image, SDF-channels) stack.

    joint mode: 1+C in, 1+C out. conditional mode: 1+C in (clean image as
    conditioning channel), C out (noise on the SDF channels only).
    """

    def __init__(self, mode: str, num_classes: int, base_width: int = 16,
                 time_embed_dim: int = 32, seed: int = 0):
        if mode not in ("joint", "conditional"):
            raise ValueError(f"mode must be joint or conditional, got {mode!r}")
        self.mode = mode
        self.num_classes = num_classes
        self.base_width = base_width
        self.time_embed_dim = time_embed_dim
        self.in_channels = 1 + num_classes
        self.out_channels = 1 + num_classes if mode == "joint" else num_classes
        self.net = _Backbone(self.in_channels, self.out_channels, base_width,
                             time_embed_dim, Rng(seed).split("init"))
        self.params = self.net.params

    def forward(self, x, t, tape: Tape = None) -> Tensor:
        return self.net.forward(x, t, tape)

    def param_count(self) -> int:
        return self.net.param_count()


class SegNet:
    """Deterministic image -> per-class-logit map (channel 0 = background)."""

    def __init__(self, num_classes: int, base_width: int = 16, seed: int = 0):
        self.num_classes = num_classes
        self.base_width = base_width
        self.in_channels = 1
        self.out_channels = num_classes + 1
        self.net = _Backbone(1, self.out_channels, base_width, 0, Rng(seed).split("init"))
        self.params = self.net.params

    def forward(self, image, tape: Tape = None) -> Tensor:
        x = np.asarray(image)
        if x.ndim == 3:
            x = x[None]
        return self.net.forward(x, None, tape)

    def param_count(self) -> int:
        return self.net.param_count()


def segnet_forward(model: SegNet, image: np.ndarray) -> np.ndarray:
    """Logits [C+1,H,W] for a single [1,H,W] image."""
    return model.forward(image[None] if image.ndim == 3 else image).data[0]
