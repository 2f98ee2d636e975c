"""Noise schedule, forward corruption, reverse refinement, noisy-image
guidance, training steps, and the full samplers for the two diffusion
paradigms.

Conventions: timesteps t run 1..T; schedule arrays are 0-indexed by t-1.
The reverse variance is fixed at sigma_t^2 = beta_t (epsilon-parameterized
mean, fixed-variance DDPM). The state stacks the image channel first, then
the C SDF channels.
"""

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import AdamState, Tape, Tensor, adam_step, backward, mse_loss


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray        # beta_t, increasing, 0 < beta_t < 1
    alpha: np.ndarray       # 1 - beta_t, exactly in fp32
    alpha_bar: np.ndarray   # prod_{s<=t} alpha_s
    sigma: np.ndarray       # sqrt(beta_t)
    sqrt_alpha: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta64 = np.linspace(beta_start, beta_end, T)
    alpha = (1.0 - beta64).astype(np.float32)
    # re-derive beta from the rounded alpha so alpha_t + beta_t == 1 in fp32
    beta = (1.0 - alpha.astype(np.float64)).astype(np.float32)
    if not np.all(np.diff(beta) > 0):
        raise ValueError("beta schedule must be strictly increasing")
    if beta[0] <= 0.0 or beta[-1] >= 1.0:
        raise ValueError("beta schedule left (0, 1)")
    abar64 = np.cumprod(alpha.astype(np.float64))
    alpha_bar = abar64.astype(np.float32)
    if not np.all(np.diff(alpha_bar) < 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    if alpha_bar[-1] >= 1e-3:
        raise ValueError(f"alpha_bar[T] = {alpha_bar[-1]:.2e} >= 1e-3; schedule too weak")
    # sqrt(abar) as the product of the rounded fp32 per-step factors, so the
    # closed form and an iterated fp32 forward chain share one coefficient path
    sqrt_alpha = np.sqrt(alpha.astype(np.float64)).astype(np.float32)
    sqrt_abar = np.cumprod(sqrt_alpha.astype(np.float64)).astype(np.float32)
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=np.sqrt(beta.astype(np.float64)).astype(np.float32),
        sqrt_alpha=sqrt_alpha,
        sqrt_alpha_bar=sqrt_abar,
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - abar64).astype(np.float32),
    )


@dataclass
class PairState:
    """Noisy (image, SDF) stack at timestep t; image channel first."""
    image_chan: np.ndarray  # [1,H,W] float32
    sdf_chans: np.ndarray   # [C,H,W] float32
    t: int

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.image_chan, self.sdf_chans], axis=0)


def forward_step(x_prev: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One corruption step: x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps."""
    t = sched.check_t(t)
    if eps.shape != x_prev.shape:
        raise ValueError(f"eps shape {eps.shape} != x shape {x_prev.shape}")
    return sched.sqrt_alpha[t - 1] * x_prev + sched.sigma[t - 1] * eps


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = sched.check_t(t)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x shape {x0.shape}")
    return sched.sqrt_alpha_bar[t - 1] * x0 + sched.sqrt_one_minus_alpha_bar[t - 1] * eps


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray,
                 sched: NoiseSchedule) -> np.ndarray:
    """x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z."""
    t = sched.check_t(t)
    if eps_hat.shape != x_t.shape or z.shape != x_t.shape:
        raise ValueError("reverse_step operand shape mismatch")
    if t == 1 and np.any(z):
        raise ValueError("z must be all zeros at t == 1")
    i = t - 1
    coef = np.float32(sched.beta[i] / np.float64(sched.sqrt_one_minus_alpha_bar[i]))
    inv_sqrt_a = np.float32(1.0 / np.sqrt(np.float64(sched.alpha[i])))
    return inv_sqrt_a * (x_t - coef * eps_hat) + sched.sigma[i] * z


def guidance_replace(state: PairState, i_input: np.ndarray, t: int, rng: Rng,
                     sched: NoiseSchedule) -> PairState:
    """Overwrite the image channel with a freshly noised copy of the input.

    SDF channels pass through untouched (same buffer).
    """
    t = sched.check_t(t)
    eps = rng.gaussian(i_input.shape)
    noisy = sched.sqrt_alpha_bar[t - 1] * i_input + sched.sqrt_one_minus_alpha_bar[t - 1] * eps
    return PairState(image_chan=noisy.astype(np.float32, copy=False),
                     sdf_chans=state.sdf_chans, t=t)


def _batch_q_sample(x0: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                    sched: NoiseSchedule) -> np.ndarray:
    ca = sched.sqrt_alpha_bar[ts - 1][:, None, None, None]
    cb = sched.sqrt_one_minus_alpha_bar[ts - 1][:, None, None, None]
    return ca * x0 + cb * eps


def _stabilized_eps(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                    sched: NoiseSchedule) -> np.ndarray:
    """Re-derive eps_hat from the implied clean estimate clamped to the data
    range [-1, 1].

    All channels live in [-1, 1], so the clamp only removes impossible
    states. Without it the fp32 epsilon-chain diverges: the per-step 1/sqrt(alpha_t)
    gain compounds model error at the steep end of the schedule faster than
    the (scale-normalized) network can pull the state back on-manifold.
    """
    i = t - 1
    ca = sched.sqrt_alpha_bar[i]
    cb = sched.sqrt_one_minus_alpha_bar[i]
    x0_hat = np.clip((x_t - cb * eps_hat) / ca, -1.0, 1.0)
    return ((x_t - ca * x0_hat) / cb).astype(np.float32)


def train_step_joint(model, batch, rng: Rng, sched: NoiseSchedule, opt: AdamState) -> float:
    """One Eq-style joint training step: noise the (image, SDF) stack, predict
    the noise, MSE, backprop, Adam. Per-sample t is uniform in 1..T.
    Returns the batch loss."""
    if model.mode != "joint":
        raise ValueError(f"train_step_joint needs a joint-mode model, got {model.mode!r}")
    x0 = np.stack([np.concatenate([s.image, s.sdf], axis=0) for s in batch])
    n = x0.shape[0]
    ts = np.array([rng.randint(1, sched.T) for _ in range(n)], dtype=np.int64)
    eps = rng.gaussian(x0.shape)
    xt = _batch_q_sample(x0, ts, eps, sched)
    tape = Tape()
    pred = model.forward(xt, ts, tape)
    loss = mse_loss(pred, Tensor(eps), tape)
    backward(loss, tape)
    adam_step(list(model.params.values()), opt)
    return float(loss.data)


def train_step_conditional(model, batch, rng: Rng, sched: NoiseSchedule, opt: AdamState) -> float:
    """Conditional variant: noise only the SDF channels, condition on the
    clean image channel, predict the C-channel noise."""
    if model.mode != "conditional":
        raise ValueError(f"train_step_conditional needs a conditional-mode model, got {model.mode!r}")
    s0 = np.stack([s.sdf for s in batch])
    imgs = np.stack([s.image for s in batch])
    n = s0.shape[0]
    ts = np.array([rng.randint(1, sched.T) for _ in range(n)], dtype=np.int64)
    eps = rng.gaussian(s0.shape)
    st = _batch_q_sample(s0, ts, eps, sched)
    xt = np.concatenate([imgs, st], axis=1)
    tape = Tape()
    pred = model.forward(xt, ts, tape)
    loss = mse_loss(pred, Tensor(eps), tape)
    backward(loss, tape)
    adam_step(list(model.params.values()), opt)
    return float(loss.data)


def sample_diffatlas(model, i_input: np.ndarray, sched: NoiseSchedule, rng: Rng):
    """Joint ancestral sampling with noisy-image guidance at every step
    (including t = T). Returns (image [1,H,W], SDF [C,H,W] clamped to [-1,1])."""
    if model.mode != "joint":
        raise ValueError("sample_diffatlas needs a joint-mode model")
    c = model.num_classes
    h, w = i_input.shape[-2:]
    init = rng.gaussian((1 + c, h, w))
    state = PairState(image_chan=init[:1], sdf_chans=init[1:], t=sched.T)
    for t in range(sched.T, 0, -1):
        state = guidance_replace(state, i_input, t, rng, sched)
        x = state.stacked()
        eps_hat = _stabilized_eps(x, model.forward(x[None], t).data[0], t, sched)
        z = rng.gaussian((1 + c, h, w)) if t > 1 else np.zeros((1 + c, h, w), np.float32)
        nxt = reverse_step(x, eps_hat, t, z, sched)
        state = PairState(image_chan=nxt[:1], sdf_chans=nxt[1:], t=t - 1)
    return state.image_chan, np.clip(state.sdf_chans, -1.0, 1.0)


def sample_icmd(model, i_input: np.ndarray, sched: NoiseSchedule, rng: Rng) -> np.ndarray:
    """Conditional ancestral sampling: SDF channels start from noise, the
    clean input image is the conditioning channel at every step. Returns the
    SDF stack clamped to [-1,1]."""
    if model.mode != "conditional":
        raise ValueError("sample_icmd needs a conditional-mode model")
    c = model.num_classes
    h, w = i_input.shape[-2:]
    st = rng.gaussian((c, h, w))
    for t in range(sched.T, 0, -1):
        x = np.concatenate([i_input.astype(np.float32, copy=False), st], axis=0)
        eps_hat = _stabilized_eps(st, model.forward(x[None], t).data[0], t, sched)
        z = rng.gaussian((c, h, w)) if t > 1 else np.zeros((c, h, w), np.float32)
        st = reverse_step(st, eps_hat, t, z, sched)
    return np.clip(st, -1.0, 1.0)
