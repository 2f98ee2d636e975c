"""Minimal float32 tensor engine with reverse-mode autodiff and Adam.

Tensors are contiguous row-major float32 numpy buffers with explicit shapes;
there is no broadcasting except channel-wise bias addition. Ops record onto
an explicit Tape when one is supplied and any input requires gradients; a
single reversed traversal of the tape accumulates gradients additively.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


class GradError(RuntimeError):
    """Raised on backward/optimizer contract violations."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # float64 is preserved so test oracles can drive ops at fp64;
        # everything else (lists, ints, f32) lands in production float32.
        arr = np.asarray(data)
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    out: Tensor
    backward_fn: object  # grad_out -> tuple of grads aligned with inputs (None = no grad)


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    _produced: set = field(default_factory=set)

    def record(self, op, inputs, out, backward_fn):
        self.nodes.append(TapeNode(op, tuple(inputs), out, backward_fn))
        self._produced.add(id(out))

    def check_topological(self) -> bool:
        """True iff every node's tensor inputs were produced earlier (or are leaves)."""
        seen = set()
        for node in self.nodes:
            for inp in node.inputs:
                if id(inp) in self._produced and id(inp) not in seen:
                    return False
            seen.add(id(node.out))
        return True


def _maybe_record(tape, op, inputs, out, backward_fn):
    tensor_inputs = [i for i in inputs if isinstance(i, Tensor)]
    needs = any(i.requires_grad for i in tensor_inputs)
    out.requires_grad = needs
    if tape is not None and needs:
        tape.record(op, tensor_inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across uses; each tape node is visited
    exactly once, in reverse recording order.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grad_map = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grad_map.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            if id(inp) in tape._produced:
                acc = grad_map.get(id(inp))
                if acc is None:
                    grad_map[id(inp)] = np.array(gi, copy=True)
                else:
                    acc += gi


# ---------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int, stride: int, tape: Tape = None) -> Tensor:
    """Cross-correlation of NCHW input with OIkk kernel; bias per out-channel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, cin, h, width = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2 or b.shape != (cout,):
        raise ShapeError(f"conv2d mismatch: x{tuple(x.shape)} w{tuple(w.shape)} b{tuple(b.shape)}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d kernel must be odd, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (width + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{width}, k={k}, pad={pad}")
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(x.data, w.data, b.data))
    backend.conv2d_forward(x.data, w.data, b.data, pad, stride, out)
    y = Tensor(out)
    xd, wd = x.data, w.data

    def bwd(gy):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        gb = np.zeros(cout, dtype=wd.dtype)
        backend.conv2d_backward(xd, wd, np.ascontiguousarray(gy), pad, stride, gx, gw, gb)
        return gx, gw, gb

    return _maybe_record(tape, "conv2d", (x, w, b), y, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor, tape: Tape = None) -> Tensor:
    """y = x @ w.T + b for x[N,Din], w[Dout,Din], b[Dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d x and w, got {x.shape} and {w.shape}")
    n, din = x.shape
    dout, din_w = w.shape
    if din != din_w or b.shape != (dout,):
        raise ShapeError(f"linear mismatch: x{tuple(x.shape)} w{tuple(w.shape)} b{tuple(b.shape)}")
    y = Tensor(x.data @ w.data.T + b.data)
    xd, wd = x.data, w.data

    def bwd(gy):
        return gy @ wd, gy.T @ xd, gy.sum(axis=0)

    return _maybe_record(tape, "linear", (x, w, b), y, bwd)


def activate(x: Tensor, kind: str, tape: Tape = None) -> Tensor:
    if kind == "relu":
        y = Tensor(np.maximum(x.data, 0.0))
        mask = x.data > 0

        def bwd(gy):
            return (gy * mask,)

    elif kind == "silu":
        sig = 1.0 / (1.0 + np.exp(-x.data.astype(np.float32)))
        y = Tensor(x.data * sig)
        xd = x.data

        def bwd(gy):
            return (gy * (sig * (1.0 + xd * (1.0 - sig))),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _maybe_record(tape, f"activate[{kind}]", (x,), y, bwd)


_VAR_FLOOR = np.float32(1e-5)


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor, tape: Tape = None) -> Tensor:
    """Per-sample, per-channel normalization over spatial dims, then affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError("channel_norm needs at least 2 spatial elements")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"channel_norm affine shape mismatch for C={c}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    floored = var <= _VAR_FLOOR
    inv = 1.0 / np.sqrt(np.maximum(var, _VAR_FLOOR))
    xhat = (x.data - mu) * inv
    y = Tensor(gain.data[None, :, None, None] * xhat + bias.data[None, :, None, None])
    gd = gain.data

    def bwd(gy):
        g = gy * gd[None, :, None, None]
        mean_g = g.mean(axis=(2, 3), keepdims=True)
        mean_gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
        mean_gx = np.where(floored, 0.0, mean_gx)
        gx = inv * (g - mean_g - xhat * mean_gx)
        ggain = (gy * xhat).sum(axis=(0, 2, 3))
        gbias = gy.sum(axis=(0, 2, 3))
        return gx, ggain, gbias

    return _maybe_record(tape, "channel_norm", (x, gain, bias), y, bwd)


def concat_channels(a: Tensor, b: Tensor, tape: Tape = None) -> Tensor:
    """Concatenate along the channel axis; a-channels first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    y = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bwd(gy):
        return gy[:, :ca], gy[:, ca:]

    return _maybe_record(tape, "concat_channels", (a, b), y, bwd)


def upsample2x(x: Tensor, tape: Tape = None) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x expects NCHW")
    n, c, h, w = x.shape
    y = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def bwd(gy):
        return (gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _maybe_record(tape, "upsample2x", (x,), y, bwd)


def channel_means(x: Tensor, tape: Tape = None) -> Tensor:
    """Spatial mean per (sample, channel): [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError("channel_means expects NCHW")
    n, c, h, w = x.shape
    y = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(gy):
        return (np.broadcast_to(gy[:, :, None, None] / (h * w), x.shape).astype(gy.dtype),)

    return _maybe_record(tape, "channel_means", (x,), y, bwd)


def concat_features(a: Tensor, b: Tensor, tape: Tape = None) -> Tensor:
    """Concatenate 2-d feature matrices along axis 1."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features wants [N,*] pairs, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    y = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bwd(gy):
        return gy[:, :ca], gy[:, ca:]

    return _maybe_record(tape, "concat_features", (a, b), y, bwd)


def bias_add_nc(x: Tensor, b: Tensor, tape: Tape = None) -> Tensor:
    """Add a per-(sample, channel) bias b[N,C] across spatial dims."""
    if x.data.ndim != 4 or b.data.ndim != 2:
        raise ShapeError("bias_add_nc expects x[N,C,H,W] and b[N,C]")
    if x.shape[:2] != b.shape:
        raise ShapeError(f"bias_add_nc mismatch: {x.shape} vs {b.shape}")
    y = Tensor(x.data + b.data[:, :, None, None])

    def bwd(gy):
        return gy, gy.sum(axis=(2, 3))

    return _maybe_record(tape, "bias_add_nc", (x, b), y, bwd)


def mse_loss(pred: Tensor, target: Tensor, tape: Tape = None) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    y = Tensor(np.mean(diff * diff))

    def bwd(gy):
        scale = (gy * 2.0 / n).astype(diff.dtype)
        g = scale * diff
        return g, -g

    return _maybe_record(tape, "mse_loss", (pred, target), y, bwd)


def seg_loss(logits: Tensor, labels: np.ndarray, tape: Tape = None) -> Tensor:
    """0.5 * pixel softmax cross-entropy + 0.5 * soft Dice loss over foreground.

    logits: [N,C+1,H,W] (or [C+1,H,W]); labels: int array [N,H,W] (or [H,W])
    with values in 0..C, 0 = background. Dice uses smoothing 1.0 in numerator
    and denominator and averages per-sample over the C foreground classes.
    """
    ld = logits.data
    squeeze = False
    if ld.ndim == 3:
        ld = ld[None]
        labels = np.asarray(labels)[None]
        squeeze = True
    if ld.ndim != 4:
        raise ShapeError(f"seg_loss expects [N,C+1,H,W] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k, h, w = ld.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"seg_loss label shape {labels.shape} != {(n, h, w)}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"seg_loss labels out of range 0..{k - 1}")
    c_fg = k - 1
    npix = n * h * w

    zmax = ld.max(axis=1, keepdims=True)
    ez = np.exp(ld - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = (ld - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    onehot = np.zeros_like(ld)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    ce = -(logp * onehot).sum() / npix

    smooth = 1.0
    pf = p[:, 1:].reshape(n, c_fg, h * w)
    gf = onehot[:, 1:].reshape(n, c_fg, h * w)
    num = 2.0 * (pf * gf).sum(axis=2) + smooth
    den = pf.sum(axis=2) + gf.sum(axis=2) + smooth
    dice = num / den
    dice_loss = 1.0 - dice.mean()
    y = Tensor(np.asarray(0.5 * ce + 0.5 * dice_loss, dtype=ld.dtype))

    def bwd(gy):
        dce = (p - onehot) / npix
        # d(dice_loss)/dp for foreground channels, per (n, c)
        dd_dp = (2.0 * gf * den[:, :, None] - num[:, :, None]) / den[:, :, None] ** 2
        gp = np.zeros_like(ld).reshape(n, k, h * w)
        gp[:, 1:] = -dd_dp.reshape(n, c_fg, h * w) / (n * c_fg)
        gp = gp.reshape(n, k, h, w)
        # chain through softmax: dz = p * (gp - sum_j p_j gp_j)
        dz_dice = p * (gp - (p * gp).sum(axis=1, keepdims=True))
        g = (gy * (0.5 * dce + 0.5 * dz_dice)).astype(ld.dtype)
        return (g[0] if squeeze else g,)

    return _maybe_record(tape, "seg_loss", (logits,), y, bwd)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moments sized for a fixed parameter list, with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = list(params)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, state: AdamState) -> None:
    """One Adam update over `params` (the list the state was sized for);
    zeroes grads afterwards."""
    params = list(params)
    if len(params) != len(state.m):
        raise GradError(f"adam_step: {len(params)} params vs state sized for {len(state.m)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradError(f"adam_step: parameter {i} has no gradient")
        if p.grad.shape != state.m[i].shape:
            raise GradError(f"adam_step: parameter {i} shape mismatch with state")
    state.step_count += 1
    t = state.step_count
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    c1 = np.float32(1.0 - state.beta1 ** t)
    c2 = np.float32(1.0 - state.beta2 ** t)
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (np.float32(1) - b1) * g
        v *= b2
        v += (np.float32(1) - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(x, tape)` must build a scalar Tensor through the given tape (tape=None
    for plain evaluation) and be deterministic. The analytic side runs in
    production float32; the numeric side re-evaluates f with x upcast to
    float64 so the difference quotient is not drowned by fp32 rounding.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    prev_rg, prev_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    tape = Tape()
    out = f(x, tape)
    if out.data.size != 1:
        raise GradError("finite_diff_check needs a scalar-valued function")
    backward(out, tape)
    analytic = x.grad.astype(np.float64).ravel().copy()
    x.requires_grad, x.grad = prev_rg, prev_grad

    orig_data = x.data
    x.data = orig_data.astype(np.float64)
    flat = x.data.ravel()
    numeric = np.empty_like(analytic)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x, None).data.item()
            flat[i] = orig - h
            fm = f(x, None).data.item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    finally:
        x.data = orig_data
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
