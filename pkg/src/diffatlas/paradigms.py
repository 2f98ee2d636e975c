"""The four segmentation paradigms behind one segment(image) -> label-map
interface: feedforward (ICF), conditional mask diffusion (ICMD), affine
registration onto an atlas bank (RBA), and joint image-mask diffusion with
noisy-image guidance (DiffAtlas).

Registration is affine-only: 6 parameters mapping each output pixel p to the
source coordinate A (p - center) + center + translation, optimized by
gradient descent on mean squared intensity difference plus a Tikhonov pull
toward the identity, with four fixed-start restarts.
"""

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import sample_diffatlas, sample_icmd
from .phantom import sdf_to_labelmap
from .rng import Rng

_MIN_DET = 0.1
_IDENTITY = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])


class DegenerateTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform:
    """params = (a11, a12, a21, a22, tx, ty); source = A(p - c) + c + t.

    Rows (y) pair with ty and columns (x) with tx; the center c is the image
    center ((H-1)/2, (W-1)/2) of the warped grid.
    """
    params: tuple

    def __post_init__(self):
        if len(self.params) != 6:
            raise ValueError("affine transform needs 6 parameters")

    @property
    def matrix(self):
        a11, a12, a21, a22, _, _ = self.params
        return np.array([[a11, a12], [a21, a22]])

    @property
    def det(self) -> float:
        a11, a12, a21, a22, _, _ = self.params
        return a11 * a22 - a12 * a21

    def require_valid(self):
        if not np.all(np.isfinite(self.params)):
            raise DegenerateTransformError(f"non-finite affine parameters {self.params}")
        if self.det <= _MIN_DET:
            raise DegenerateTransformError(f"degenerate affine (det={self.det:.4f})")


def identity_transform() -> AffineTransform:
    return AffineTransform(tuple(_IDENTITY))


def _source_grid(phi: AffineTransform, h: int, w: int):
    a11, a12, a21, a22, tx, ty = (float(v) for v in phi.params)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sy = a11 * dy + a12 * dx + cy + ty
    sx = a21 * dy + a22 * dx + cx + tx
    return sy, sx


def _bilinear(img: np.ndarray, sy: np.ndarray, sx: np.ndarray):
    """Sampled values, in-bounds mask, and spatial gradients (d/dsy, d/dsx)."""
    h, w = img.shape
    valid = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy, 0, h - 1) - y0
    fx = np.clip(sx, 0, w - 1) - x0
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    val = top * (1 - fy) + bot * fy
    gy = bot - top
    gx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    return val, valid, gy, gx


def warp(arr: np.ndarray, phi: AffineTransform, interp: str) -> np.ndarray:
    """Resample `arr` at phi-mapped coordinates.

    interp='bilinear' for float images (out-of-bounds filled with -1),
    interp='nearest' for integer label maps (out-of-bounds = background 0).
    """
    phi.require_valid()
    squeeze = arr.ndim == 3 and arr.shape[0] == 1
    img2d = arr[0] if squeeze else arr
    if img2d.ndim != 2:
        raise ValueError(f"warp expects a 2-d array or [1,H,W], got {arr.shape}")
    h, w = img2d.shape
    sy, sx = _source_grid(phi, h, w)
    if interp == "bilinear":
        val, valid, _, _ = _bilinear(img2d.astype(np.float64), sy, sx)
        out = np.where(valid, val, -1.0).astype(np.float32)
    elif interp == "nearest":
        iy = np.floor(sy + 0.5).astype(np.int64)
        ix = np.floor(sx + 0.5).astype(np.int64)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(img2d)
        out[valid] = img2d[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)][valid]
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return out[None] if squeeze else out


def _energy_and_grad(target: np.ndarray, atlas: np.ndarray, params: np.ndarray,
                     lam: float, h: int, w: int, with_grad: bool):
    phi = AffineTransform(tuple(params))
    if not np.all(np.isfinite(params)) or phi.det <= _MIN_DET:
        return np.inf, np.inf, None
    sy, sx = _source_grid(phi, h, w)
    val, valid, gy, gx = _bilinear(atlas, sy, sx)
    n_in = int(valid.sum())
    if n_in == 0:
        return np.inf, np.inf, None
    resid = np.where(valid, val - target, 0.0)
    d = float((resid ** 2).sum() / n_in)
    dp = params - _IDENTITY
    energy = d + lam * float((dp ** 2).sum())
    if not with_grad:
        return energy, d, None
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    wgt = (2.0 / n_in) * resid
    ggy = np.where(valid, wgt * gy, 0.0)
    ggx = np.where(valid, wgt * gx, 0.0)
    grad = np.array([
        (ggy * dy).sum(),   # a11
        (ggy * dx).sum(),   # a12
        (ggx * dy).sum(),   # a21
        (ggx * dx).sum(),   # a22
        ggx.sum(),          # tx
        ggy.sum(),          # ty
    ])
    grad += 2.0 * lam * dp
    return energy, d, grad


_START_RNG_SEED = 0x5EED5
_N_STARTS = 4


def _starts():
    # identity plus three quadrant-spread seeded translations
    rng = Rng(_START_RNG_SEED).split("register-starts")
    signs = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0)]
    starts = [np.array(_IDENTITY)]
    for sx, sy in signs:
        s = np.array(_IDENTITY)
        s[4] = sx * rng.uniform_in(0.8, 2.8)
        s[5] = sy * rng.uniform_in(0.8, 2.8)
        starts.append(s)
    return starts


def register(target: np.ndarray, atlas_img: np.ndarray, lam: float = 0.01,
             iters: int = 300, lr: float = 0.01) -> AffineTransform:
    """Minimize mean in-bounds squared intensity difference plus lam times the
    squared parameter distance from identity; best of four fixed starts."""
    tgt = (target[0] if target.ndim == 3 else target).astype(np.float64)
    atl = (atlas_img[0] if atlas_img.ndim == 3 else atlas_img).astype(np.float64)
    if tgt.shape != atl.shape:
        raise ValueError(f"register resolution mismatch: {tgt.shape} vs {atl.shape}")
    h, w = tgt.shape
    # matrix entries see pixel-coordinate^2 curvature; precondition so one
    # step size serves both them and the translations
    precond = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    precond[:4] = 12.0 / (min(h, w) ** 2 - 1)
    best = None
    for start in _starts():
        params = start.copy()
        energy, _, grad = _energy_and_grad(tgt, atl, params, lam, h, w, True)
        if not math.isfinite(energy):
            continue
        step = lr
        step_cap = lr * 200.0
        for _ in range(iters):
            cand = params - step * precond * grad
            cand_energy, _, cand_grad = _energy_and_grad(tgt, atl, cand, lam, h, w, True)
            if cand_energy <= energy:
                params, energy, grad = cand, cand_energy, cand_grad
                step = min(step * 1.3, step_cap)
            else:
                step *= 0.5
                if step < 1e-9:
                    break
        if best is None or energy < best[0]:
            best = (energy, params)
    if best is None:
        raise DegenerateTransformError("registration failed from every start")
    return AffineTransform(tuple(best[1]))


def similarity(target: np.ndarray, atlas_img: np.ndarray, phi: AffineTransform) -> float:
    """Mean in-bounds squared intensity difference under phi."""
    tgt = (target[0] if target.ndim == 3 else target).astype(np.float64)
    atl = (atlas_img[0] if atlas_img.ndim == 3 else atlas_img).astype(np.float64)
    _, d, _ = _energy_and_grad(tgt, atl, np.array(phi.params, dtype=np.float64),
                               0.0, *tgt.shape, False)
    return d


@dataclass
class AtlasBank:
    """Labeled (image, labels) pairs drawn from training samples."""
    images: list
    labels: list

    def __post_init__(self):
        if not self.images or len(self.images) != len(self.labels):
            raise ValueError("atlas bank must be nonempty and aligned")
        shapes = {im.shape[-2:] for im in self.images}
        if len(shapes) != 1:
            raise ValueError("atlas bank entries must share one resolution")

    def __len__(self):
        return len(self.images)


def segment_rba(image: np.ndarray, bank: AtlasBank, lam: float = 0.01,
                iters: int = 300, lr: float = 0.01) -> np.ndarray:
    """Register every atlas to the image, keep the one with the lowest final
    intensity difference, and propagate its labels with nearest-neighbor."""
    best = None
    for atlas_img, atlas_lab in zip(bank.images, bank.labels):
        phi = register(image, atlas_img, lam, iters, lr)
        d = similarity(image, atlas_img, phi)
        if best is None or d < best[0]:
            best = (d, phi, atlas_lab)
    _, phi, labels = best
    return warp(labels, phi, "nearest")


def segment_icf(net, image: np.ndarray) -> np.ndarray:
    """Argmax over feedforward logits (ties to the lowest class index)."""
    logits = net.forward(image[None] if image.ndim == 3 else image).data[0]
    return logits.argmax(axis=0).astype(np.int16)


def segment_icmd(model, image: np.ndarray, sched, seed: int) -> np.ndarray:
    """One seeded conditional-diffusion sample, decoded to labels."""
    rng = Rng(seed).split("icmd-sample")
    sdf = sample_icmd(model, image, sched, rng)
    return sdf_to_labelmap(sdf)


def segment_diffatlas(model, image: np.ndarray, sched, seed: int,
                      ensemble_n: int = 1) -> np.ndarray:
    """Guided joint-diffusion sample(s); SDF tensors are averaged over the
    ensemble before decoding (ensemble_n=1 is a single chain)."""
    if ensemble_n < 1:
        raise ValueError(f"ensemble_n must be >= 1, got {ensemble_n}")
    rng = Rng(seed)
    acc = None
    for k in range(ensemble_n):
        _, sdf = sample_diffatlas(model, image, sched, rng.split(f"chain:{k}"))
        acc = sdf if acc is None else acc + sdf
    return sdf_to_labelmap(acc / np.float32(ensemble_n))
