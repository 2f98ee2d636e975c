"""Procedural phantom generator and the signed-distance mask codec.

Each phantom is a small cardiac-style scene: an elliptical ring (class 1)
around an inner disc (class 2) plus one or more offset discs (classes 3..C).
Geometry is a pure function of the seed; the two domains A and B share
geometry per seed and differ only in intensity mapping and noise, which is
the desk-scale stand-in for a modality change.

Masks are carried as per-class signed distance fields: negative inside,
truncated at d_max pixels and scaled to [-1, 1].
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .rng import Rng

DEFAULT_D_MAX = 8.0
_MEANS_A = (-0.55, 0.40, 0.85, 0.40, -0.05, 0.65)  # background + up to 5 classes


@dataclass(frozen=True)
class DomainParams:
    """Per-class mean intensities plus noise/texture/inversion knobs."""
    name: str
    class_means: tuple  # length C+1, index 0 = background, values in [-1, 1]
    noise_amp: float    # Gaussian pixel noise, in [0, 0.3]
    texture_scale: float
    invert: bool

    def __post_init__(self):
        if any(not -1.0 <= m <= 1.0 for m in self.class_means):
            raise ValueError("class means must lie in [-1, 1]")
        if not 0.0 <= self.noise_amp <= 0.3:
            raise ValueError("noise amplitude must lie in [0, 0.3]")

    @property
    def num_classes(self) -> int:
        return len(self.class_means) - 1


def domain_a(num_classes: int = 3) -> DomainParams:
    return DomainParams("A", _MEANS_A[:num_classes + 1], noise_amp=0.15,
                        texture_scale=0.18, invert=False)


def domain_b(num_classes: int = 3) -> DomainParams:
    return DomainParams("B", _MEANS_A[:num_classes + 1], noise_amp=0.25,
                        texture_scale=0.18, invert=True)


def get_domain(name: str, num_classes: int = 3) -> DomainParams:
    if name == "A":
        return domain_a(num_classes)
    if name == "B":
        return domain_b(num_classes)
    raise ValueError(f"unknown domain {name!r}")


@dataclass
class PhantomSample:
    image: np.ndarray   # [1,H,W] float32 in [-1,1]
    labels: np.ndarray  # [H,W] int16 in 0..C
    sdf: np.ndarray     # [C,H,W] float32 in [-1,1]
    domain: str
    seed: int


def _ellipse_mask(yy, xx, cy, cx, a, b, theta):
    dy = yy - cy
    dx = xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = dy * ct + dx * st
    v = -dy * st + dx * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_geometry(rng: Rng, num_classes: int, h: int, w: int) -> np.ndarray:
    scale = min(h, w) / 32.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2.0 + rng.uniform_in(-1.5, 1.5) * scale
    cx = w / 2.0 + rng.uniform_in(-1.5, 1.5) * scale
    a1 = rng.uniform_in(3.2, 4.8) * scale
    b1 = rng.uniform_in(3.2, 4.8) * scale
    ring = rng.uniform_in(1.7, 2.6) * scale
    theta = rng.uniform_in(0.0, math.pi)
    inner = _ellipse_mask(yy, xx, cy, cx, a1, b1, theta)
    outer = _ellipse_mask(yy, xx, cy, cx, a1 + ring, b1 + ring, theta)
    labels = np.zeros((h, w), dtype=np.int16)
    labels[outer & ~inner] = 1
    labels[inner] = 2
    base_angle = rng.uniform_in(0.0, 2.0 * math.pi)
    n_extra = num_classes - 2
    for idx in range(n_extra):
        ang = base_angle + 2.0 * math.pi * idx / max(n_extra, 1)
        a3 = rng.uniform_in(2.0, 3.2) * scale
        b3 = rng.uniform_in(2.0, 3.2) * scale
        dist = (max(a1, b1) + ring + max(a3, b3)) * rng.uniform_in(0.92, 1.08)
        ey = cy + dist * math.sin(ang)
        ex = cx + dist * math.cos(ang)
        margin = max(a3, b3) + 1.0
        ey = min(max(ey, margin), h - 1 - margin)
        ex = min(max(ex, margin), w - 1 - margin)
        disc = _ellipse_mask(yy, xx, ey, ex, a3, b3, rng.uniform_in(0.0, math.pi))
        labels[disc & (labels == 0)] = 3 + idx
    return labels


_CANONICAL_GEOMETRY_SEED = 0x0DDBA11


def gen_phantom(seed: int, domain: DomainParams, h: int = 32, w: int = 32,
                d_max: float = DEFAULT_D_MAX) -> PhantomSample:
    """Deterministic phantom for (seed, domain, H, W); geometry depends on the
    seed only, so A/B pairs share their label map pixel for pixel."""
    if h < 16 or w < 16:
        raise ValueError(f"phantom needs H, W >= 16, got {h}x{w}")
    c = domain.num_classes
    geo_rng = Rng(seed).split("geometry")
    labels = None
    for _ in range(64):
        cand = _draw_geometry(geo_rng, c, h, w)
        if all(int((cand == cls).sum()) >= 8 for cls in range(1, c + 1)):
            labels = cand
            break
    if labels is None:
        # pathological seed: fall back to a fixed safe geometry
        labels = _draw_geometry(Rng(_CANONICAL_GEOMETRY_SEED).split("geometry"), c, h, w)

    noise_rng = Rng(seed).split(f"noise:{domain.name}")
    means = np.array(domain.class_means, dtype=np.float64)
    if domain.invert:
        means = -means
    img = means[labels]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(2):
        fy = noise_rng.uniform_in(0.5, 1.5) * 2.0 * math.pi / h
        fx = noise_rng.uniform_in(0.5, 1.5) * 2.0 * math.pi / w
        phase = noise_rng.uniform_in(0.0, 2.0 * math.pi)
        amp = domain.texture_scale * noise_rng.uniform_in(0.4, 1.0)
        img = img + amp * np.cos(fy * yy + fx * xx + phase)
    img = img.astype(np.float32) + np.float32(domain.noise_amp) * noise_rng.gaussian((h, w))
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    sdf = labelmap_to_sdf(labels, c, d_max)
    return PhantomSample(image=img[None], labels=labels, sdf=sdf,
                         domain=domain.name, seed=seed)


def labelmap_to_sdf(labels: np.ndarray, num_classes: int,
                    d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Per-class signed Euclidean distance to the nearest opposite-region
    pixel: negative inside the class, clamped at d_max, scaled to [-1, 1]."""
    if d_max <= 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    h, w = labels.shape
    sdf = np.empty((num_classes, h, w), dtype=np.float32)
    for cls in range(1, num_classes + 1):
        mask = labels == cls
        if not mask.any():
            sdf[cls - 1] = 1.0
            continue
        if mask.all():
            sdf[cls - 1] = -1.0
            continue
        inside = distance_transform_edt(mask)
        outside = distance_transform_edt(~mask)
        signed = np.where(mask, -inside, outside)
        sdf[cls - 1] = (np.clip(signed, -d_max, d_max) / d_max).astype(np.float32)
    return sdf


def sdf_to_labelmap(sdf: np.ndarray) -> np.ndarray:
    """Decode: a pixel takes the class of its most-negative channel, or
    background when no channel is negative. Ties go to the lowest class."""
    min_val = sdf.min(axis=0)
    arg = sdf.argmin(axis=0)  # first minimum = lowest class index on ties
    return np.where(min_val < 0.0, arg + 1, 0).astype(np.int16)


def make_dataset(n: int, base_seed: int, domain: DomainParams, h: int = 32,
                 w: int = 32, d_max: float = DEFAULT_D_MAX):
    """Phantoms for seeds base_seed .. base_seed+n-1."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    return [gen_phantom(base_seed + i, domain, h, w, d_max) for i in range(n)]


# ---------------------------------------------------------------------------
# PGM + manifest persistence


def image_to_u8(img: np.ndarray) -> np.ndarray:
    """[-1,1] float image -> 8-bit gray via round((v+1)*127.5)."""
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def u8_to_image(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def write_pgm(path, arr: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    raw = parts[4] if len(parts) == 5 else b""
    if len(raw) < h * w:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(raw[:h * w], dtype=np.uint8).reshape(h, w)


def save_samples(samples, out_dir, tag: str):
    """Write image/label PGMs plus per-sample manifest records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        img_path = out_dir / f"{tag}_{s.seed:08d}_img.pgm"
        lab_path = out_dir / f"{tag}_{s.seed:08d}_lab.pgm"
        write_pgm(img_path, image_to_u8(s.image[0]))
        write_pgm(lab_path, s.labels.astype(np.uint8))
        records.append({
            "seed": s.seed,
            "domain": s.domain,
            "image": img_path.name,
            "labels": lab_path.name,
        })
    return records


def load_sample(data_dir, record, num_classes: int, d_max: float) -> PhantomSample:
    """Rehydrate a PhantomSample from manifest record + PGM files.

    The image round-trips through 8-bit quantization; labels are lossless and
    the SDF is recomputed from them.
    """
    data_dir = Path(data_dir)
    img = u8_to_image(read_pgm(data_dir / record["image"]))
    labels = read_pgm(data_dir / record["labels"]).astype(np.int16)
    sdf = labelmap_to_sdf(labels, num_classes, d_max)
    return PhantomSample(image=img[None], labels=labels, sdf=sdf,
                         domain=record["domain"], seed=record["seed"])


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
