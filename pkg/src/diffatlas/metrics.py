"""Dice and normalized surface distance with brute-force-verifiable
definitions, plus per-class/average aggregation.

Boundary = foreground pixel with at least one background 4-neighbor, with the
image border counting as background. NSD counts boundary pixels of each mask
within Euclidean tolerance tau of the other mask's boundary (center-to-center
distances). Conventions: both masks empty scores 1.0, exactly one empty 0.0.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|A n B| / (|A| + |B|) over the binary masks of `cls`."""
    if pred.shape != gt.shape:
        raise ValueError(f"dice shape mismatch: {pred.shape} vs {gt.shape}")
    a = pred == cls
    b = gt == cls
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Coordinates [K,2] of foreground pixels with a background 4-neighbor
    (image border counts as background)."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def nsd(pred: np.ndarray, gt: np.ndarray, cls: int, tau: float = 1.0) -> float:
    """Fraction of boundary pixels of each mask within tau of the other's."""
    if pred.shape != gt.shape:
        raise ValueError(f"nsd shape mismatch: {pred.shape} vs {gt.shape}")
    if tau < 0:
        raise ValueError(f"nsd tolerance must be >= 0, got {tau}")
    bp = boundary(pred == cls)
    bg = boundary(gt == cls)
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0
    d2 = ((bp[:, None, :] - bg[None, :, :]) ** 2).sum(axis=2).astype(np.float64)
    tau2 = float(tau) * float(tau)
    hits_p = int((d2.min(axis=1) <= tau2).sum())
    hits_g = int((d2.min(axis=0) <= tau2).sum())
    return (hits_p + hits_g) / (len(bp) + len(bg))


@dataclass
class MetricsReport:
    per_class: dict       # class -> (mean dice, mean nsd) over samples
    average: tuple        # (mean over classes of dice, same for nsd)
    n_samples: int


def evaluate(preds, gts, num_classes: int, tau: float = 1.0) -> MetricsReport:
    """Per-class Dice/NSD averaged over samples, then averaged over classes."""
    if len(preds) != len(gts):
        raise ValueError(f"evaluate got {len(preds)} preds vs {len(gts)} gts")
    if len(preds) == 0:
        raise ValueError("evaluate needs at least one sample")
    per_class = {}
    for cls in range(1, num_classes + 1):
        ds = [dice(p, g, cls) for p, g in zip(preds, gts)]
        ns = [nsd(p, g, cls, tau) for p, g in zip(preds, gts)]
        per_class[cls] = (float(np.mean(ds)), float(np.mean(ns)))
    avg_dice = float(np.mean([v[0] for v in per_class.values()]))
    avg_nsd = float(np.mean([v[1] for v in per_class.values()]))
    return MetricsReport(per_class=per_class, average=(avg_dice, avg_nsd),
                         n_samples=len(preds))


CSV_HEADER = ["paradigm", "setting", "class", "dice", "nsd", "n"]


def report_to_csv(report: MetricsReport, paradigm: str, setting: str) -> str:
    """Six-column CSV: (paradigm, setting, class|'avg', dice, nsd, n)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for cls in sorted(report.per_class):
        d, s = report.per_class[cls]
        writer.writerow([paradigm, setting, cls, f"{d:.6f}", f"{s:.6f}", report.n_samples])
    writer.writerow([paradigm, setting, "avg", f"{report.average[0]:.6f}",
                     f"{report.average[1]:.6f}", report.n_samples])
    return buf.getvalue()
