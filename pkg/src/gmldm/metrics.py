"""Pearson correlation, windowed 3D SSIM, and FNC-vs-random difference saliency."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ValidationError
from .volumes import Volume3D, save_volume

K1, K2 = 0.01, 0.03


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume3D) else v, dtype=np.float64)


def pearson(a, b, mask: Optional[np.ndarray] = None) -> float:
    """Product-moment correlation over (optionally masked) voxels."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        a, b = a[mask], b[mask]
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise ValidationError("correlation undefined for a constant input")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def ssim3d(a, b, window: int = 7, data_range: float = 1.0) -> float:
    """Mean SSIM over every fully-contained window^3 uniform window."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or min(a.shape) < window:
        raise ValidationError(f"volume {a.shape} smaller than the {window}^3 window")
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2

    def filt(x):
        return uniform_filter(x, size=window, mode="constant")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    h = window // 2
    # keep centers whose window lies fully inside the volume
    crop = tuple(slice(h, n - (window - 1 - h)) for n in a.shape)
    return float(s[crop].mean())


@dataclass
class MetricReport:
    pearson: float
    ssim: float
    n_voxels: int
    per_subject: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_voxels <= 0:
            raise ValidationError("n_voxels must be positive")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "pearson", "ssim"])
            for sid, p, s in self.per_subject:
                w.writerow([sid, f"{p:.10f}", f"{s:.10f}"])


def evaluate_pairs(real: Sequence, generated: Sequence, subject_ids: Optional[Sequence[str]] = None) -> MetricReport:
    """Per-subject Pearson/SSIM, averaged across subjects."""
    if len(real) != len(generated) or len(real) == 0:
        raise ValidationError("need equally many (>0) real and generated volumes")
    ids = list(subject_ids) if subject_ids is not None else [f"sub-{i:05d}" for i in range(len(real))]
    rows = [(sid, pearson(r, g), ssim3d(r, g)) for sid, r, g in zip(ids, real, generated)]
    return MetricReport(
        pearson=float(np.mean([r[1] for r in rows])),
        ssim=float(np.mean([r[2] for r in rows])),
        n_voxels=int(_arr(real[0]).size),
        per_subject=rows,
    )


@dataclass
class SaliencyMap:
    volume: Volume3D
    region_scores: dict
    region_sizes: dict

    @property
    def ranking(self) -> list:
        return sorted(self.region_scores, key=lambda r: self.region_scores[r], reverse=True)

    def write(self, out_dir, stem: str = "saliency"):
        out_dir = Path(out_dir)
        save_volume(self.volume, out_dir / f"{stem}.vol")
        with open(out_dir / f"{stem}_regions.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank", "region", "score", "n_voxels"])
            for i, r in enumerate(self.ranking, 1):
                w.writerow([i, r, f"{self.region_scores[r]:.10f}", self.region_sizes[r]])


def difference_saliency(fnc_samples: Sequence, random_samples: Sequence, atlas: np.ndarray) -> SaliencyMap:
    """|mean(FNC-guided) - mean(random-guided)| voxelwise, scored per atlas region.

    Atlas labels >= 0 are region ids; negative labels are ignored.
    """
    if not fnc_samples or not random_samples:
        raise ValidationError("both sample lists must be non-empty")
    f = np.stack([_arr(v) for v in fnc_samples])
    r = np.stack([_arr(v) for v in random_samples])
    atlas = np.asarray(atlas)
    if f.shape[1:] != r.shape[1:] or f.shape[1:] != atlas.shape:
        raise ValidationError(f"shape mismatch: fnc {f.shape[1:]}, random {r.shape[1:]}, atlas {atlas.shape}")
    diff = np.abs(f.mean(axis=0) - r.mean(axis=0))
    scores, sizes = {}, {}
    for rid in np.unique(atlas[atlas >= 0]):
        sel = atlas == rid
        scores[int(rid)] = float(diff[sel].mean())
        sizes[int(rid)] = int(sel.sum())
    return SaliencyMap(Volume3D(diff), scores, sizes)
