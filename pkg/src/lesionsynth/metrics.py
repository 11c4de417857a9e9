"""Generation-quality metrics with pluggable feature extractors.

FID and KID are computed on feature sets whose extractor identity is carried
along and enforced, so numbers produced under different extractors can never
be cross-compared silently.  The canonical Inception embedding needs
external weights and is out of scope here; the desk extractors are a small
phantom-trained CNN (penultimate layer) and a handcrafted statistic vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .curvature import CurvatureStats, curvature_stats, welch_t_test
from .data import TumorClass

log = logging.getLogger(__name__)


class ExtractorMismatch(Exception):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray  # N x d
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _check_same_extractor(a: FeatureSet, b: FeatureSet) -> None:
    if a.extractor_id != b.extractor_id:
        raise ExtractorMismatch(f"{a.extractor_id!r} vs {b.extractor_id!r}")


# ---------------------------------------------------------------------------
# Extractors
# ---------------------------------------------------------------------------


class HandcraftedExtractor:
    """Deterministic image statistics: mean, variance, |gradient| histogram
    (8 fixed bins on [0, 0.8]), and raw radial spectral power in 8 bands
    (DC excluded, normalized by pixel count).  A constant image maps to
    (c, 0, [1,0,...,0], [0]*8)."""

    extractor_id = "handcrafted-v1"
    n_bins = 8
    n_bands = 8
    grad_range = (0.0, 0.8)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        feats = [self._one(img) for img in images]
        return np.stack(feats)

    def _one(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        mean = img.mean()
        var = img.var()
        gi = (np.roll(img, -1, 0) - np.roll(img, 1, 0)) / 2.0
        gj = (np.roll(img, -1, 1) - np.roll(img, 1, 1)) / 2.0
        mag = np.hypot(gi, gj)
        hist, _ = np.histogram(mag, bins=self.n_bins, range=self.grad_range)
        hist = hist / mag.size
        spec = np.abs(np.fft.fft2(img)) ** 2 / img.size
        h, w = img.shape
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        rad = np.hypot(fy, fx)
        bands = np.zeros(self.n_bands)
        edges = np.linspace(0.0, 0.5 * np.sqrt(2.0), self.n_bands + 1)
        for b in range(self.n_bands):
            sel = (rad > edges[b]) & (rad <= edges[b + 1])
            bands[b] = spec[sel].sum()
        return np.concatenate([[mean, var], hist, bands])


class _FeatureCnn(nn.Module):
    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(64, 2)

    def forward(self, x):
        return self.head(self.body(x))


class TrainedCnnExtractor:
    """Penultimate layer of a small benign/malignant classifier trained on
    phantoms; the extractor id pins the training seed."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.extractor_id = f"cnn-phantom-v1-seed{seed}"
        self.model: _FeatureCnn | None = None

    def train_on(self, records, epochs: int = 3, lr: float = 1e-3) -> "TrainedCnnExtractor":
        torch.manual_seed(self.seed)
        model = _FeatureCnn()
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        images = torch.as_tensor(
            np.stack([r.image for r in records]), dtype=torch.float32
        )[:, None]
        labels = torch.as_tensor([int(r.tumor_class) for r in records])
        gen = torch.Generator().manual_seed(self.seed)
        for _ in range(epochs):
            order = torch.randperm(len(records), generator=gen)
            for start in range(0, len(records), 32):
                idx = order[start : start + 32]
                loss = nn.functional.cross_entropy(model(images[idx]), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        model.eval()
        self.model = model
        return self

    def __call__(self, images: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("extractor not trained; call train_on first")
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)[:, None]
        with torch.no_grad():
            return self.model.body(x).numpy().astype(np.float64)


def extract_features(images, extractor) -> FeatureSet:
    """Run the extractor over an image stack and tag the result with its id."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError("images must be a non-empty N x H x W stack")
    return FeatureSet(features=extractor(images), extractor_id=extractor.extractor_id)


# ---------------------------------------------------------------------------
# FID / KID
# ---------------------------------------------------------------------------

COV_STABILIZER = 1e-6


def _sqrtm_product_trace(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((cov_a cov_b)^(1/2)) via eigendecomposition of the symmetrized product."""
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    prod = sqrt_a @ cov_b @ sqrt_a
    prod = (prod + prod.T) / 2.0
    vals = np.linalg.eigvalsh(prod)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    _check_same_extractor(a, b)
    if a.n < 2 or b.n < 2:
        raise ValueError("FID needs at least 2 samples per set")
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    d = a.features.shape[1]
    eye = COV_STABILIZER * np.eye(d)
    cov_a = np.cov(a.features, rowvar=False) + eye
    cov_b = np.cov(b.features, rowvar=False) + eye
    value = (
        float(np.sum((mu_a - mu_b) ** 2))
        + float(np.trace(cov_a) + np.trace(cov_b))
        - 2.0 * _sqrtm_product_trace(cov_a, cov_b)
    )
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """U-statistic MMD^2 over index pairs i != j (requires len(x) == len(y)).

    Excluding the diagonal of the cross term as well makes the estimator
    vanish exactly on element-aligned identical sets while staying unbiased
    for independent draws.
    """
    m = x.shape[0]
    if y.shape[0] != m:
        raise ValueError("MMD^2 U-statistic needs equally sized sets")
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    total = (
        (kxx.sum() - np.trace(kxx))
        + (kyy.sum() - np.trace(kyy))
        - 2.0 * (kxy.sum() - np.trace(kxy))
    )
    return float(total / (m * (m - 1)))


def kid(
    a: FeatureSet,
    b: FeatureSet,
    subset_size: int = 100,
    subsets: int = 10,
    seed: int = 0,
) -> float:
    """Unbiased polynomial-kernel MMD^2 averaged over random subsets.

    Equal-sized sets share subset indices, so kid(a, a) is exactly zero;
    independent same-distribution sets scatter around (and may dip slightly
    below) zero.
    """
    _check_same_extractor(a, b)
    subset_size = min(subset_size, a.n, b.n)
    if subset_size < 2:
        raise ValueError("KID needs subset_size >= 2")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(subsets):
        ia = rng.choice(a.n, subset_size, replace=False)
        ib = ia if b.n == a.n else rng.choice(b.n, subset_size, replace=False)
        vals.append(_mmd2_unbiased(a.features[ia], b.features[ib]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Curvature report
# ---------------------------------------------------------------------------


@dataclass
class CurvatureReport:
    rows: list[dict]        # corpus, class, mean, std, n
    p_values: dict[str, float]

    def to_text(self) -> str:
        lines = ["corpus      class      mean     std      n"]
        for row in self.rows:
            lines.append(
                f"{row['corpus']:<11} {row['class']:<10} "
                f"{row['mean']:.4f}   {row['std']:.4f}   {row['n']}"
            )
        for name, p in self.p_values.items():
            lines.append(f"p[{name}] = {p:.3e}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "p_values": self.p_values}


def curvature_report(
    real_masks,
    real_labels,
    gen_masks=None,
    gen_labels=None,
    smoothing_sigma: float = 2.0,
) -> CurvatureReport:
    """Per-class curvature statistics for one or two corpora plus Welch p-values."""
    corpora = {"real": (list(real_masks), list(real_labels))}
    if gen_masks is not None:
        corpora["generated"] = (list(gen_masks), list(gen_labels))
    rows = []
    stats: dict[tuple[str, TumorClass], CurvatureStats] = {}
    for corpus, (masks, labels) in corpora.items():
        for k in TumorClass:
            group = [m for m, lbl in zip(masks, labels) if TumorClass(int(lbl)) == k]
            if not group:
                continue
            st = curvature_stats(group, smoothing_sigma=smoothing_sigma)
            stats[(corpus, k)] = st
            rows.append(
                {
                    "corpus": corpus,
                    "class": k.name.lower(),
                    "mean": st.mean,
                    "std": st.std,
                    "n": st.n,
                }
            )
    p_values = {}
    for corpus in corpora:
        kb, km = stats.get((corpus, TumorClass.BENIGN)), stats.get((corpus, TumorClass.MALIGNANT))
        if kb and km and kb.n >= 2 and km.n >= 2 and kb.std > 0 and km.std > 0:
            p_values[f"{corpus}:benign-vs-malignant"] = welch_t_test(kb, km)
    if gen_masks is not None:
        for k in TumorClass:
            a, b = stats.get(("real", k)), stats.get(("generated", k))
            if a and b and a.n >= 2 and b.n >= 2 and a.std > 0 and b.std > 0:
                p_values[f"real-vs-generated:{k.name.lower()}"] = welch_t_test(a, b)
    return CurvatureReport(rows=rows, p_values=p_values)
