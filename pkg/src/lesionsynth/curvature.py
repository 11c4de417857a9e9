"""Differentiable boundary curvature for lesion masks.

The curvature of a mask's boundary separates smooth (benign-looking) from
spiculated (malignant-looking) contours.  The measure used here is the mean
absolute level-set curvature evaluated at the boundary pixels of the
thresholded mask:

    kappa_bar = (1/N_b) * sum_B | (M_ii M_j^2 - 2 M_i M_j M_ij + M_jj M_i^2)
                                  / (M_i^2 + M_j^2 + eps)^(3/2) |

Derivatives are taken on a Gaussian-smoothed copy of the soft mask so that
gradients flow through the field values; the boundary index set itself is
selected from the hard-thresholded mask and treated as a constant, which
keeps the measure differentiable with respect to the mask values while
preserving its value on hard masks.  Units are inverse pixels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_SIGMA = 2.0
DEFAULT_EPSILON = 1e-8


class EmptyBoundary(Exception):
    """Raised when a mask has no boundary pixel at the given threshold."""


class DegenerateSample(Exception):
    """Raised when a statistic cannot be tested (zero variance or n < 2)."""


@dataclass
class BoundarySet:
    """Boundary pixels of a thresholded mask.

    ``pixels`` is an (N_b, 2) integer array of (row, col) coordinates; every
    pixel is foreground (>= threshold) with at least one 4-neighbour below
    threshold, counting out-of-bounds neighbours as background.
    """

    pixels: np.ndarray

    @property
    def count(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class DerivativeField:
    """First/second spatial derivatives of a (smoothed) mask.

    ``m_i``/``m_ii`` run along rows (axis 0), ``m_j``/``m_jj`` along columns
    (axis 1); ``m_ij`` is the mixed derivative.  All five share the mask's
    shape and carry gradients when the input did.
    """

    m_i: torch.Tensor
    m_j: torch.Tensor
    m_ii: torch.Tensor
    m_jj: torch.Tensor
    m_ij: torch.Tensor


@dataclass
class CurvatureStats:
    mean: float
    std: float
    n: int


def _as_tensor(mask) -> torch.Tensor:
    if isinstance(mask, torch.Tensor):
        t = mask
    else:
        t = torch.as_tensor(np.asarray(mask), dtype=torch.float64)
    if t.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {tuple(t.shape)}")
    if t.shape[0] < 8 or t.shape[1] < 8:
        raise ValueError(f"mask must be at least 8x8, got {tuple(t.shape)}")
    return t


def _check_range(t: torch.Tensor) -> None:
    with torch.no_grad():
        lo, hi = t.min().item(), t.max().item()
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0.0 or hi > 1.0:
        raise ValueError(f"mask values must lie in [0,1], got [{lo}, {hi}]")


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Normalized 1-D Gaussian kernel of radius round(truncate * sigma)."""
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(mask: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding; sigma 0 is a no-op.

    Accepts H×W or B×H×W input and preserves the shape.
    """
    if sigma <= 0:
        return mask
    k = torch.as_tensor(gaussian_kernel1d(sigma), dtype=mask.dtype)
    r = (k.numel() - 1) // 2
    squeeze = mask.ndim == 2
    x = mask[None, None] if squeeze else mask[:, None]
    x = F.pad(x, (0, 0, r, r), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    x = F.pad(x, (r, r, 0, 0), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    return x[0, 0] if squeeze else x[:, 0]


def _central_diff(f: torch.Tensor, axis: int) -> torch.Tensor:
    # replicate padding keeps the output at the input shape
    squeeze = f.ndim == 2
    x = f[None, None] if squeeze else f[:, None]
    if axis == 0:
        x = F.pad(x, (0, 0, 1, 1), mode="replicate")[:, 0]
        out = (x[:, 2:, :] - x[:, :-2, :]) / 2.0
    else:
        x = F.pad(x, (1, 1, 0, 0), mode="replicate")[:, 0]
        out = (x[:, :, 2:] - x[:, :, :-2]) / 2.0
    return out[0] if squeeze else out


def extract_boundary(mask, threshold: float = DEFAULT_THRESHOLD) -> BoundarySet:
    """Boundary pixel set of `mask` thresholded at `threshold`.

    A pixel belongs to the boundary if its value is >= threshold and at
    least one of its 4-neighbours is < threshold; neighbours beyond the
    image edge count as background, so an all-one mask returns its border
    frame.  Raises EmptyBoundary when no pixel qualifies.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    t = _as_tensor(mask)
    _check_range(t)
    hard = t.detach().cpu().numpy() >= threshold
    padded = np.pad(hard, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    rows, cols = np.nonzero(hard & ~interior)
    if rows.size == 0:
        raise EmptyBoundary(f"no boundary pixel at threshold {threshold}")
    return BoundarySet(pixels=np.stack([rows, cols], axis=1))


def spatial_derivatives(mask, smoothing_sigma: float = DEFAULT_SIGMA) -> DerivativeField:
    """Central-difference derivative fields of the Gaussian-smoothed mask.

    Second derivatives are repeated central differences (D(Df)); all stencils
    use replicate padding at the image edge.
    """
    if smoothing_sigma < 0:
        raise ValueError("smoothing_sigma must be >= 0")
    t = _as_tensor(mask)
    m = gaussian_smooth(t, smoothing_sigma)
    m_i = _central_diff(m, 0)
    m_j = _central_diff(m, 1)
    return DerivativeField(
        m_i=m_i,
        m_j=m_j,
        m_ii=_central_diff(m_i, 0),
        m_jj=_central_diff(m_j, 1),
        m_ij=_central_diff(m_i, 1),
    )


def _curvature_at(field: DerivativeField, rows, cols, epsilon: float) -> torch.Tensor:
    mi = field.m_i[rows, cols]
    mj = field.m_j[rows, cols]
    num = (
        field.m_ii[rows, cols] * mj**2
        - 2.0 * mi * mj * field.m_ij[rows, cols]
        + field.m_jj[rows, cols] * mi**2
    )
    den = (mi**2 + mj**2 + epsilon) ** 1.5
    return (num / den).abs()


def mean_abs_curvature(
    mask,
    threshold: float = DEFAULT_THRESHOLD,
    smoothing_sigma: float = DEFAULT_SIGMA,
    epsilon: float = DEFAULT_EPSILON,
):
    """Mean absolute curvature over the boundary of the thresholded mask.

    Returns a float for array input, or a scalar tensor (with gradient
    history) for tensor input.  Raises EmptyBoundary for blank masks.
    """
    t = _as_tensor(mask)
    boundary = extract_boundary(t, threshold)
    field = spatial_derivatives(t, smoothing_sigma)
    rows = torch.as_tensor(boundary.pixels[:, 0])
    cols = torch.as_tensor(boundary.pixels[:, 1])
    kappa = _curvature_at(field, rows, cols, epsilon).mean()
    if isinstance(mask, torch.Tensor):
        return kappa
    return float(kappa)


def batch_mean_abs_curvature(
    masks: torch.Tensor,
    threshold: float = DEFAULT_THRESHOLD,
    smoothing_sigma: float = DEFAULT_SIGMA,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Per-mask kappa_bar for a B×H×W batch in one vectorized pass.

    Empty-boundary masks yield kappa_bar = 0; use `mean_abs_curvature` when
    the empty case must raise instead.
    """
    if masks.ndim != 3:
        raise ValueError(f"expected B×H×W batch, got shape {tuple(masks.shape)}")
    m = gaussian_smooth(masks, smoothing_sigma)
    m_i = _central_diff(m, 0)
    m_j = _central_diff(m, 1)
    m_ii = _central_diff(m_i, 0)
    m_jj = _central_diff(m_j, 1)
    m_ij = _central_diff(m_i, 1)
    num = m_ii * m_j**2 - 2.0 * m_i * m_j * m_ij + m_jj * m_i**2
    den = (m_i**2 + m_j**2 + epsilon) ** 1.5
    kappa_field = (num / den).abs()

    hard = (masks.detach().cpu().numpy() >= threshold)
    padded = np.pad(hard, ((0, 0), (1, 1), (1, 1)), constant_values=False)
    interior = (
        padded[:, :-2, 1:-1] & padded[:, 2:, 1:-1]
        & padded[:, 1:-1, :-2] & padded[:, 1:-1, 2:]
    )
    boundary = torch.as_tensor(hard & ~interior, dtype=masks.dtype)
    counts = boundary.sum(dim=(1, 2))
    sums = (kappa_field * boundary).sum(dim=(1, 2))
    return sums / counts.clamp(min=1.0)


def curvature_loss(
    generated,
    kappa_target: float,
    threshold: float = DEFAULT_THRESHOLD,
    smoothing_sigma: float = DEFAULT_SIGMA,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """| batch-mean kappa_bar - kappa_target |, differentiable in the masks.

    `generated` is a sequence of H×W soft masks or a B×H×W tensor.  Masks
    with an empty boundary contribute kappa_bar = 0 (with a warning) so the
    loss stays usable in early adversarial training.
    """
    if kappa_target <= 0:
        raise ValueError("kappa_target must be > 0")
    if isinstance(generated, torch.Tensor) and generated.ndim == 3:
        batch = generated
    else:
        masks = list(generated)
        if not masks:
            raise ValueError("empty batch")
        batch = torch.stack(
            [
                m if isinstance(m, torch.Tensor)
                else torch.as_tensor(np.asarray(m), dtype=torch.float64)
                for m in masks
            ]
        )
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    n_empty = int((batch.detach() >= threshold).sum(dim=(1, 2)).eq(0).sum())
    if n_empty:
        log.warning(
            "curvature_loss: %d/%d masks had empty boundaries", n_empty, batch.shape[0]
        )
    kappas = batch_mean_abs_curvature(batch, threshold, smoothing_sigma, epsilon)
    return (kappas.mean() - kappa_target).abs()


def curvature_stats(
    masks,
    threshold: float = DEFAULT_THRESHOLD,
    smoothing_sigma: float = DEFAULT_SIGMA,
    epsilon: float = DEFAULT_EPSILON,
) -> CurvatureStats:
    """Mean/std of per-mask kappa_bar over a corpus; empty-boundary masks are skipped."""
    masks = list(masks)
    if not masks:
        raise ValueError("empty mask list")
    values = []
    skipped = 0
    for m in masks:
        try:
            values.append(float(mean_abs_curvature(m, threshold, smoothing_sigma, epsilon)))
        except EmptyBoundary:
            skipped += 1
    if skipped:
        log.warning("curvature_stats: skipped %d/%d empty-boundary masks", skipped, len(masks))
    if not values:
        raise EmptyBoundary("all masks had empty boundaries")
    arr = np.asarray(values)
    return CurvatureStats(mean=float(arr.mean()), std=float(arr.std()), n=len(values))


def welch_t_test(a: CurvatureStats, b: CurvatureStats) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test on two stats."""
    if a.n < 2 or b.n < 2:
        raise DegenerateSample("both samples need n >= 2")
    if a.std <= 0 or b.std <= 0:
        raise DegenerateSample("zero-variance sample")
    from scipy import stats

    res = stats.ttest_ind_from_stats(
        a.mean, a.std, a.n, b.mean, b.std, b.n, equal_var=False
    )
    return float(res.pvalue)
