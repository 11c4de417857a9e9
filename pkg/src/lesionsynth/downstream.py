"""Downstream augmentation experiments: classification and segmentation.

Each grid arm trains a compact model (well under 1M parameters) on the real
training split extended either by synthetic records at a given ratio or by
ordinary augmentation, then evaluates on held-out data.  The test split is
carved out before any mixing and synthetic records can never reach it; for
segmentation an external phantom family with different speckle statistics
doubles as an out-of-distribution test set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetRecord, TumorClass, mix_synthetic, ordinary_augment

log = logging.getLogger(__name__)


class SingleClass(Exception):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Rank-statistic (Mann-Whitney) AUC with tie correction via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1(predictions, labels) -> float:
    """F1 with malignant (1) as the positive class; 0 when P + R = 0."""
    predictions = np.asarray(predictions).astype(int)
    labels = np.asarray(labels).astype(int)
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2.0 * precision * recall / (precision + recall))


def dsc(pred_mask, true_mask) -> float:
    """Dice coefficient 2|A∩B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(pred_mask) >= 0.5
    b = np.asarray(true_mask) >= 0.5
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * int((a & b).sum()) / total)


# ---------------------------------------------------------------------------
# Compact models
# ---------------------------------------------------------------------------


class CompactClassifier(nn.Module):
    """~25k-parameter CNN classifier (benign/malignant)."""

    model_id = "compact-cnn-cls"

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(64, 2),
        )

    def forward(self, x):
        return self.net(x)


class CompactSegmenter(nn.Module):
    """~60k-parameter encoder-decoder with a single skip connection."""

    model_id = "compact-unet-seg"

    def __init__(self):
        super().__init__()
        self.enc1 = nn.Sequential(nn.Conv2d(1, 16, 3, padding=1), nn.ReLU())
        self.down = nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU())
        self.mid = nn.Sequential(nn.Conv2d(32, 32, 3, padding=1), nn.ReLU())
        self.up = nn.Conv2d(32, 16, 3, padding=1)
        self.out = nn.Conv2d(32, 1, 3, padding=1)

    def forward(self, x):
        s1 = self.enc1(x)
        h = self.mid(self.down(s1))
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(torch.cat([h, s1], dim=1))[:, 0]


# ---------------------------------------------------------------------------
# Experiment grid
# ---------------------------------------------------------------------------


@dataclass
class ExperimentGrid:
    task: str  # "classification" | "segmentation"
    ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0])
    include_ordinary: bool = True
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 20
    lr: float = 1e-5
    batch_size: int = 24

    def arms(self) -> list[str]:
        out = [f"{int(round(r * 100))}%" for r in self.ratios]
        if self.include_ordinary:
            out.insert(1, "ordinary")
        return out


@dataclass
class MetricRecord:
    task: str
    model_id: str
    ratio_arm: str
    seed: int
    metrics: dict[str, float]
    train_ids: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        return cls(**json.loads(line))


def _stack(records: list[DatasetRecord]):
    images = torch.as_tensor(np.stack([r.image for r in records]), dtype=torch.float32)
    masks = torch.as_tensor(np.stack([r.mask for r in records]).astype(np.float32))
    labels = torch.as_tensor([int(r.tumor_class) for r in records])
    return images, masks, labels


def _build_arm_training_set(
    arm: str, real_train: list[DatasetRecord], synthetic_pool: list[DatasetRecord], seed: int
) -> list[DatasetRecord]:
    if arm == "ordinary":
        rng = np.random.default_rng(seed)
        return list(real_train) + [ordinary_augment(r, rng) for r in real_train]
    ratio = float(arm.rstrip("%")) / 100.0
    return mix_synthetic(real_train, synthetic_pool, ratio)


def _train_model(records, task: str, grid: ExperimentGrid, seed: int):
    torch.manual_seed(seed)
    model = CompactClassifier() if task == "classification" else CompactSegmenter()
    images, masks, labels = _stack(records)
    opt = torch.optim.Adam(model.parameters(), lr=grid.lr)
    gen = torch.Generator().manual_seed(seed)
    n = len(records)
    for _ in range(grid.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, grid.batch_size):
            idx = order[start : start + grid.batch_size]
            x = images[idx][:, None]
            if task == "classification":
                loss = F.cross_entropy(model(x), labels[idx])
            else:
                loss = F.binary_cross_entropy_with_logits(model(x), masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def _evaluate(model, records, task: str) -> dict[str, float]:
    images, masks, labels = _stack(records)
    if task == "classification":
        logits = model(images[:, None])
        scores = torch.softmax(logits, dim=1)[:, 1].numpy()
        preds = logits.argmax(dim=1).numpy()
        return {
            "auc": auc(scores, labels.numpy()),
            "f1": f1(preds, labels.numpy()),
        }
    preds = torch.sigmoid(model(images[:, None])).numpy()
    dscs = [dsc(p, m) for p, m in zip(preds, masks.numpy())]
    return {"dsc": float(np.mean(dscs))}


def run_grid(
    grid: ExperimentGrid,
    real_train: list[DatasetRecord],
    test: list[DatasetRecord],
    synthetic_pool: list[DatasetRecord],
    external_test: list[DatasetRecord] | None = None,
) -> list[MetricRecord]:
    """Train/evaluate one model per (arm, seed); the test split is fixed upfront."""
    test_ids = {r.record_id for r in test}
    assert not test_ids & {r.record_id for r in real_train}, "train/test overlap"
    assert not test_ids & {r.record_id for r in synthetic_pool}, "synthetic/test overlap"
    out: list[MetricRecord] = []
    for arm in grid.arms():
        for seed in grid.seeds:
            training = _build_arm_training_set(arm, real_train, synthetic_pool, seed)
            model = _train_model(training, grid.task, grid, seed)
            metrics = _evaluate(model, test, grid.task)
            if grid.task == "segmentation" and external_test:
                metrics["dsc_external"] = _evaluate(model, external_test, grid.task)["dsc"]
                metrics["dsc_internal"] = metrics.pop("dsc")
            out.append(
                MetricRecord(
                    task=grid.task,
                    model_id=model.model_id,
                    ratio_arm=arm,
                    seed=seed,
                    metrics=metrics,
                    train_ids=[r.record_id for r in training],
                )
            )
            log.info("arm=%s seed=%d: %s", arm, seed, metrics)
    return out


# ---------------------------------------------------------------------------
# Results store and summary
# ---------------------------------------------------------------------------


def save_records(records: list[MetricRecord], path) -> None:
    """Append-only newline-delimited store; one JSON record per line."""
    with open(path, "a") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def load_records(path) -> list[MetricRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(MetricRecord.from_json(line))
    return out


def summarize(records: list[MetricRecord], fmt: str = "text") -> str:
    """mean±std per (model, arm, metric); the best arm per metric is bolded."""
    groups: dict[tuple[str, str, str], list[float]] = {}
    for rec in records:
        for metric, value in rec.metrics.items():
            groups.setdefault((rec.model_id, rec.ratio_arm, metric), []).append(value)
    cells: dict[tuple[str, str, str], tuple[float, float]] = {
        key: (float(np.mean(vals)), float(np.std(vals))) for key, vals in groups.items()
    }
    models = sorted({k[0] for k in cells})
    arms = sorted({k[1] for k in cells}, key=_arm_order)
    metrics = sorted({k[2] for k in cells})

    if fmt == "csv":
        lines = ["model,arm,metric,mean,std"]
        for m in models:
            for a in arms:
                for met in metrics:
                    if (m, a, met) in cells:
                        mu, sd = cells[(m, a, met)]
                        lines.append(f"{m},{a},{met},{mu:.6f},{sd:.6f}")
        return "\n".join(lines)

    lines = []
    for m in models:
        for met in metrics:
            present = [a for a in arms if (m, a, met) in cells]
            if not present:
                continue
            best = max(present, key=lambda a: cells[(m, a, met)][0])
            row = [f"{m} / {met}:"]
            for a in present:
                mu, sd = cells[(m, a, met)]
                cell = f"{a}={mu:.3f}±{sd:.3f}"
                if a == best:
                    cell = f"**{cell}**"
                row.append(cell)
            lines.append("  ".join(row))
    return "\n".join(lines)


def _arm_order(arm: str):
    if arm == "ordinary":
        return (0, 0.01)  # sits between the 0% baseline and the ratio arms
    return (0, float(arm.rstrip("%")) / 100.0) if arm.endswith("%") else (1, 0.0)
