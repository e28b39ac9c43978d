"""
steganalyzer.py

Small cover-vs-stego classifier: a fixed 5×5 KV high-pass filter produces
residuals, then four conv stages (abs + BN + tanh on the first), global
average pooling and a two-way linear head.

Samples are split at the pair level (a cover and its stego always land in
the same section): 20% test, and 10% of the remainder for validation.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import binomtest
from torch import nn
from tqdm import tqdm

from ..utils.errors import DetectorDataError
from ..utils.logging_config import module_logger
from .image_model import IMG_EXTENSIONS, load_image, normalize

logger = module_logger('STEGANALYZER', 'steganalyzer')

KV_KERNEL = (
    (-1, 2, -2, 2, -1),
    (2, -6, 8, -6, 2),
    (-2, 8, -12, 8, -2),
    (2, -6, 8, -6, 2),
    (-1, 2, -2, 2, -1),
)
MAX_MAJORITY_FRACTION = 0.6

__all__ = [
    "DetectorSpec",
    "Detector",
    "DetectorResult",
    "PairSplit",
    "split_pairs",
    "train_detector",
    "detector_accuracy",
    "shuffled_label_pvalue",
    "load_pairs",
    "write_accuracy_csv",
]


class DetectorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    learning_rate: float = Field(1e-3, gt=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0
    device: str = "cpu"


class Detector(nn.Module):
    def __init__(self, spec: DetectorSpec) -> None:
        super().__init__()
        self.spec = spec
        kernel = torch.tensor(KV_KERNEL, dtype=torch.float32) / 12.0
        # one residual per colour channel; a buffer so the optimizer never sees it
        self.register_buffer("high_pass", kernel.expand(3, 1, 5, 5).clone())
        w1, w2, w3, w4 = spec.widths
        self.conv1 = nn.Conv2d(3, w1, 5, padding=2, bias=False)
        self.bn1 = nn.BatchNorm2d(w1)
        self.conv2 = nn.Conv2d(w1, w2, 5, padding=2, bias=False)
        self.bn2 = nn.BatchNorm2d(w2)
        self.block = nn.Sequential(
            nn.Conv2d(w2, w3, 1, bias=False), nn.BatchNorm2d(w3), nn.ReLU(), nn.AvgPool2d(5, 2, 2),
            nn.Conv2d(w3, w4, 1, bias=False), nn.BatchNorm2d(w4), nn.ReLU(),
        )
        self.pool = nn.AvgPool2d(5, 2, 2)
        self.head = nn.Linear(w4, 2)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.high_pass, padding=2, groups=3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.residual(x)
        out = self.pool(torch.tanh(self.bn1(torch.abs(self.conv1(out)))))
        out = self.pool(torch.tanh(self.bn2(self.conv2(out))))
        out = self.block(out)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.head(out)


@dataclass
class PairSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass
class DetectorResult:
    detector: Detector
    split: PairSplit
    test_accuracy: float
    validation_accuracy: float
    n_test: int
    history: list[float] = field(default_factory=list)
    labels_shuffled: bool = False


def split_pairs(n_pairs: int, seed: int = 0, test_fraction: float = 0.2, validation_fraction: float = 0.1) -> PairSplit:
    perm = np.random.default_rng([seed, n_pairs]).permutation(n_pairs)
    n_test = max(1, int(round(n_pairs * test_fraction)))
    n_fit = n_pairs - n_test
    n_val = int(round(n_fit * validation_fraction))
    return PairSplit(train=perm[:n_fit - n_val], validation=perm[n_fit - n_val:n_fit], test=perm[n_fit:])


def _check_balance(n_covers: int, n_stegos: int) -> int:
    total = n_covers + n_stegos
    if n_covers == 0 or n_stegos == 0:
        raise DetectorDataError(f"need both classes, got {n_covers} covers and {n_stegos} stegos")
    majority = max(n_covers, n_stegos) / total
    if majority > MAX_MAJORITY_FRACTION:
        logger.error(f"Class imbalance {n_covers}/{n_stegos} exceeds 60/40")
        raise DetectorDataError(f"class imbalance {n_covers} covers vs {n_stegos} stegos exceeds 60/40")
    if n_covers != n_stegos:
        logger.warning(f"Unpaired samples dropped: {n_covers} covers vs {n_stegos} stegos")
    return min(n_covers, n_stegos)


def _samples(covers: torch.Tensor, stegos: torch.Tensor, pairs: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    index = torch.as_tensor(pairs, dtype=torch.long)
    images = torch.cat([covers[index], stegos[index]])
    labels = torch.cat([torch.zeros(len(pairs), dtype=torch.long), torch.ones(len(pairs), dtype=torch.long)])
    return images, labels


def detector_accuracy(detector: Detector, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 64) -> float:
    """Fraction of *images* whose predicted class equals *labels*."""
    if len(images) == 0:
        raise DetectorDataError("accuracy of an empty test set is undefined")
    detector.eval()
    device = next(detector.parameters()).device
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = detector(images[start:start + batch_size].to(device))
            correct += int((logits.argmax(dim=1).cpu() == labels[start:start + batch_size]).sum())
    return correct / len(images)


def train_detector(
    covers: torch.Tensor,
    stegos: torch.Tensor,
    spec: DetectorSpec = DetectorSpec(),
    shuffle_labels: bool = False,
    show_progress: bool = True,
) -> DetectorResult:
    """
    Fit the detector on paired (cover, stego) tensors and report held-out accuracy.

    With *shuffle_labels* every label is permuted before splitting, giving the
    no-signal control whose accuracy should sit at chance.
    """
    start_time = time.time()
    n_pairs = _check_balance(len(covers), len(stegos))
    split = split_pairs(n_pairs, spec.seed, spec.test_fraction, spec.validation_fraction)
    covers, stegos = covers[:n_pairs], stegos[:n_pairs]

    sections = {name: _samples(covers, stegos, getattr(split, name)) for name in ("train", "validation", "test")}
    if shuffle_labels:
        rng = np.random.default_rng([spec.seed, 1])
        for name, (images, labels) in sections.items():
            sections[name] = (images, labels[torch.as_tensor(rng.permutation(len(labels)))])
    train_x, train_y = sections["train"]
    if len(train_x) == 0:
        raise DetectorDataError(f"{n_pairs} pair(s) leave no training samples")

    with torch.random.fork_rng():
        torch.manual_seed(spec.seed)
        detector = Detector(spec)
    detector.to(spec.device)
    optimizer = torch.optim.Adam(detector.parameters(), lr=spec.learning_rate)
    generator = torch.Generator().manual_seed(spec.seed)

    best_state, best_val, history = None, -1.0, []
    for _ in tqdm(range(spec.epochs), desc="Detector", unit="epoch", disable=not show_progress):
        detector.train()
        order = torch.randperm(len(train_x), generator=generator)
        for start in range(0, len(order), spec.batch_size):
            idx = order[start:start + spec.batch_size]
            if len(idx) < 2:
                continue
            logits = detector(train_x[idx].to(spec.device))
            loss = F.cross_entropy(logits, train_y[idx].to(spec.device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        val_x, val_y = sections["validation"]
        score = detector_accuracy(detector, val_x, val_y) if len(val_x) else detector_accuracy(detector, train_x, train_y)
        history.append(score)
        if score > best_val:
            best_val = score
            best_state = {k: v.detach().clone() for k, v in detector.state_dict().items()}

    if best_state is not None:
        detector.load_state_dict(best_state)
    test_x, test_y = sections["test"]
    accuracy = detector_accuracy(detector, test_x, test_y)
    logger.info(
        f"Detector trained on {len(train_x)} samples in {time.time() - start_time:.2f} seconds: "
        f"test accuracy {accuracy:.3f} on {len(test_x)} samples"
        + (" (labels shuffled)" if shuffle_labels else "")
    )
    return DetectorResult(detector, split, accuracy, best_val, len(test_x), history, shuffle_labels)


def shuffled_label_pvalue(accuracy: float, n: int) -> float:
    """Two-sided binomial p-value of *accuracy* over *n* samples against chance."""
    if n <= 0:
        raise DetectorDataError("p-value needs at least one sample")
    return float(binomtest(int(round(accuracy * n)), n, 0.5).pvalue)


def load_pairs(cover_dir: str | Path, stego_dir: str | Path, size: int | None = None) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Read every cover/stego file matched by name; unmatched files count toward the balance check."""
    cover_dir, stego_dir = Path(cover_dir), Path(stego_dir)
    for directory in (cover_dir, stego_dir):
        if not directory.is_dir():
            logger.error(f"Detector input directory {directory} does not exist.")
            raise FileNotFoundError(f"directory not found: {directory}")

    def names(directory: Path) -> set[str]:
        return {p.name for p in directory.iterdir() if p.suffix.lower() in IMG_EXTENSIONS}

    cover_names, stego_names = names(cover_dir), names(stego_dir)
    _check_balance(len(cover_names), len(stego_names))
    shared = sorted(cover_names & stego_names)
    if not shared:
        raise DetectorDataError(f"no filenames shared between {cover_dir} and {stego_dir}")
    covers = torch.stack([normalize(load_image(cover_dir / n, size)) for n in shared])
    stegos = torch.stack([normalize(load_image(stego_dir / n, size)) for n in shared])
    return covers, stegos, shared


def write_accuracy_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=["al", "test_accuracy", "n_test", "shuffled_accuracy", "shuffled_pvalue"])
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote detector accuracies to {path}")
    return path
