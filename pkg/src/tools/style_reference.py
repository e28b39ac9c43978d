"""
style_reference.py

Ground-truth style images z_g and the fixed style image y.

builtin mode
    z_g = reference_transform(x): channel mixing followed by a per-channel gamma.
    y is the same transform applied to a procedurally generated canonical image.
external_directory mode
    z_g is read from a directory mirroring the dataset filenames; y from a file.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict

from ..utils.errors import ConfigurationError, MissingGroundTruthError
from ..utils.logging_config import module_logger
from .image_model import load_image, normalize

logger = module_logger('STYLE_REFERENCE', 'style_reference')

# half sepia, half identity: warm tint with a well-conditioned matrix
DEFAULT_MATRIX: tuple[tuple[float, float, float], ...] = (
    (0.6965, 0.3845, 0.0945),
    (0.1745, 0.8430, 0.0840),
    (0.1360, 0.2670, 0.5655),
)
DEFAULT_GAMMA: tuple[float, float, float] = (0.9, 1.0, 1.2)
IDENTITY_MATRIX = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

__all__ = [
    "TransformParams",
    "StyleGroundTruthSource",
    "reference_transform",
    "ground_truth_for",
    "ground_truths",
    "canonical_image",
    "style_image",
]


class TransformParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    matrix: tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]] = DEFAULT_MATRIX
    gamma: tuple[float, float, float] = DEFAULT_GAMMA

    def check(self) -> None:
        det = float(np.linalg.det(np.asarray(self.matrix, dtype=np.float64)))
        if abs(det) < 1e-6:
            logger.error(f"Channel-mixing matrix is singular (det={det:.3g})")
            raise ConfigurationError(f"style transform matrix is singular (det={det:.3g})")
        if any(g <= 0 for g in self.gamma):
            logger.error(f"Non-positive gamma {self.gamma}")
            raise ConfigurationError(f"style transform gamma must be positive, got {self.gamma}")

    @property
    def is_identity(self) -> bool:
        return np.allclose(self.matrix, IDENTITY_MATRIX) and np.allclose(self.gamma, 1.0)


class StyleGroundTruthSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["builtin", "external_directory"] = "builtin"
    transform: TransformParams = TransformParams()
    ground_truth_dir: str | None = None
    style_image_path: str | None = None

    def check(self) -> None:
        if self.mode == "builtin":
            self.transform.check()
            if self.transform.is_identity:
                raise ConfigurationError("builtin style transform must not be the identity")
        elif not self.ground_truth_dir:
            raise ConfigurationError("external_directory mode needs ground_truth_dir")


def reference_transform(x: torch.Tensor, params: TransformParams = TransformParams()) -> torch.Tensor:
    """Map [-1,1] → [0,1], mix channels, clamp, apply gamma, map back. Accepts (3,H,W) or (B,3,H,W)."""
    params.check()
    matrix = torch.tensor(params.matrix, dtype=x.dtype, device=x.device)
    gamma = torch.tensor(params.gamma, dtype=x.dtype, device=x.device).view(3, 1, 1)
    unit = (x + 1.0) / 2.0
    mixed = torch.einsum('ij,...jhw->...ihw', matrix, unit).clamp(0.0, 1.0)
    return mixed.pow(gamma) * 2.0 - 1.0


def canonical_image(size: int) -> np.ndarray:
    """Deterministic textured RGB image (sine gradients) from which the builtin y is derived."""
    coords = np.linspace(0.0, 1.0, size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    red = 0.5 + 0.5 * np.sin(2 * np.pi * (3 * xx + yy))
    green = 0.5 + 0.5 * np.sin(2 * np.pi * (2 * yy - xx) + 1.0)
    blue = 0.5 + 0.5 * np.cos(2 * np.pi * 5 * xx * yy)
    return np.round(np.stack([red, green, blue], axis=-1) * 255).astype(np.uint8)


def style_image(source: StyleGroundTruthSource, size: int, base_dir: str | Path = '.') -> torch.Tensor:
    """The fixed y every style pass is conditioned on."""
    source.check()
    if source.style_image_path:
        path = Path(base_dir) / source.style_image_path
        if not path.exists():
            logger.error(f"Style image {path} is missing.")
            raise ConfigurationError(f"style image not found: {path}")
        return normalize(load_image(path, size))
    if source.mode == "external_directory":
        raise ConfigurationError("external_directory mode needs style_image_path")
    return reference_transform(normalize(canonical_image(size)), source.transform)


def ground_truth_for(
    x_id: str,
    source: StyleGroundTruthSource,
    x: torch.Tensor | None = None,
    size: int | None = None,
    base_dir: str | Path = '.',
) -> torch.Tensor:
    if source.mode == "builtin":
        if x is None:
            raise ConfigurationError(f"builtin ground truth for {x_id} needs the image itself")
        source.check()
        return reference_transform(x, source.transform)

    source.check()
    path = Path(base_dir) / source.ground_truth_dir / x_id
    if not path.exists():
        logger.error(f"Ground truth for {x_id} missing at {path}")
        raise MissingGroundTruthError(f"no ground-truth image for {x_id} at {path}")
    if size is None and x is not None:
        size = x.shape[-1]
    return normalize(load_image(path, size))


def ground_truths(
    ids: Sequence[str],
    images: Mapping[str, np.ndarray],
    source: StyleGroundTruthSource,
    base_dir: str | Path = '.',
) -> torch.Tensor:
    """Stacked z_g for *ids* as (B, 3, S, S); every missing external file is reported together."""
    if not ids:
        return torch.empty(0)
    if source.mode == "external_directory":
        root = Path(base_dir) / (source.ground_truth_dir or '')
        missing = [i for i in ids if not (root / i).exists()]
        if missing:
            logger.error(f"{len(missing)} ground-truth file(s) missing under {root}")
            raise MissingGroundTruthError(f"missing ground truth under {root}: {', '.join(missing)}")
    return torch.stack([
        ground_truth_for(i, source, normalize(images[i]), base_dir=base_dir) for i in ids
    ])
