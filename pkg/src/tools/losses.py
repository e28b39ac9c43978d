"""Style, hiding and joint objectives under a selectable L1/L2 distance.

Every distance is divided by M, the element count of the target tensor, so
l1 is the mean absolute error and l2 the mean squared error.
"""
from __future__ import annotations

from typing import Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from ..utils.errors import InputShapeError

__all__ = ["LossConfig", "distance", "style_loss", "hiding_loss", "hiding_terms", "joint_loss"]


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha1: float = Field(1.0, gt=0, description="weight on the extraction term")
    alpha2: float = Field(1.0, gt=0, description="weight on the hiding loss")
    norm: Literal["l1", "l2"] = "l1"


def distance(pred: torch.Tensor, target: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    if pred.shape != target.shape:
        raise InputShapeError(f"loss operands differ in shape: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if norm == "l1":
        return F.l1_loss(pred, target, reduction="mean")
    if norm == "l2":
        return F.mse_loss(pred, target, reduction="mean")
    raise ValueError(f"unknown norm {norm!r}")


def style_loss(z_pred: torch.Tensor, z_g: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    return distance(z_pred, z_g, norm)


def hiding_terms(
    s: torch.Tensor, c: torch.Tensor, m_hat: torch.Tensor, m: torch.Tensor, cfg: LossConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """(fidelity, extraction) parts of the hiding loss, unweighted."""
    return distance(s, c, cfg.norm), distance(m_hat, m, cfg.norm)


def hiding_loss(s: torch.Tensor, c: torch.Tensor, m_hat: torch.Tensor, m: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """dist(s, c) + α₁·dist(m̂, m)."""
    fidelity, extraction = hiding_terms(s, c, m_hat, m, cfg)
    return fidelity + cfg.alpha1 * extraction


def joint_loss(style_value: torch.Tensor | float, hiding_value: torch.Tensor | float, cfg: LossConfig):
    return style_value + cfg.alpha2 * hiding_value
