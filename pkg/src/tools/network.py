"""
network.py

Two-input encoder-decoder used for style transfer, embedding and extraction:

    concat(a, b) → log2(S) down stages (conv 4×4 s2, norm, LeakyReLU)
                 → log2(S)−1 up stages (convT 4×4 s2, norm, dropout, ReLU) with skips
                 → final convT to 3 channels → tanh

No pooling and no cropping; every stage halves or doubles the spatial size.
A ``HidingNetwork`` instance is the weight set; its ``spec`` describes the
architecture and its fingerprint guards checkpoint compatibility.
"""
from __future__ import annotations

import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import humanize
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

from ..utils.errors import IncompatibleCheckpointError, InputShapeError
from ..utils.logging_config import module_logger

logger = module_logger('NETWORK', 'network')

CHECKPOINT_FORMAT = "style-stego-weights/1"
INIT_STD = 0.02

__all__ = [
    "NetworkSpec",
    "HidingNetwork",
    "build",
    "infer",
    "parameter_count",
    "save_weights",
    "load_weights",
    "manifest_path",
]


class NetworkSpec(BaseModel):
    """Layer schedule of the encoder-decoder.

    Omitted ``up_channels``/``down_norm``/``up_norm`` are derived: the up path
    mirrors the down path, every stage but the first down stage is normalized.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = 128
    input_channels_per_image: int = 3
    down_channels: tuple[int, ...] = (64, 128, 256, 512, 512, 512, 512)
    up_channels: tuple[int, ...] = ()
    kernel_size: int = 4
    stride: int = 2
    dropout_stages: tuple[int, ...] = (0, 1)
    dropout_rate: float = 0.5
    down_norm: tuple[bool, ...] = ()
    up_norm: tuple[bool, ...] = ()
    leaky_slope: float = 0.2

    @model_validator(mode="before")
    @classmethod
    def _derive_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        down = tuple(data.get("down_channels") or cls.model_fields["down_channels"].default)
        if not data.get("up_channels"):
            data["up_channels"] = tuple(reversed(down[:-1]))
        if not data.get("down_norm"):
            data["down_norm"] = (False,) + (True,) * (len(down) - 1)
        if not data.get("up_norm"):
            data["up_norm"] = (True,) * (len(down) - 1)
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "NetworkSpec":
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 8, got {s}")
        stages = int(math.log2(s))
        if len(self.down_channels) != stages:
            raise ValueError(
                f"down_channels must have log2(image_size)={stages} entries to reach a 1x1 bottleneck, "
                f"got {len(self.down_channels)}"
            )
        if any(c <= 0 for c in self.down_channels + self.up_channels):
            raise ValueError("channel widths must be positive")
        if len(self.up_channels) != stages - 1:
            raise ValueError(f"up_channels must have {stages - 1} entries, got {len(self.up_channels)}")
        if self.kernel_size != 4 or self.stride != 2:
            raise ValueError("every stage uses kernel_size 4 and stride 2")
        if tuple(self.dropout_stages) != (0, 1) or self.dropout_rate != 0.5:
            raise ValueError("dropout_stages must be exactly the first two up stages at dropout_rate 0.5")
        if self.down_norm != (False,) + (True,) * (stages - 1) or self.up_norm != (True,) * (stages - 1):
            raise ValueError("normalization is required on every stage except the first down stage")
        if self.input_channels_per_image != 3:
            raise ValueError("input_channels_per_image must be 3 (RGB)")
        return self

    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class StageNorm(nn.BatchNorm2d):
    """BatchNorm that falls back to its running statistics when a training batch
    holds a single value per channel (batch 1 at the 1×1 bottleneck)."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                training=False, momentum=0.0, eps=self.eps)
        return super().forward(x)


def _down_stage(cin: int, cout: int, norm: bool, slope: float) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(StageNorm(cout))
    layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


def _up_stage(cin: int, cout: int, norm: bool, dropout: float) -> nn.Sequential:
    layers: list[nn.Module] = [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(StageNorm(cout))
    if dropout:
        layers.append(nn.Dropout(dropout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class HidingNetwork(nn.Module):
    def __init__(self, spec: NetworkSpec) -> None:
        super().__init__()
        self.spec = spec
        down, up = spec.down_channels, spec.up_channels
        n = len(down)

        cin = 2 * spec.input_channels_per_image
        self.down = nn.ModuleList()
        for i, cout in enumerate(down):
            self.down.append(_down_stage(cin, cout, spec.down_norm[i], spec.leaky_slope))
            cin = cout

        self.up = nn.ModuleList()
        for i, cout in enumerate(up):
            dropout = spec.dropout_rate if i in spec.dropout_stages else 0.0
            self.up.append(_up_stage(cin, cout, spec.up_norm[i], dropout))
            cin = cout + down[n - 2 - i]

        self.final = nn.Sequential(nn.ConvTranspose2d(cin, 3, 4, stride=2, padding=1), nn.Tanh())

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint()

    def _check_inputs(self, a: torch.Tensor, b: torch.Tensor) -> None:
        s = self.spec.image_size
        expected = (3, s, s)
        for name, t in (("a", a), ("b", b)):
            if t.ndim not in (3, 4) or tuple(t.shape[-3:]) != expected:
                raise InputShapeError(f"input {name} must be (B,)3x{s}x{s}, got {tuple(t.shape)}")
        if a.shape != b.shape:
            raise InputShapeError(f"inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")

    def forward(self, a: torch.Tensor, b: torch.Tensor, trace: list[torch.Size] | None = None) -> torch.Tensor:
        """F(a, b). With *trace* given, every stage's output shape is appended to it."""
        self._check_inputs(a, b)
        unbatched = a.ndim == 3
        if unbatched:
            a, b = a.unsqueeze(0), b.unsqueeze(0)

        h = torch.cat([a, b], dim=1)
        skips: list[torch.Tensor] = []
        for stage in self.down:
            h = stage(h)
            skips.append(h)
            if trace is not None:
                trace.append(h.shape)

        h = skips.pop()
        for stage in self.up:
            h = stage(h)
            if trace is not None:
                trace.append(h.shape)
            h = torch.cat([h, skips.pop()], dim=1)

        out = self.final(h)
        if trace is not None:
            trace.append(out.shape)
        return out.squeeze(0) if unbatched else out

    def stage_shapes(self, a: torch.Tensor, b: torch.Tensor) -> list[tuple[int, ...]]:
        """Per-stage activation shapes (C, H, W), down stages first."""
        trace: list[torch.Size] = []
        with torch.no_grad():
            self.forward(to_batch(a), to_batch(b), trace=trace)
        return [tuple(shape[1:]) for shape in trace]


def to_batch(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.ndim == 3 else t


def _initialize(net: HidingNetwork, seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.normal_(0.0, INIT_STD, generator=generator)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.normal_(1.0, INIT_STD, generator=generator)
                module.bias.zero_()


def build(spec: NetworkSpec, seed: int = 0) -> HidingNetwork:
    """Instantiate the network with Gaussian(0, 0.02) kernels, deterministic under *seed*."""
    net = HidingNetwork(spec)
    _initialize(net, seed)
    logger.info(
        f"Built network S={spec.image_size} down={list(spec.down_channels)} "
        f"({humanize.intcomma(parameter_count(net))} parameters, fingerprint {spec.fingerprint()[:12]})"
    )
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def infer(net: HidingNetwork, a: torch.Tensor, b: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Inference-mode F(a, b) on the network's device; returns a CPU tensor shaped like *a*."""
    net.eval()
    device = next(net.parameters()).device
    unbatched = a.ndim == 3
    a, b = to_batch(a), to_batch(b)
    outputs = []
    with torch.no_grad():
        for start in range(0, a.shape[0], batch_size):
            chunk_a = a[start:start + batch_size].to(device)
            chunk_b = b[start:start + batch_size].to(device)
            outputs.append(net(chunk_a, chunk_b).cpu())
    out = torch.cat(outputs) if outputs else torch.empty_like(a)
    return out.squeeze(0) if unbatched else out


# ------------------------------------------------------------------
#  Checkpoints: binary blob + textual manifest
# ------------------------------------------------------------------
def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix('.json')


def save_weights(net: HidingNetwork, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fingerprint = net.fingerprint
    state = {k: v.detach().cpu() for k, v in net.state_dict().items()}
    torch.save({"format": CHECKPOINT_FORMAT, "fingerprint": fingerprint, "state_dict": state}, path)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "fingerprint": fingerprint,
        "spec": net.spec.model_dump(mode="json"),
        "parameter_count": parameter_count(net),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "torch_version": torch.__version__,
        "metadata": metadata or {},
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info(f"Saved weights to {path} ({humanize.naturalsize(path.stat().st_size)})")
    return path


def load_weights(path: str | Path, expected_spec: NetworkSpec | None = None, map_location: str | torch.device = 'cpu') -> HidingNetwork:
    """Load a checkpoint, verifying the fingerprint of its manifest, its blob and *expected_spec*."""
    path = Path(path)
    manifest_file = manifest_path(path)
    if not path.exists() or not manifest_file.exists():
        logger.error(f"Checkpoint {path} or its manifest {manifest_file} is missing.")
        raise FileNotFoundError(f"checkpoint not found: {path}")

    manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    try:
        spec = NetworkSpec(**manifest["spec"])
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"manifest {manifest_file} holds an invalid spec: {exc}") from exc

    recorded = manifest.get("fingerprint")
    if spec.fingerprint() != recorded:
        logger.error(f"Manifest spec of {path} does not match its fingerprint {recorded}")
        raise IncompatibleCheckpointError(f"spec in {manifest_file} does not match fingerprint {recorded}")
    if expected_spec is not None and expected_spec.fingerprint() != recorded:
        logger.error(f"Checkpoint {path} was built for a different architecture.")
        raise IncompatibleCheckpointError(
            f"checkpoint fingerprint {recorded[:12]} != expected {expected_spec.fingerprint()[:12]}"
        )

    blob = torch.load(path, map_location=map_location, weights_only=True)
    if blob.get("fingerprint") != recorded:
        raise IncompatibleCheckpointError(f"weight blob {path} does not belong to manifest {manifest_file}")

    net = HidingNetwork(spec)
    try:
        net.load_state_dict(blob["state_dict"], strict=True)
    except RuntimeError as exc:
        raise IncompatibleCheckpointError(f"weights in {path} do not fit the architecture: {exc}") from exc
    net.to(map_location)
    net.eval()
    logger.info(f"Loaded weights from {path} (fingerprint {recorded[:12]})")
    return net
