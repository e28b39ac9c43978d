"""
trainer.py

Joint optimisation of the three tasks. Each step runs

    z     = F(x, y)              style transfer
    s     = F(c, m)              embedding
    m_hat = F(noise(s), r)       extraction (noise only on this branch)

sums style + α₂·(fidelity + α₁·extraction) and applies one Adam update.

Long-running job contract: an
optional ``progress_callback(step, losses)`` after every step and a
``threading.Event`` that, once set, finishes the current step, writes a
resumable state checkpoint and returns.
"""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from threading import Event
from typing import Callable, Literal, Optional

import humanize
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from ..utils.errors import ConfigurationError, IncompatibleCheckpointError, TrainingAbortedError
from ..utils.logging_config import module_logger
from .evaluation import ber, hide_and_recover, psnr
from .image_model import DatasetSplit, denormalize
from .losses import LossConfig, hiding_terms, joint_loss, style_loss
from .message_codec import ENCODINGS, actual_length, encode_plane, make_trigger, random_bits
from .network import HidingNetwork, NetworkSpec, build, save_weights
from .style_reference import StyleGroundTruthSource, ground_truths, style_image

logger = module_logger('TRAINER', 'trainer')

LOG_COLUMNS = ("step", "L_style", "L_fidelity", "L_extract", "L_total", "wall_time")
STATE_FORMAT = "style-stego-train-state/1"
# keys that may change between an interrupted run and its resumption
RESUMABLE_OVERRIDES = {"epochs", "device", "checkpoint_interval"}

__all__ = [
    "TrainConfig",
    "TrainingData",
    "TrainState",
    "StepLosses",
    "ValidationRecord",
    "TrainResult",
    "make_trigger",
    "new_state",
    "train_step",
    "validate",
    "train",
    "save_training_state",
    "load_training_state",
]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-4, gt=0)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    batch_size: int = Field(1, ge=1)
    epochs: int = Field(1, ge=0)
    block_size: int = Field(8, ge=1)
    loss: LossConfig = LossConfig()
    noise_sigmas: tuple[float, ...] = ()
    seed: int = 0
    checkpoint_interval: int = Field(0, ge=0, description="steps between state checkpoints; 0 = epoch ends only")
    tasks: Literal["joint", "style_only", "hiding_only"] = "joint"
    bit_encoding: Literal["symmetric", "binary"] = "symmetric"
    device: str = "cpu"

    @field_validator("noise_sigmas")
    @classmethod
    def _non_negative(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(s < 0 for s in value):
            raise ValueError(f"noise_sigmas must be non-negative, got {value}")
        return value


@dataclass
class TrainingData:
    """Training pool (style inputs double as covers) plus validation covers."""

    inputs: torch.Tensor
    targets: torch.Tensor
    style: torch.Tensor
    val_covers: torch.Tensor
    val_targets: torch.Tensor | None = None

    @classmethod
    def from_split(cls, split: DatasetSplit, source: StyleGroundTruthSource, base_dir: str | Path = '.') -> "TrainingData":
        val_ids = split.ids("validation")
        return cls(
            inputs=split.tensors("train"),
            targets=ground_truths(split.train, split.images, source, base_dir),
            style=style_image(source, split.image_size, base_dir),
            val_covers=split.tensors("validation"),
            val_targets=ground_truths(val_ids, split.images, source, base_dir) if val_ids else None,
        )

    @property
    def image_size(self) -> int:
        return int(self.style.shape[-1])

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class StepLosses:
    step: int
    style: float
    fidelity: float
    extract: float
    total: float
    wall_time: float

    def row(self) -> list:
        return [self.step, self.style, self.fidelity, self.extract, self.total, self.wall_time]


@dataclass
class ValidationRecord:
    epoch: int
    step: int
    ber: float
    stego_psnr: float
    style_psnr: float


@dataclass
class TrainState:
    network: HidingNetwork
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    epoch: int = 0
    position: int = 0
    updates: int = 0
    log: list[StepLosses] = field(default_factory=list)
    validations: list[ValidationRecord] = field(default_factory=list)
    best: dict | None = None


@dataclass
class TrainResult:
    network: HidingNetwork
    final_network: HidingNetwork
    log: list[StepLosses]
    validations: list[ValidationRecord]
    updates: int
    cancelled: bool = False


def _optimizer(net: HidingNetwork, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


def new_state(spec: NetworkSpec, cfg: TrainConfig) -> TrainState:
    """Fresh weights and optimizer; seeds the global torch RNG that drives dropout."""
    torch.manual_seed(cfg.seed)
    net = build(spec, seed=cfg.seed).to(cfg.device)
    return TrainState(network=net, optimizer=_optimizer(net, cfg), generator=torch.Generator().manual_seed(cfg.seed))


def _epoch_orders(seed: int, epoch: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    return (np.random.default_rng([seed, epoch]).permutation(n),
            np.random.default_rng([seed, epoch, 1]).permutation(n))


def _apply_noise(s: torch.Tensor, cfg: TrainConfig, generator: torch.Generator) -> tuple[torch.Tensor, float]:
    if not cfg.noise_sigmas:
        return s, 0.0
    index = int(torch.randint(len(cfg.noise_sigmas), (1,), generator=generator).item())
    sigma = cfg.noise_sigmas[index]
    noise = torch.randn(s.shape, generator=generator).to(s.device)
    return s + sigma * noise, sigma


def train_step(
    state: TrainState,
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    cfg: TrainConfig,
    style: torch.Tensor,
    trigger: torch.Tensor,
    started: float | None = None,
) -> StepLosses:
    """One update covering every enabled task; *batch* is (x, z_g, c), each (B, 3, S, S)."""
    net = state.network
    net.train()
    device = next(net.parameters()).device
    x, z_g, c = (t.to(device) for t in batch)
    size = c.shape[-1]
    zero = torch.zeros((), device=device)

    l_style = zero
    if cfg.tasks in ("joint", "style_only"):
        z = net(x, style.to(device).expand_as(x))
        l_style = style_loss(z, z_g, cfg.loss.norm)

    fidelity, extract, sigma = zero, zero, 0.0
    if cfg.tasks in ("joint", "hiding_only"):
        bits = random_bits(actual_length(size, cfg.block_size), state.generator, batch=c.shape[0])
        m = encode_plane(bits, size, cfg.block_size, ENCODINGS[cfg.bit_encoding]).to(device)
        s = net(c, m)
        noisy, sigma = _apply_noise(s, cfg, state.generator)
        m_hat = net(noisy, trigger.to(device).expand_as(noisy))
        fidelity, extract = hiding_terms(s, c, m_hat, m, cfg.loss)

    hiding = fidelity + cfg.loss.alpha1 * extract
    if cfg.tasks == "joint":
        total = joint_loss(l_style, hiding, cfg.loss)
    elif cfg.tasks == "style_only":
        total = l_style
    else:
        total = hiding

    if not torch.isfinite(total):
        snapshot = {
            "step": state.step + 1,
            "epoch": state.epoch,
            "position": state.position,
            "sigma": sigma,
            "losses": {name: value.detach().item() for name, value in
                       (("style", l_style), ("fidelity", fidelity), ("extract", extract), ("total", total))},
        }
        logger.error(f"Non-finite loss at step {state.step + 1}: {snapshot['losses']}")
        raise TrainingAbortedError(f"non-finite loss at step {state.step + 1}", snapshot)

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    state.updates += 1

    return StepLosses(
        step=state.step,
        style=float(l_style.detach().cpu().item()),
        fidelity=float(fidelity.detach().cpu().item()),
        extract=float(extract.detach().cpu().item()),
        total=float(total.detach().cpu().item()),
        wall_time=time.time() - started if started is not None else 0.0,
    )


def validate(net: HidingNetwork, data: TrainingData, cfg: TrainConfig, epoch: int, step: int) -> ValidationRecord:
    """Mean BER and stego PSNR on the validation covers (fixed payloads), plus style PSNR."""
    stegos, sent, recovered = hide_and_recover(net, data.val_covers, cfg.block_size, cfg.seed,
                                               encoding=ENCODINGS[cfg.bit_encoding])
    raw_covers = denormalize(data.val_covers)
    raw_stegos = denormalize(stegos)
    bers = [ber(a, b) for a, b in zip(sent, recovered)]
    stego_psnr = [psnr(a, b) for a, b in zip(raw_stegos, raw_covers)]
    style_psnr = float('nan')
    if data.val_targets is not None:
        net.eval()
        with torch.no_grad():
            device = next(net.parameters()).device
            covers = data.val_covers.to(device)
            styled = net(covers, data.style.to(device).expand_as(covers)).cpu()
        style_psnr = float(np.mean([psnr(a, b) for a, b in zip(denormalize(styled), denormalize(data.val_targets))]))
    return ValidationRecord(epoch, step, float(np.mean(bers)), float(np.mean(stego_psnr)), style_psnr)


def _is_better(record: ValidationRecord, best: dict | None) -> bool:
    if best is None:
        return True
    if record.ber != best["ber"]:
        return record.ber < best["ber"]
    return record.stego_psnr > best["stego_psnr"]


# ------------------------------------------------------------------
#  Resumable state
# ------------------------------------------------------------------
def save_training_state(state: TrainState, cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": STATE_FORMAT,
        "fingerprint": state.network.fingerprint,
        "spec": state.network.spec.model_dump(mode="json"),
        "config": cfg.model_dump(mode="json"),
        "model_state_dict": state.network.state_dict(),
        "optimizer_state_dict": state.optimizer.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "position": state.position,
        "updates": state.updates,
        "generator_state": state.generator.get_state(),
        "rng_state_pytorch": torch.get_rng_state(),
        "rng_state_cuda": torch.cuda.get_rng_state_all() if torch.cuda.is_available() else [],
        "log": [asdict(row) for row in state.log],
        "validations": [asdict(v) for v in state.validations],
        "best": state.best,
    }
    tmp = path.with_suffix(path.suffix + '.tmp')
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        logger.error(f"Failed to save training state to {path}: {exc}")
        raise
    logger.debug(f"Saved training state at step {state.step} to {path}")
    return path


def load_training_state(path: str | Path, spec: NetworkSpec, cfg: TrainConfig) -> TrainState:
    path = Path(path)
    if not path.exists():
        logger.error(f"Training state {path} does not exist.")
        raise FileNotFoundError(f"training state not found: {path}")
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get("format") != STATE_FORMAT:
        raise IncompatibleCheckpointError(f"{path} is not a training-state checkpoint")
    if payload["fingerprint"] != spec.fingerprint():
        raise IncompatibleCheckpointError(
            f"training state {path} was written for fingerprint {payload['fingerprint'][:12]}, "
            f"not {spec.fingerprint()[:12]}"
        )
    saved = {k: v for k, v in payload["config"].items() if k not in RESUMABLE_OVERRIDES}
    current = {k: v for k, v in cfg.model_dump(mode="json").items() if k not in RESUMABLE_OVERRIDES}
    changed = sorted(k for k in current if saved.get(k) != current[k])
    if changed:
        logger.error(f"Cannot resume {path}: configuration changed for {changed}")
        raise ConfigurationError(f"resume configuration differs in: {', '.join(changed)}")

    net = HidingNetwork(spec)
    net.load_state_dict(payload["model_state_dict"])
    net.to(cfg.device)
    optimizer = _optimizer(net, cfg)
    optimizer.load_state_dict(payload["optimizer_state_dict"])
    generator = torch.Generator()
    generator.set_state(payload["generator_state"])
    torch.set_rng_state(payload["rng_state_pytorch"])
    if payload["rng_state_cuda"] and torch.cuda.is_available():
        torch.cuda.set_rng_state_all(payload["rng_state_cuda"])

    state = TrainState(
        network=net,
        optimizer=optimizer,
        generator=generator,
        step=payload["step"],
        epoch=payload["epoch"],
        position=payload["position"],
        updates=payload["updates"],
        log=[StepLosses(**row) for row in payload["log"]],
        validations=[ValidationRecord(**v) for v in payload["validations"]],
        best=payload["best"],
    )
    logger.info(f"Resuming from {path} at epoch {state.epoch + 1}, step {state.step}")
    return state


def _write_log(path: Path, rows: list[StepLosses]) -> None:
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(LOG_COLUMNS)
        writer.writerows(row.row() for row in rows)


def _append_log(path: Path, row: StepLosses) -> None:
    with path.open('a', newline='', encoding='utf-8') as handle:
        csv.writer(handle).writerow(row.row())


def _write_validations(path: Path, records: list[ValidationRecord]) -> None:
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=list(ValidationRecord.__dataclass_fields__))
        writer.writeheader()
        writer.writerows(asdict(r) for r in records)


def _best_network(state: TrainState) -> HidingNetwork:
    if state.best is None:
        return state.network
    net = copy.deepcopy(state.network)
    net.load_state_dict(state.best["state_dict"])
    net.eval()
    return net


def train(
    data: TrainingData,
    cfg: TrainConfig,
    spec: NetworkSpec,
    output_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    progress_callback: Optional[Callable[[int, StepLosses], None]] = None,
    cancel_event: Optional[Event] = None,
    show_progress: bool = True,
) -> TrainResult:
    """
    Iterate epochs over the training pool and return the weights with the best
    validation BER (ties broken by stego PSNR).

    With *output_dir* the run writes ``train_log.csv``, ``validation.csv``,
    ``train_state.pt`` (resumable), ``model.pt`` (best) and ``model_final.pt``.
    """
    size = data.image_size
    actual_length(size, cfg.block_size)
    if spec.image_size != size:
        raise ConfigurationError(f"network is built for S={spec.image_size} but images are {size}x{size}")
    if len(data) == 0 and cfg.epochs > 0:
        raise ConfigurationError("training split is empty")

    state = load_training_state(resume_from, spec, cfg) if resume_from else new_state(spec, cfg)
    out = Path(output_dir) if output_dir is not None else None
    log_path = state_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path, state_path = out / "train_log.csv", out / "train_state.pt"
        _write_log(log_path, state.log)

    trigger = make_trigger(size)
    batches = math.ceil(len(data) / cfg.batch_size) if len(data) else 0
    start_time = time.time()
    logger.info(
        f"Training {cfg.tasks} for {cfg.epochs} epoch(s) x {batches} batch(es), N={cfg.block_size}, "
        f"noise={list(cfg.noise_sigmas) or 'off'}, seed={cfg.seed}"
    )

    def checkpoint() -> None:
        if state_path is not None:
            save_training_state(state, cfg, state_path)

    cancelled = False
    while state.epoch < cfg.epochs and not cancelled:
        style_order, cover_order = _epoch_orders(cfg.seed, state.epoch, len(data))
        bar = tqdm(range(state.position, batches), desc=f"Epoch {state.epoch + 1}/{cfg.epochs}",
                   unit="step", disable=not show_progress)
        for b in bar:
            lo, hi = b * cfg.batch_size, (b + 1) * cfg.batch_size
            idx = torch.as_tensor(style_order[lo:hi])
            cidx = torch.as_tensor(cover_order[lo:hi])
            losses = train_step(state, (data.inputs[idx], data.targets[idx], data.inputs[cidx]),
                                cfg, data.style, trigger, started=start_time)
            state.position = b + 1
            state.log.append(losses)
            bar.set_postfix(loss=f"{losses.total:.4f}")
            if log_path is not None:
                _append_log(log_path, losses)
            if progress_callback:
                progress_callback(state.step, losses)
            if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                checkpoint()
            if cancel_event is not None and cancel_event.is_set():
                logger.info(f"Cancellation requested; stopping after step {state.step}")
                cancelled = True
                break
        if cancelled:
            break

        if len(data.val_covers):
            record = validate(state.network, data, cfg, state.epoch, state.step)
            state.validations.append(record)
            logger.info(
                f"Epoch {state.epoch + 1}: validation BER {record.ber:.4f}, "
                f"stego PSNR {record.stego_psnr:.2f} dB, style PSNR {record.style_psnr:.2f} dB"
            )
            if _is_better(record, state.best):
                state.best = {
                    "epoch": record.epoch,
                    "step": record.step,
                    "ber": record.ber,
                    "stego_psnr": record.stego_psnr,
                    "state_dict": {k: v.detach().cpu().clone() for k, v in state.network.state_dict().items()},
                }
        state.epoch += 1
        state.position = 0
        checkpoint()

    if cancelled:
        checkpoint()

    best = _best_network(state)
    final = state.network
    final.eval()
    if out is not None:
        _write_validations(out / "validation.csv", state.validations)
        save_weights(best, out / "model.pt", metadata={"step": state.step, "selection": "best_validation_ber"})
        save_weights(final, out / "model_final.pt", metadata={"step": state.step, "selection": "final"})

    elapsed = time.time() - start_time
    logger.info(
        f"Training {'cancelled' if cancelled else 'finished'} after {humanize.intcomma(state.step)} step(s) "
        f"in {humanize.naturaldelta(elapsed)}."
    )
    return TrainResult(
        network=best,
        final_network=final,
        log=list(state.log),
        validations=list(state.validations),
        updates=state.updates,
        cancelled=cancelled,
    )
