"""
evaluation.py

Image-quality and payload metrics, and the evaluation protocols run on a
trained network:

    payload_distortion_sweep   stego PSNR/SSIM, style PSNR/SSIM and BER per AL
    random_trigger_test        extraction with natural images in place of the trigger
    style_on_stego_eval        style quality with covers vs. stegos as input
    noise_robustness_eval      BER under additive Gaussian noise, plain vs. noise-trained

Stegos are quantized to 8 bits before extraction or styling, as if they had
been written to PNG and read back. Payloads are a pure function of
(seed, block size, image index), so every protocol embeds the same bits.
"""
from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from skimage.metrics import structural_similarity
from tqdm import tqdm

from ..utils.errors import ConfigurationError, IncompatibleCheckpointError, InputShapeError
from ..utils.logging_config import module_logger
from .image_model import DatasetSplit, denormalize, save_png
from .message_codec import SYMMETRIC_ENCODING, actual_length, decode_plane, encode_plane, make_trigger
from .network import HidingNetwork, infer
from .style_reference import StyleGroundTruthSource, ground_truths, style_image

logger = module_logger('EVALUATION', 'evaluation')

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11

__all__ = [
    "psnr",
    "ssim",
    "ber",
    "quantize",
    "payload_bits",
    "block_size_for",
    "hide_and_recover",
    "EvalSet",
    "ALRecord",
    "EvalReport",
    "StyleGap",
    "TriggerTrials",
    "NoiseCurves",
    "payload_distortion_sweep",
    "random_trigger_test",
    "random_trigger_trials",
    "style_on_stego_eval",
    "noise_ber",
    "noise_robustness_eval",
]


# ------------------------------------------------------------------
#  Metrics
# ------------------------------------------------------------------
def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        logger.error(f"Metric operands differ in shape: {a.shape} vs {b.shape}")
        raise InputShapeError(f"images differ in shape: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log₁₀(255²/MSE) over all 8-bit samples, capped at 100 dB."""
    _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0 ** 2 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window (11×11, σ=1.5) SSIM on 8-bit RGB, averaged over channels."""
    _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InputShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    return float(structural_similarity(
        a, b,
        data_range=255,
        channel_axis=-1,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


def ber(sent: np.ndarray | Sequence[int], received: np.ndarray | Sequence[int]) -> float:
    sent_arr = np.asarray(sent, dtype=np.uint8).reshape(-1)
    recv_arr = np.asarray(received, dtype=np.uint8).reshape(-1)
    if sent_arr.size != recv_arr.size:
        raise InputShapeError(f"bit strings differ in length: {sent_arr.size} vs {recv_arr.size}")
    if sent_arr.size == 0:
        raise InputShapeError("BER of an empty bit string is undefined")
    return float(np.count_nonzero(sent_arr != recv_arr)) / sent_arr.size


def quantize(t: torch.Tensor) -> torch.Tensor:
    """normalize(denormalize(t)): snap to the 8-bit grid a PNG round trip produces."""
    return torch.clamp(torch.round((t + 1.0) * 127.5), 0, 255) / 127.5 - 1.0


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float('nan')


# ------------------------------------------------------------------
#  Payload plumbing
# ------------------------------------------------------------------
def payload_bits(seed: int, block_size: int, index: int, length: int) -> np.ndarray:
    return np.random.default_rng([seed, block_size, index]).integers(0, 2, length, dtype=np.uint8)


def block_size_for(al: int, image_size: int) -> int:
    """N such that (S/N)² = AL."""
    side = math.isqrt(al) if al > 0 else 0
    if side == 0 or side * side != al or image_size % side:
        raise ConfigurationError(f"AL={al} is not (S/N)^2 for any block size N dividing S={image_size}")
    return image_size // side


def hide_and_recover(
    net: HidingNetwork,
    covers: torch.Tensor,
    block_size: int,
    seed: int,
    trigger: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Embed the deterministic payload of each cover, quantize, optionally add noise, extract.

    Returns (quantized stegos, sent bits (B, AL), recovered bits (B, AL)).
    """
    size = covers.shape[-1]
    al = actual_length(size, block_size)
    sent = np.stack([payload_bits(seed, block_size, i, al) for i in range(covers.shape[0])])
    planes = encode_plane(sent, size, block_size, encoding)
    stegos = quantize(infer(net, covers, planes))
    channel = stegos if noise is None else stegos + noise
    if trigger is None:
        trigger = make_trigger(size)
    triggers = trigger.expand_as(channel) if trigger.ndim == 3 else trigger
    recovered = decode_plane(infer(net, channel, triggers), size, block_size, encoding)
    return stegos, sent, recovered


# ------------------------------------------------------------------
#  Records
# ------------------------------------------------------------------
@dataclass
class EvalSet:
    """Test images with their style targets; ``ground_truths``/``style`` may be absent."""

    ids: list[str]
    covers: torch.Tensor
    ground_truths: torch.Tensor | None = None
    style: torch.Tensor | None = None

    @classmethod
    def from_split(
        cls,
        split: DatasetSplit,
        section: str = "test",
        source: StyleGroundTruthSource | None = None,
        base_dir: str | Path = '.',
    ) -> "EvalSet":
        ids = split.ids(section)
        covers = split.tensors(section)
        if source is None:
            return cls(ids=ids, covers=covers)
        return cls(
            ids=ids,
            covers=covers,
            ground_truths=ground_truths(ids, split.images, source, base_dir),
            style=style_image(source, split.image_size, base_dir),
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> int:
        return int(self.covers.shape[-1])

    @property
    def has_style(self) -> bool:
        return self.ground_truths is not None and self.style is not None

    @property
    def split_id(self) -> str:
        """Short digest of the ordered image ids; equal ids mean the same test split."""
        return hashlib.sha256("\n".join(self.ids).encode('utf-8')).hexdigest()[:16]


@dataclass
class ALRecord:
    al: int
    block_size: int
    stego_psnr_mean: float
    stego_ssim_mean: float
    style_psnr_mean: float
    style_ssim_mean: float
    ber_mean: float
    n_images: int


@dataclass
class EvalReport:
    fingerprint: str
    split: str
    seed: int
    records: list[ALRecord] = field(default_factory=list)
    split_id: str = ""

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = list(ALRecord.__dataclass_fields__)
        with path.open('w', newline='', encoding='utf-8') as handle:
            handle.write(f"# fingerprint={self.fingerprint} split={self.split} "
                         f"split_id={self.split_id} seed={self.seed}\n")
            writer = csv.DictWriter(handle, fieldnames=columns)
            writer.writeheader()
            for record in self.records:
                writer.writerow(asdict(record))
        logger.info(f"Wrote evaluation report {path}")
        return path

    def summary(self) -> str:
        lines = [f"checkpoint {self.fingerprint[:12]} on {self.split} (seed {self.seed})",
                 f"{'AL':>7} {'N':>4} {'stego dB':>9} {'SSIM':>6} {'style dB':>9} {'BER':>8} {'n':>5}"]
        for r in self.records:
            lines.append(
                f"{r.al:>7} {r.block_size:>4} {r.stego_psnr_mean:>9.2f} {r.stego_ssim_mean:>6.3f} "
                f"{r.style_psnr_mean:>9.2f} {r.ber_mean:>8.4f} {r.n_images:>5}"
            )
        return "\n".join(lines)

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.fingerprint != self.fingerprint:
            logger.error(f"Refusing to merge reports of {self.fingerprint[:12]} and {other.fingerprint[:12]}")
            raise IncompatibleCheckpointError("reports come from different checkpoints and cannot be merged")
        if (other.split, other.split_id) != (self.split, self.split_id):
            logger.error(f"Refusing to merge reports of split {self.split}/{self.split_id} and {other.split}/{other.split_id}")
            raise IncompatibleCheckpointError("reports come from different test splits and cannot be merged")
        records = sorted(self.records + other.records, key=lambda r: r.al)
        return EvalReport(fingerprint=self.fingerprint, split=self.split, seed=self.seed,
                          records=records, split_id=self.split_id)


def _write_rows(path: str | Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")
    return path


@dataclass
class StyleGap:
    cover_psnr_mean: float
    stego_psnr_mean: float
    gap: float
    ids: list[str]
    cover_psnr: list[float] = field(default_factory=list)
    stego_psnr: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> Path:
        """One row per image plus a trailing ``mean`` row."""
        rows = [[image_id, c, s, abs(c - s)] for image_id, c, s in zip(self.ids, self.cover_psnr, self.stego_psnr)]
        rows.append(["mean", self.cover_psnr_mean, self.stego_psnr_mean, self.gap])
        return _write_rows(path, ["id", "style_psnr_cover", "style_psnr_stego", "gap"], rows)


@dataclass
class TriggerTrials:
    """Per-trial outcome of extracting with another test image as the trigger."""

    block_size: int
    image_ids: list[str]
    trigger_ids: list[str]
    bers: list[float]

    @property
    def mean(self) -> float:
        return _mean(self.bers)

    def to_csv(self, path: str | Path) -> Path:
        rows = [[trial, image_id, trigger_id, rate] for trial, (image_id, trigger_id, rate)
                in enumerate(zip(self.image_ids, self.trigger_ids, self.bers))]
        return _write_rows(path, ["trial", "stego_id", "trigger_id", "ber"], rows)


@dataclass
class NoiseCurves:
    """BER per σ; the noise-trained columns stay empty when only one network was measured."""

    sigmas: list[float]
    plain_ber: list[float]
    noise_trained_ber: list[float]
    plain_fingerprint: str
    noise_trained_fingerprint: str

    def to_csv(self, path: str | Path) -> Path:
        trained = self.noise_trained_ber or [""] * len(self.sigmas)
        return _write_rows(path, ["sigma", "ber_plain", "ber_noise_trained"],
                           zip(self.sigmas, self.plain_ber, trained))


# ------------------------------------------------------------------
#  Protocols
# ------------------------------------------------------------------
def _style_scores(net: HidingNetwork, inputs: torch.Tensor, evalset: EvalSet) -> tuple[list[float], list[float]]:
    style = evalset.style.expand_as(inputs)
    styled = denormalize(infer(net, inputs, style))
    targets = denormalize(evalset.ground_truths)
    return ([psnr(a, b) for a, b in zip(styled, targets)],
            [ssim(a, b) for a, b in zip(styled, targets)])


def _export(ids: Sequence[str], covers: np.ndarray, stegos: np.ndarray, directory: Path) -> None:
    for image_id, cover, stego in zip(ids, covers, stegos):
        name = f"{Path(image_id).stem}.png"
        save_png(cover, directory / "cover" / name)
        save_png(stego, directory / "stego" / name)


def payload_distortion_sweep(
    net: HidingNetwork,
    evalset: EvalSet,
    als: Sequence[int],
    seed: int = 0,
    include_baseline: bool = False,
    save_dir: str | Path | None = None,
    split_name: str = "test",
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> EvalReport:
    """
    One record per AL. With *include_baseline* an AL=0 record is prepended
    holding style quality on the covers themselves (no embedding).
    """
    start_time = time.time()
    size = evalset.image_size
    block_sizes = [block_size_for(al, size) for al in als]
    report = EvalReport(fingerprint=net.fingerprint, split=split_name, seed=seed, split_id=evalset.split_id)
    if len(evalset) == 0:
        raise ConfigurationError("payload sweep needs at least one test image")

    if include_baseline and evalset.has_style:
        style_p, style_s = _style_scores(net, evalset.covers, evalset)
        nan = float('nan')
        report.records.append(ALRecord(0, 0, nan, nan, _mean(style_p), _mean(style_s), nan, len(evalset)))

    raw_covers = denormalize(evalset.covers)
    for al, block_size in tqdm(list(zip(als, block_sizes)), desc="Sweep", unit="AL"):
        stegos, sent, recovered = hide_and_recover(net, evalset.covers, block_size, seed, encoding=encoding)
        raw_stegos = denormalize(stegos)
        stego_p = [psnr(s, c) for s, c in zip(raw_stegos, raw_covers)]
        stego_s = [ssim(s, c) for s, c in zip(raw_stegos, raw_covers)]
        bers = [ber(a, b) for a, b in zip(sent, recovered)]
        style_p, style_s = _style_scores(net, stegos, evalset) if evalset.has_style else ([], [])
        record = ALRecord(al, block_size, _mean(stego_p), _mean(stego_s), _mean(style_p), _mean(style_s),
                          _mean(bers), len(evalset))
        report.records.append(record)
        logger.info(f"AL={al} N={block_size}: stego PSNR {record.stego_psnr_mean:.2f} dB, BER {record.ber_mean:.4f}")
        if save_dir is not None:
            _export(evalset.ids, raw_covers, raw_stegos, Path(save_dir) / f"al_{al}")

    logger.info(f"Sweep over {len(als)} AL(s) on {len(evalset)} images took {time.time() - start_time:.2f} seconds.")
    return report


def random_trigger_trials(
    net: HidingNetwork,
    evalset: EvalSet,
    block_size: int,
    trials: int = 100,
    seed: int = 0,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> TriggerTrials:
    """Extract each stego with a different test image as the trigger; one BER per trial."""
    if trials < 1:
        raise ConfigurationError(f"random trigger test needs trials >= 1, got {trials}")
    n = len(evalset)
    if n < 2:
        raise ConfigurationError("random trigger test needs at least two test images")
    size = evalset.image_size
    stegos, sent, _ = hide_and_recover(net, evalset.covers, block_size, seed, encoding=encoding)
    rng = np.random.default_rng([seed, block_size, 7])
    images = np.arange(trials) % n
    others = (images + rng.integers(1, n, size=trials)) % n
    triggers = evalset.covers[torch.as_tensor(others)]
    recovered = decode_plane(infer(net, stegos[torch.as_tensor(images)], triggers), size, block_size, encoding)
    result = TriggerTrials(
        block_size=block_size,
        image_ids=[evalset.ids[i] for i in images],
        trigger_ids=[evalset.ids[j] for j in others],
        bers=[ber(sent[i], r) for i, r in zip(images, recovered)],
    )
    logger.info(f"Random-trigger test over {trials} trials: mean BER {result.mean:.4f}")
    return result


def random_trigger_test(
    net: HidingNetwork,
    evalset: EvalSet,
    block_size: int,
    trials: int = 100,
    seed: int = 0,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> float:
    """Mean BER when other test images are used as the trigger."""
    return random_trigger_trials(net, evalset, block_size, trials, seed, encoding).mean


def style_on_stego_eval(
    net: HidingNetwork,
    evalset: EvalSet,
    block_size: int,
    seed: int = 0,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> StyleGap:
    """Mean style PSNR against z_g with the cover, then its stego, as input."""
    if not evalset.has_style:
        raise ConfigurationError("style-on-stego evaluation needs ground truths and the style image")
    stegos, _, _ = hide_and_recover(net, evalset.covers, block_size, seed, encoding=encoding)
    cover_p, _ = _style_scores(net, evalset.covers, evalset)
    stego_p, _ = _style_scores(net, stegos, evalset)
    cover_mean, stego_mean = _mean(cover_p), _mean(stego_p)
    return StyleGap(cover_mean, stego_mean, abs(cover_mean - stego_mean), list(evalset.ids),
                    cover_psnr=cover_p, stego_psnr=stego_p)


def noise_ber(
    net: HidingNetwork,
    evalset: EvalSet,
    block_size: int,
    sigmas: Sequence[float],
    seed: int = 0,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> list[float]:
    """Mean BER per σ; one fixed unit-noise draw is scaled by each σ."""
    generator = torch.Generator().manual_seed(seed)
    unit = torch.randn(evalset.covers.shape, generator=generator)
    result = []
    for sigma in sigmas:
        if sigma < 0:
            raise ConfigurationError(f"noise sigma must be non-negative, got {sigma}")
        noise = unit * sigma if sigma > 0 else None
        _, sent, recovered = hide_and_recover(net, evalset.covers, block_size, seed, noise=noise, encoding=encoding)
        result.append(_mean([ber(a, b) for a, b in zip(sent, recovered)]))
    return result


def noise_robustness_eval(
    plain: HidingNetwork,
    noise_trained: HidingNetwork | None,
    sigmas: Sequence[float],
    evalset: EvalSet,
    block_size: int,
    seed: int = 0,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> NoiseCurves:
    """BER curves of *plain* and, when given, *noise_trained* over the same noise draws."""
    trained_ber = [] if noise_trained is None else noise_ber(noise_trained, evalset, block_size, sigmas, seed, encoding)
    curves = NoiseCurves(
        sigmas=[float(s) for s in sigmas],
        plain_ber=noise_ber(plain, evalset, block_size, sigmas, seed, encoding),
        noise_trained_ber=trained_ber,
        plain_fingerprint=plain.fingerprint,
        noise_trained_fingerprint="" if noise_trained is None else noise_trained.fingerprint,
    )
    for sigma, p in zip(curves.sigmas, curves.plain_ber):
        logger.info(f"sigma={sigma}: plain BER {p:.4f}")
    for sigma, q in zip(curves.sigmas, curves.noise_trained_ber):
        logger.info(f"sigma={sigma}: noise-trained BER {q:.4f}")
    return curves
