"""
image_model.py

Image domain plumbing shared by every other module:
    * RawImage: numpy uint8 array (H, W, 3), the on-disk form.
    * ImageTensor: float32 torch tensor (3, S, S) or (B, 3, S, S) in [-1, 1].
    * ingest_dataset() reads a directory concurrently (asyncio + aiofiles),
      resizes every image to S×S (bilinear) and splits the identifiers
      deterministically under a seed.
"""
from __future__ import annotations

import asyncio
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import aiofiles
import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from tqdm.asyncio import tqdm_asyncio

from ..utils.errors import ConfigurationError, IngestionError, MalformedImageError
from ..utils.logging_config import module_logger

logger = module_logger('IMAGE_MODEL', 'image_model')

IMG_EXTENSIONS = ('.png', '.jpg', '.jpeg')
MIN_DATASET_IMAGES = 10
DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)

__all__ = [
    "DatasetSplit",
    "normalize",
    "denormalize",
    "validate_raw",
    "load_image",
    "save_png",
    "to_batch",
    "ingest_dataset",
    "write_manifest",
    "read_manifest",
    "split_identifiers",
    "validate_image_size",
]


@dataclass
class DatasetSplit:
    """Three disjoint identifier lists plus the resized images they name."""

    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int
    image_size: int
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def ids(self, name: str) -> list[str]:
        try:
            return {"train": self.train, "validation": self.validation, "test": self.test}[name]
        except KeyError:
            raise ConfigurationError(f"unknown split section {name!r}") from None

    def tensors(self, name: str) -> torch.Tensor:
        """Stack one section as a normalized (B, 3, S, S) tensor."""
        ids = self.ids(name)
        if not ids:
            return torch.empty(0, 3, self.image_size, self.image_size)
        return torch.stack([normalize(self.images[i]) for i in ids])


def validate_image_size(size: int, *, minimum: int = 128) -> int:
    """S must be a power of two (so stride-2 stages reach 1×1) and at least ``minimum``."""
    if size < minimum or size & (size - 1):
        raise ConfigurationError(f"image_size must be a power of two >= {minimum}, got {size}")
    return size


def validate_raw(raw: np.ndarray) -> None:
    if not isinstance(raw, np.ndarray):
        raise MalformedImageError(f"expected numpy array, got {type(raw).__name__}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise MalformedImageError(f"expected H×W×3 RGB samples, got shape {raw.shape}")
    if raw.dtype != np.uint8:
        if not np.issubdtype(raw.dtype, np.integer) or raw.min() < 0 or raw.max() > 255:
            raise MalformedImageError(f"samples must be integers in [0, 255], got dtype {raw.dtype}")


def normalize(raw: np.ndarray) -> torch.Tensor:
    """Map 8-bit samples v to v/127.5 − 1 and return a (3, H, W) float32 tensor."""
    validate_raw(raw)
    values = torch.from_numpy(np.ascontiguousarray(raw, dtype=np.float32))
    return (values / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def denormalize(tensor: torch.Tensor) -> np.ndarray:
    """Inverse of normalize: round((v+1)·127.5) clamped to [0, 255].

    Accepts (3, H, W) → (H, W, 3) or (B, 3, H, W) → (B, H, W, 3).
    """
    values = tensor.detach().to('cpu', torch.float32)
    raw = torch.clamp(torch.round((values + 1.0) * 127.5), 0, 255).to(torch.uint8)
    if raw.ndim == 3:
        return raw.permute(1, 2, 0).numpy()
    if raw.ndim == 4:
        return raw.permute(0, 2, 3, 1).numpy()
    raise MalformedImageError(f"expected (3,H,W) or (B,3,H,W), got {tuple(tensor.shape)}")


def to_batch(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.unsqueeze(0) if tensor.ndim == 3 else tensor


def _decode(data: bytes, size: int | None) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        rgb = img.convert('RGB')
        if size is not None and rgb.size != (size, size):
            rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
        return np.asarray(rgb, dtype=np.uint8).copy()


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Read a PNG/JPEG as RawImage, optionally resized (bilinear) to size×size."""
    path = Path(path)
    if not path.exists():
        logger.error(f"Image {path} does not exist.")
        raise FileNotFoundError(f"image not found: {path}")
    try:
        return _decode(path.read_bytes(), size)
    except (UnidentifiedImageError, OSError) as exc:
        logger.error(f"Unable to decode {path}: {exc}")
        raise MalformedImageError(f"cannot decode image {path}: {exc}") from exc


def save_png(raw: np.ndarray, path: str | Path) -> Path:
    """Write a RawImage losslessly as PNG (parents are created)."""
    validate_raw(raw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raw.astype(np.uint8)).save(path, format='PNG')
    logger.debug(f"Wrote {path}")
    return path


# ------------------------------------------------------------------
#  Dataset ingestion
# ------------------------------------------------------------------
async def _read_all(paths: Sequence[Path], size: int, concurrency: int) -> tuple[dict[str, np.ndarray], list[str]]:
    images: dict[str, np.ndarray] = {}
    failures: list[str] = []
    sem = asyncio.Semaphore(concurrency)
    lock = asyncio.Lock()

    async def read_one(path: Path) -> None:
        async with sem:
            try:
                async with aiofiles.open(path, 'rb') as handle:
                    data = await handle.read()
                raw = await asyncio.to_thread(_decode, data, size)
            except Exception as exc:
                logger.warning(f"[ingest] skipping {path.name}: {exc}")
                async with lock:
                    failures.append(path.name)
                return
        async with lock:
            images[path.name] = raw

    await tqdm_asyncio.gather(*(read_one(p) for p in paths), desc="Ingesting", disable=len(paths) < 50)
    return images, sorted(failures)


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise ConfigurationError(f"split_ratios must be three non-negative values summing to 1, got {tuple(ratios)}")
    return tuple(float(r) for r in ratios)  # type: ignore[return-value]


def split_identifiers(ids: Iterable[str], ratios: Sequence[float], seed: int) -> tuple[list[str], list[str], list[str]]:
    """Deterministic permutation of the sorted identifiers, cut by ratio."""
    ordered = sorted(ids)
    ratios = _check_ratios(ratios)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n_train, n_val, _ = _split_counts(len(shuffled), ratios)
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def ingest_dataset(
    directory: str | Path,
    size: int = 128,
    split_ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
    concurrency: int = 8,
    min_images: int = MIN_DATASET_IMAGES,
) -> DatasetSplit:
    """
    Read every PNG/JPEG under *directory*, resize to size×size and split.

    The result depends only on the directory contents, the ratios and the seed;
    files are read concurrently but identifiers are sorted before shuffling.

    Raises
    ------
    IngestionError
        When fewer than *min_images* files decode; the message lists the failures.
    """
    start_time = time.time()
    root = Path(directory)
    if not root.is_dir():
        logger.error(f"Dataset directory {root} does not exist.")
        raise IngestionError(f"dataset directory not found: {root}")
    _check_ratios(split_ratios)

    paths = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMG_EXTENSIONS)
    logger.info(f"Ingesting {len(paths)} candidate images from {root} at {size}x{size}...")
    images, failures = asyncio.run(_read_all(paths, size, concurrency))

    if failures:
        logger.warning(f"{len(failures)} file(s) could not be decoded: {failures}")
    if len(images) < min_images:
        logger.error(f"Only {len(images)} decodable images in {root}; need at least {min_images}.")
        raise IngestionError(f"{root} has {len(images)} decodable images, need >= {min_images}", failures)

    train, validation, test = split_identifiers(images.keys(), split_ratios, seed)
    elapsed = time.time() - start_time
    logger.info(
        f"Ingested {len(images)} images into {len(train)}/{len(validation)}/{len(test)} "
        f"(train/validation/test) in {elapsed:.2f} seconds."
    )
    return DatasetSplit(train=train, validation=validation, test=test, seed=seed, image_size=size, images=images)


def write_manifest(split: DatasetSplit, path: str | Path) -> Path:
    """Plain-text manifest: a ``[section]`` header followed by one identifier per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed={split.seed} image_size={split.image_size}"]
    for name in ("train", "validation", "test"):
        lines.append(f"[{name}]")
        lines.extend(split.ids(name))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote split manifest {path}")
    return path


def read_manifest(path: str | Path) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {"train": [], "validation": [], "test": []}
    current: list[str] | None = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if line.startswith('[') and line.endswith(']'):
            name = line[1:-1]
            if name not in sections:
                raise ConfigurationError(f"unknown manifest section [{name}] in {path}")
            current = sections[name]
            continue
        if current is None:
            raise ConfigurationError(f"identifier {line!r} before any section in {path}")
        current.append(line)
    return sections
