# Command-line entry point for style-stego: one network for style transfer, embedding and extraction
import argparse
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import humanize
import numpy as np
import torch

from .tools.evaluation import (
    EvalSet,
    ber,
    noise_robustness_eval,
    payload_distortion_sweep,
    psnr,
    quantize,
    random_trigger_trials,
    style_on_stego_eval,
)
from .tools.image_model import (
    DatasetSplit,
    denormalize,
    ingest_dataset,
    load_image,
    normalize,
    read_manifest,
    save_png,
    write_manifest,
)
from .tools.message_codec import (
    ENCODINGS,
    EccConfig,
    actual_length,
    bits_to_bytes,
    bytes_to_bits,
    decode_plane,
    ecc_decode,
    ecc_encode,
    encode_plane,
    make_trigger,
    plane_to_raw,
)
from .tools.network import HidingNetwork, infer, load_weights
from .tools.steganalyzer import load_pairs, shuffled_label_pvalue, train_detector, write_accuracy_csv
from .tools.style_reference import ground_truth_for, style_image
from .tools.trainer import TrainingData, train
from .utils.errors import (
    CapacityError,
    ConfigurationError,
    ExitCode,
    InputShapeError,
    StegoError,
    VerificationError,
)
from .utils.logging_config import module_logger, set_verbose
from .utils.settings import RunConfig, load_run_config, resolve

logger = module_logger('MAIN', 'style_stego')

SPLIT_MANIFEST = "split.txt"


# ------------------------------------------------------------------
#  Shared plumbing
# ------------------------------------------------------------------
def _load_split(cfg: RunConfig, workdir: Path, dataset: Optional[str] = None) -> DatasetSplit:
    """Re-derive the split and check it against the manifest written by ``ingest``."""
    split = ingest_dataset(
        resolve(workdir, dataset or cfg.dataset_dir),
        size=cfg.image_size,
        split_ratios=cfg.split_ratios,
        seed=cfg.split_seed,
        concurrency=cfg.ingest_concurrency,
    )
    manifest = resolve(workdir, cfg.output_dir) / SPLIT_MANIFEST
    if manifest.exists():
        recorded = read_manifest(manifest)
        for name, ids in recorded.items():
            if ids != split.ids(name):
                logger.error(f"Split section [{name}] differs from {manifest}")
                raise ConfigurationError(f"dataset or split settings changed since {manifest} was written")
    return split


def _checkpoint(cfg: RunConfig, workdir: Path, path: Optional[str]) -> HidingNetwork:
    default = resolve(workdir, cfg.output_dir) / "model.pt"
    net = load_weights(resolve(workdir, path) if path else default, expected_spec=cfg.network_spec(),
                       map_location=cfg.device)
    return net


def _ecc(cfg: RunConfig, force: bool) -> EccConfig:
    if force and cfg.ecc_scheme == "none":
        return EccConfig(scheme="reed_solomon", rs_n=cfg.rs_n, rs_k=cfg.rs_k)
    return cfg.ecc_config()


def _read_square(path: Path, size: int) -> torch.Tensor:
    raw = load_image(path)
    if raw.shape[:2] != (size, size):
        raise InputShapeError(f"{path} is {raw.shape[1]}x{raw.shape[0]}, expected {size}x{size}")
    return normalize(raw)


def _payload(args: argparse.Namespace, workdir: Path) -> bytes:
    if args.payload_file:
        return resolve(workdir, args.payload_file).read_bytes()
    if args.payload_hex is not None:
        try:
            return bytes.fromhex(args.payload_hex)
        except ValueError as exc:
            raise ConfigurationError(f"--payload-hex is not valid hex: {exc}") from exc
    raise ConfigurationError("embed needs --payload-file or --payload-hex")


def _extract_bits(net: HidingNetwork, stego: torch.Tensor, size: int, block_size: int,
                  trigger: Optional[torch.Tensor] = None,
                  encoding: tuple[float, float] = ENCODINGS["symmetric"]) -> tuple[np.ndarray, torch.Tensor]:
    plane = infer(net, stego, make_trigger(size) if trigger is None else trigger)
    return decode_plane(plane, size, block_size, encoding), plane


# ------------------------------------------------------------------
#  Commands
# ------------------------------------------------------------------
def cmd_ingest(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    split = ingest_dataset(
        resolve(workdir, args.dataset or cfg.dataset_dir),
        size=cfg.image_size,
        split_ratios=cfg.split_ratios,
        seed=cfg.split_seed,
        concurrency=cfg.ingest_concurrency,
    )
    write_manifest(split, resolve(workdir, cfg.output_dir) / SPLIT_MANIFEST)
    return ExitCode.OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    split = _load_split(cfg, workdir, args.dataset)
    output = resolve(workdir, cfg.output_dir)
    write_manifest(split, output / SPLIT_MANIFEST)
    data = TrainingData.from_split(split, cfg.style_source(), base_dir=workdir)
    result = train(
        data,
        cfg.train_config(),
        cfg.network_spec(),
        output_dir=output,
        resume_from=resolve(workdir, args.resume) if args.resume else None,
        progress_callback=(lambda step, losses: logger.debug(f"step {step}: total {losses.total:.5f}")),
    )
    if result.validations:
        best = min(result.validations, key=lambda v: (v.ber, -v.stego_psnr))
        logger.info(f"Best validation BER {best.ber:.4f} at step {best.step} ({best.stego_psnr:.2f} dB)")
    logger.info(f"Weights written to {output / 'model.pt'} and {output / 'model_final.pt'}")
    return ExitCode.OK


def cmd_embed(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    size = cfg.image_size
    block_size = args.block_size or cfg.block_size
    capacity = actual_length(size, block_size)
    ecc = _ecc(cfg, args.ecc)
    encoding = ENCODINGS[cfg.bit_encoding]

    payload = _payload(args, workdir)
    framed = ecc_encode(payload, ecc)
    bits = bytes_to_bits(framed)
    if bits.size > capacity:
        logger.error(f"Payload of {bits.size} bits exceeds the capacity of (S/N)^2 = {capacity} bits")
        raise CapacityError(int(bits.size), capacity)
    bits = np.concatenate([bits, np.zeros(capacity - bits.size, dtype=np.uint8)])

    net = _checkpoint(cfg, workdir, args.checkpoint)
    cover = _read_square(resolve(workdir, args.cover), size)
    plane = encode_plane(bits, size, block_size, encoding)
    stego = infer(net, cover, plane)
    out = save_png(denormalize(stego), resolve(workdir, args.out))
    logger.info(f"Embedded {len(payload)} byte(s) ({bits.size} bit plane, N={block_size}) into {out}")
    if args.plane_png:
        save_png(plane_to_raw(plane, encoding), resolve(workdir, args.plane_png))

    if args.verify:
        received, _ = _extract_bits(net, quantize(stego), size, block_size, encoding=encoding)
        rate = ber(bits, received)
        logger.info(f"Verification BER {rate:.6f}")
        if rate > 0:
            raise VerificationError(f"stego {out} does not reproduce the payload (BER {rate:.6f}); choose another cover")
    return ExitCode.OK


def cmd_extract(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    size = cfg.image_size
    block_size = args.block_size or cfg.block_size
    ecc = _ecc(cfg, args.ecc)
    net = _checkpoint(cfg, workdir, args.checkpoint)
    encoding = ENCODINGS[cfg.bit_encoding]
    stego = _read_square(resolve(workdir, args.stego), size)
    trigger = _read_square(resolve(workdir, args.trigger_image), size) if args.trigger_image else None

    bits, plane = _extract_bits(net, stego, size, block_size, trigger, encoding)
    if args.plane_png:
        save_png(plane_to_raw(plane, encoding), resolve(workdir, args.plane_png))
    data, _ = bits_to_bytes(bits[: bits.size - bits.size % 8])
    if ecc.scheme != "none":
        data = ecc_decode(data, ecc)
    elif args.length is not None:
        if args.length * 8 > bits.size:
            raise CapacityError(args.length * 8, int(bits.size))
        data = data[:args.length]

    if args.out:
        out = resolve(workdir, args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(data)
        logger.info(f"Extracted {humanize.naturalsize(len(data), binary=True)} to {out}")
    else:
        print(data.hex())
    return ExitCode.OK


def cmd_style(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    size = cfg.image_size
    source = cfg.style_source()
    y = style_image(source, size, base_dir=workdir)
    net = _checkpoint(cfg, workdir, args.checkpoint)
    path = resolve(workdir, args.input)
    x = _read_square(path, size)
    styled = denormalize(infer(net, x, y))
    out = save_png(styled, resolve(workdir, args.out))
    try:
        target = ground_truth_for(path.name, source, x=x, size=size, base_dir=workdir)
        logger.info(f"Styled {path.name} -> {out}: PSNR vs ground truth {psnr(styled, denormalize(target)):.2f} dB")
    except FileNotFoundError:
        logger.info(f"Styled {path.name} -> {out} (no ground truth available)")
    return ExitCode.OK


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    net = _checkpoint(cfg, workdir, args.checkpoint)
    split = _load_split(cfg, workdir)
    evalset = EvalSet.from_split(split, "test", cfg.style_source(), base_dir=workdir)
    output = resolve(workdir, cfg.output_dir)
    report = payload_distortion_sweep(
        net,
        evalset,
        args.als or cfg.sweep_als,
        seed=cfg.eval_seed,
        include_baseline=args.baseline,
        save_dir=output / "sweep" if args.save_images else None,
        encoding=ENCODINGS[cfg.bit_encoding],
    )
    report.to_csv(output / "sweep.csv")
    summary = report.summary()
    (output / "sweep_summary.txt").write_text(summary + "\n", encoding="utf-8")
    logger.info("\n" + summary)
    return ExitCode.OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    net = _checkpoint(cfg, workdir, args.checkpoint)
    split = _load_split(cfg, workdir)
    evalset = EvalSet.from_split(split, "test", cfg.style_source(), base_dir=workdir)
    output = resolve(workdir, cfg.output_dir) / "eval"
    output.mkdir(parents=True, exist_ok=True)
    n = cfg.block_size
    al = actual_length(cfg.image_size, n)

    encoding = ENCODINGS[cfg.bit_encoding]
    seed = cfg.eval_seed

    report = payload_distortion_sweep(net, evalset, [al], seed=seed, include_baseline=True, encoding=encoding)
    report.to_csv(output / "report.csv")
    trials = random_trigger_trials(net, evalset, n, trials=cfg.random_trigger_trials, seed=seed, encoding=encoding)
    trials.to_csv(output / "random_trigger.csv")
    gap = style_on_stego_eval(net, evalset, n, seed=seed, encoding=encoding)
    gap.to_csv(output / "style_on_stego.csv")

    lines = [report.summary(),
             f"random-trigger mean BER over {cfg.random_trigger_trials} trials: {trials.mean:.4f}",
             f"style PSNR cover {gap.cover_psnr_mean:.2f} dB, stego {gap.stego_psnr_mean:.2f} dB, gap {gap.gap:.2f} dB"]

    noisy = None
    if args.noise_checkpoint:
        noisy = load_weights(resolve(workdir, args.noise_checkpoint), expected_spec=cfg.network_spec(),
                             map_location=cfg.device)
    curves = noise_robustness_eval(net, noisy, cfg.eval_sigmas, evalset, n, seed=seed, encoding=encoding)
    curves.to_csv(output / "noise.csv")
    if noisy is None:
        lines += [f"sigma {s}: BER {p:.4f}" for s, p in zip(curves.sigmas, curves.plain_ber)]
    else:
        lines += [f"sigma {s}: plain {p:.4f}, noise-trained {q:.4f}"
                  for s, p, q in zip(curves.sigmas, curves.plain_ber, curves.noise_trained_ber)]
    summary = "\n".join(lines)
    (output / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    logger.info("\n" + summary)
    return ExitCode.OK


def cmd_detect(args: argparse.Namespace, cfg: RunConfig, workdir: Path) -> ExitCode:
    sweep_dir = resolve(workdir, args.sweep_dir) if args.sweep_dir else resolve(workdir, cfg.output_dir) / "sweep"
    spec = cfg.detector_spec()
    rows = []
    for al in args.als or cfg.detect_als:
        covers, stegos, _ = load_pairs(sweep_dir / f"al_{al}" / "cover", sweep_dir / f"al_{al}" / "stego", cfg.image_size)
        result = train_detector(covers, stegos, spec)
        control = train_detector(covers, stegos, spec, shuffle_labels=True)
        rows.append({
            "al": al,
            "test_accuracy": result.test_accuracy,
            "n_test": result.n_test,
            "shuffled_accuracy": control.test_accuracy,
            "shuffled_pvalue": shuffled_label_pvalue(control.test_accuracy, control.n_test),
        })
        logger.info(f"AL={al}: detector accuracy {result.test_accuracy:.3f}, shuffled control {control.test_accuracy:.3f}")
    write_accuracy_csv(rows, resolve(workdir, cfg.output_dir) / "detect.csv")
    return ExitCode.OK


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig, Path], ExitCode]] = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "style": cmd_style,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "detect": cmd_detect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="style-stego",
        formatter_class=argparse.RawTextHelpFormatter,
        description='Style transfer that doubles as a data hiding tool.\n'
                    'One image-to-image network styles images, embeds payloads and extracts them with a trigger.\n',
    )
    parser.add_argument("--config", default=None, help="Flat JSON run configuration (relative to --workdir).")
    parser.add_argument("--workdir", default=".", help="Directory every relative path is resolved against (default: .).")
    parser.add_argument("-v", "--verbose", action='store_true', help="Display verbose content for console (default: INFO).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Read, resize and split the image dataset.")
    p.add_argument("--dataset", help="Dataset directory (overrides dataset_dir).")

    p = sub.add_parser("train", help="Train the three tasks jointly.")
    p.add_argument("--dataset", help="Dataset directory (overrides dataset_dir).")
    p.add_argument("--resume", help="Training-state checkpoint to continue from.")

    p = sub.add_parser("embed", help="Hide a payload in a cover image.")
    p.add_argument("--checkpoint", help="Weights (default: <output_dir>/model.pt).")
    p.add_argument("--cover", required=True)
    p.add_argument("--out", required=True, help="Stego PNG to write.")
    p.add_argument("--payload-file")
    p.add_argument("--payload-hex")
    p.add_argument("-N", "--block-size", type=int, help="Block size N (overrides block_size).")
    p.add_argument("--ecc", action='store_true', help="Reed-Solomon frame the payload.")
    p.add_argument("--verify", action='store_true', help="Extract again and fail unless the payload survives.")
    p.add_argument("--plane-png", help="Also write the embedded message plane.")

    p = sub.add_parser("extract", help="Recover a payload from a stego image.")
    p.add_argument("--checkpoint")
    p.add_argument("--stego", required=True)
    p.add_argument("--out", help="Payload file to write (default: print hex).")
    p.add_argument("-N", "--block-size", type=int)
    p.add_argument("--ecc", action='store_true')
    p.add_argument("--length", type=int, help="Payload length in bytes (without ECC).")
    p.add_argument("--trigger-image", help="Use this image instead of the black trigger.")
    p.add_argument("--plane-png", help="Also write the recovered message plane.")

    p = sub.add_parser("style", help="Apply the learned style transfer.")
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="Payload/distortion sweep over ALs on the test split.")
    p.add_argument("--checkpoint")
    p.add_argument("--als", type=int, nargs="+", help="Actual lengths (S/N)^2 (overrides sweep_als).")
    p.add_argument("--baseline", action='store_true', help="Add an AL=0 row with style quality on covers.")
    p.add_argument("--save-images", action='store_true', help="Write cover/stego PNGs per AL for detect.")

    p = sub.add_parser("eval", help="Random-trigger, style-on-stego and noise robustness protocols.")
    p.add_argument("--checkpoint")
    p.add_argument("--noise-checkpoint", help="Noise-trained weights to compare against.")

    p = sub.add_parser("detect", help="Train the steganalysis detector on sweep images.")
    p.add_argument("--sweep-dir", help="Directory with al_<AL>/cover and al_<AL>/stego (default: <output_dir>/sweep).")
    p.add_argument("--als", type=int, nargs="+")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_verbose(True)
    logger.debug(f"Arguments received: {args}")
    workdir = Path(args.workdir)
    start_time = time.time()
    try:
        cfg = load_run_config(resolve(workdir, args.config) if args.config else None)
        code = COMMANDS[args.command](args, cfg, workdir)
    except StegoError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return int(exc.exit_code)
    except FileNotFoundError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return int(ExitCode.FILE)
    except Exception as exc:
        logger.exception(f"{args.command} failed unexpectedly: {exc}")
        return int(ExitCode.FAILURE)
    logger.info(f"{args.command} completed in {time.time() - start_time:.2f} seconds.")
    return int(code)


if __name__ == "__main__":
    sys.exit(main())
