import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

import src.main as cli
from src.main import main
from src.tools.image_model import load_image, normalize, read_manifest, save_png
from src.tools.message_codec import EccConfig, bytes_to_bits, ecc_encode
from src.utils.errors import ConfigurationError, ExitCode
from src.utils.settings import load_run_config

RUN = {
    "dataset_dir": "images",
    "output_dir": "out",
    "image_size": 128,
    "down_channels": [4, 4, 4, 4, 4, 4, 4],
    "epochs": 1,
    "block_size": 16,
    "sweep_als": [64],
    "eval_sigmas": [0.0, 0.1],
    "random_trigger_trials": 10,
    "detector_epochs": 1,
}

SMALL_RS = EccConfig(scheme="reed_solomon", rs_n=16, rs_k=8)


def _images(directory: Path, n: int = 20, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for i in range(n):
        save_png(rng.integers(0, 256, (128, 128, 3), dtype=np.uint8), directory / f"img_{i:02d}.png")


def _workspace(root: Path, **overrides) -> Path:
    _images(root / "images")
    (root / "run.json").write_text(json.dumps({**RUN, **overrides}))
    return root


def _cli(workdir: Path, *args: str, config: str = "run.json") -> int:
    return main(["--workdir", str(workdir), "--config", config, *args])


def _losses(path: Path) -> list[list[str]]:
    with path.open() as handle:
        return [row[:5] for row in csv.reader(handle)]


def _plane_bits(payload: bytes, capacity: int, ecc: EccConfig | None = None) -> np.ndarray:
    bits = bytes_to_bits(ecc_encode(payload, ecc) if ecc else payload)
    return np.concatenate([bits, np.zeros(capacity - bits.size, dtype=np.uint8)])


def _fixed_extraction(monkeypatch, bits: np.ndarray) -> None:
    monkeypatch.setattr(cli, "_extract_bits", lambda *args, **kwargs: (bits, torch.zeros(3, 128, 128)))


def _small_rs_config(workdir: Path) -> str:
    (workdir / "ecc.json").write_text(json.dumps({**RUN, "rs_n": SMALL_RS.rs_n, "rs_k": SMALL_RS.rs_k}))
    return "ecc.json"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    workdir = _workspace(tmp_path_factory.mktemp("run"))
    assert _cli(workdir, "ingest") == ExitCode.OK
    assert _cli(workdir, "train") == ExitCode.OK
    return workdir


def test_ingest_writes_split_manifest(trained):
    sections = read_manifest(trained / "out" / "split.txt")
    assert [len(sections[name]) for name in ("train", "validation", "test")] == [16, 2, 2]


def test_train_writes_weights_and_log(trained):
    out = trained / "out"
    for name in ("model.pt", "model.json", "model_final.pt", "train_state.pt", "train_log.csv", "validation.csv"):
        assert (out / name).exists(), name
    assert len(_losses(out / "train_log.csv")) == 1 + 16


def test_train_is_reproducible(trained, tmp_path):
    workdir = _workspace(tmp_path)
    assert _cli(workdir, "train") == ExitCode.OK
    assert _losses(workdir / "out" / "train_log.csv") == _losses(trained / "out" / "train_log.csv")


def test_embed_and_extract_round_trip_files(trained):
    assert _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "stego.png",
                "--payload-hex", "0123456789abcdef", "--plane-png", "plane.png") == ExitCode.OK
    assert (trained / "stego.png").exists()
    assert (trained / "plane.png").exists()

    assert _cli(trained, "extract", "--stego", "stego.png", "--length", "8", "--out", "payload.bin") == ExitCode.OK
    assert len((trained / "payload.bin").read_bytes()) == 8


def test_payload_beyond_capacity_is_refused(trained):
    code = _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "too_big.png",
                "--payload-hex", "00" * 9)
    assert code == ExitCode.CAPACITY
    assert not (trained / "too_big.png").exists()


def test_missing_checkpoint(trained):
    code = _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "x.png",
                "--payload-hex", "00", "--checkpoint", "absent.pt")
    assert code == ExitCode.FILE


def test_style_command(trained):
    assert _cli(trained, "style", "--input", "images/img_01.png", "--out", "styled.png") == ExitCode.OK
    assert (trained / "styled.png").exists()


def test_sweep_writes_report_and_images(trained):
    assert _cli(trained, "sweep", "--als", "64", "256", "--baseline", "--save-images") == ExitCode.OK
    out = trained / "out"
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 2 + 3
    assert len(list((out / "sweep" / "al_256" / "stego").iterdir())) == 2
    assert (out / "sweep_summary.txt").exists()


def test_eval_writes_summary(trained):
    assert _cli(trained, "eval") == ExitCode.OK
    summary = (trained / "out" / "eval" / "summary.txt").read_text()
    assert "random-trigger" in summary
    assert "sigma 0.1" in summary
    for name in ("report.csv", "style_on_stego.csv", "random_trigger.csv", "noise.csv"):
        assert (trained / "out" / "eval" / name).exists(), name
    assert len((trained / "out" / "eval" / "random_trigger.csv").read_text().splitlines()) == 1 + 10
    with (trained / "out" / "eval" / "noise.csv").open() as handle:
        assert [row["sigma"] for row in csv.DictReader(handle)] == ["0.0", "0.1"]
    assert "split_id=" in (trained / "out" / "eval" / "report.csv").read_text().splitlines()[0]


def test_eval_refuses_checkpoint_of_another_architecture(trained):
    (trained / "wide.json").write_text(json.dumps({**RUN, "down_channels": [8] * 7}))
    assert _cli(trained, "eval", config="wide.json") == ExitCode.CHECKPOINT


def test_detect_on_sweep_directory(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(10):
        cover = rng.integers(20, 236, (128, 128, 3), dtype=np.uint8)
        stego = (cover.astype(np.int16) + rng.integers(-3, 4, cover.shape)).astype(np.uint8)
        save_png(cover, tmp_path / "sweep" / "al_256" / "cover" / f"{i}.png")
        save_png(stego, tmp_path / "sweep" / "al_256" / "stego" / f"{i}.png")
    (tmp_path / "run.json").write_text(json.dumps(RUN))

    assert _cli(tmp_path, "detect", "--sweep-dir", "sweep", "--als", "256") == ExitCode.OK
    with (tmp_path / "out" / "detect.csv").open() as handle:
        rows = list(csv.DictReader(handle))
    assert [row["al"] for row in rows] == ["256"]
    assert 0.0 <= float(rows[0]["shuffled_pvalue"]) <= 1.0


def test_unknown_configuration_key(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"bogus_key": 1}))
    assert _cli(tmp_path, "ingest") == ExitCode.CONFIG
    with pytest.raises(ConfigurationError, match="bogus_key"):
        load_run_config(tmp_path / "run.json")


def test_block_size_must_divide_image_size(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"block_size": 3}))
    with pytest.raises(ConfigurationError, match="block_size"):
        load_run_config(tmp_path / "run.json")
    assert _cli(tmp_path, "ingest") == ExitCode.CONFIG


def test_too_few_images_fails_ingest(tmp_path):
    _images(tmp_path / "images", n=3)
    (tmp_path / "run.json").write_text(json.dumps(RUN))
    assert _cli(tmp_path, "ingest") == ExitCode.FILE


def test_ecc_embed_then_extract(trained, monkeypatch):
    config = _small_rs_config(trained)
    assert _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "ecc_stego.png",
                "--payload-hex", "deadbeef", "--ecc", "-N", "8", config=config) == ExitCode.OK

    bits = _plane_bits(bytes.fromhex("deadbeef"), 256, SMALL_RS)
    bits[200:] ^= 1  # padding beyond the single codeword
    _fixed_extraction(monkeypatch, bits)
    assert _cli(trained, "extract", "--stego", "ecc_stego.png", "--ecc", "-N", "8",
                "--out", "ecc_payload.bin", config=config) == ExitCode.OK
    assert (trained / "ecc_payload.bin").read_bytes() == bytes.fromhex("deadbeef")


def test_uncorrectable_extraction_exits_with_ecc_code(trained, monkeypatch):
    config = _small_rs_config(trained)
    _fixed_extraction(monkeypatch, np.random.default_rng(5).integers(0, 2, 256, dtype=np.uint8))

    code = _cli(trained, "extract", "--stego", "images/img_02.png", "--ecc", "-N", "8",
                "--out", "garbage.bin", config=config)

    assert code == ExitCode.ECC
    assert not (trained / "garbage.bin").exists()


def test_verify_refuses_a_stego_that_loses_bits(trained, monkeypatch):
    payload = bytes.fromhex("0123456789abcdef")
    flipped = _plane_bits(payload, 64)
    flipped[5] ^= 1
    _fixed_extraction(monkeypatch, flipped)

    assert _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "lossy.png",
                "--payload-hex", payload.hex(), "--verify") == ExitCode.VERIFY


def test_verify_accepts_an_exact_stego(trained, monkeypatch):
    payload = bytes.fromhex("0123456789abcdef")
    _fixed_extraction(monkeypatch, _plane_bits(payload, 64))

    assert _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "exact.png",
                "--payload-hex", payload.hex(), "--verify") == ExitCode.OK
    assert (trained / "exact.png").exists()


def test_extract_with_another_trigger_image(trained, monkeypatch):
    triggers = []
    original = cli._extract_bits

    def recording(net, stego, size, block_size, trigger=None, encoding=(-1.0, 1.0)):
        triggers.append(trigger)
        return original(net, stego, size, block_size, trigger, encoding)

    monkeypatch.setattr(cli, "_extract_bits", recording)
    assert _cli(trained, "extract", "--stego", "images/img_00.png", "--trigger-image", "images/img_01.png",
                "--length", "8", "--out", "other_trigger.bin") == ExitCode.OK

    assert len((trained / "other_trigger.bin").read_bytes()) == 8
    torch.testing.assert_close(triggers[0], normalize(load_image(trained / "images" / "img_01.png")))


def test_binary_encoding_plane_is_black_and_white(trained):
    (trained / "binary.json").write_text(json.dumps({**RUN, "bit_encoding": "binary"}))

    assert _cli(trained, "embed", "--cover", "images/img_00.png", "--out", "binary.png",
                "--payload-hex", "0f", "--plane-png", "binary_plane.png", config="binary.json") == ExitCode.OK

    assert set(np.unique(load_image(trained / "binary_plane.png")).tolist()) == {0, 255}


def test_bit_encoding_setting(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"bit_encoding": "binary"}))
    assert load_run_config(tmp_path / "run.json").train_config().bit_encoding == "binary"

    (tmp_path / "run.json").write_text(json.dumps({"bit_encoding": "ternary"}))
    with pytest.raises(ConfigurationError, match="bit_encoding"):
        load_run_config(tmp_path / "run.json")


def test_image_size_must_be_a_power_of_two(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"image_size": 192, "block_size": 8}))
    with pytest.raises(ConfigurationError, match="image_size must be a power of two"):
        load_run_config(tmp_path / "run.json")
