import numpy as np
import pytest
import torch

from src.tools.image_model import save_png
from src.tools.steganalyzer import (
    KV_KERNEL,
    Detector,
    DetectorSpec,
    detector_accuracy,
    load_pairs,
    shuffled_label_pvalue,
    split_pairs,
    train_detector,
    write_accuracy_csv,
)
from src.utils.errors import DetectorDataError

FAST = DetectorSpec(epochs=20, batch_size=16)


def _ramps(n: int, size: int = 32, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    axis = torch.linspace(-1, 1, size)
    yy, xx = torch.meshgrid(axis, axis, indexing="ij")
    slopes = torch.rand(n, 3, 2, generator=generator) * 0.6 - 0.3
    offsets = torch.rand(n, 3, 1, 1, generator=generator) * 0.4 - 0.2
    return slopes[..., 0, None, None] * yy + slopes[..., 1, None, None] * xx + offsets


def _noisy(covers: torch.Tensor, amplitude: float = 0.2, seed: int = 1) -> torch.Tensor:
    noise = torch.rand(covers.shape, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    return covers + amplitude * noise


def test_high_pass_kernel_is_a_fixed_buffer():
    detector = Detector(DetectorSpec())

    assert detector.high_pass.shape == (3, 1, 5, 5)
    torch.testing.assert_close(detector.high_pass[0, 0], torch.tensor(KV_KERNEL, dtype=torch.float32) / 12)
    assert all(p is not detector.high_pass for p in detector.parameters())


def test_high_pass_suppresses_linear_content():
    detector = Detector(DetectorSpec())
    residual = detector.residual(_ramps(2))
    assert residual[..., 2:-2, 2:-2].abs().max().item() < 1e-4


def test_split_pairs_sizes():
    split = split_pairs(100)

    assert (len(split.train), len(split.validation), len(split.test)) == (72, 8, 20)
    assert sorted(np.concatenate([split.train, split.validation, split.test]).tolist()) == list(range(100))
    assert np.array_equal(split_pairs(100).test, split.test)


def test_split_keeps_at_least_one_test_pair():
    assert len(split_pairs(2).test) == 1


def test_detector_separates_smooth_from_noisy_images():
    covers = _ramps(100)
    result = train_detector(covers, _noisy(covers), FAST, show_progress=False)

    assert result.n_test == 40
    assert result.test_accuracy > 0.95
    torch.testing.assert_close(result.detector.high_pass[1, 0], torch.tensor(KV_KERNEL, dtype=torch.float32) / 12)


def test_shuffled_labels_stay_near_chance():
    covers = _ramps(100)
    result = train_detector(covers, _noisy(covers), FAST, shuffle_labels=True, show_progress=False)

    assert result.labels_shuffled
    assert result.test_accuracy < 0.8
    assert 0.0 < shuffled_label_pvalue(result.test_accuracy, result.n_test) <= 1.0


def test_pvalue_examples():
    assert shuffled_label_pvalue(0.5, 40) == pytest.approx(1.0)
    assert shuffled_label_pvalue(1.0, 40) < 1e-6
    with pytest.raises(DetectorDataError):
        shuffled_label_pvalue(0.5, 0)


def test_training_is_deterministic():
    covers = _ramps(20)
    spec = DetectorSpec(epochs=2)
    first = train_detector(covers, _noisy(covers), spec, show_progress=False)
    second = train_detector(covers, _noisy(covers), spec, show_progress=False)

    assert first.history == second.history
    assert first.test_accuracy == second.test_accuracy


def test_class_imbalance_is_rejected():
    with pytest.raises(DetectorDataError, match="60/40"):
        train_detector(_ramps(10), _ramps(4), FAST, show_progress=False)
    with pytest.raises(DetectorDataError):
        train_detector(_ramps(10), _ramps(0), FAST, show_progress=False)


def test_accuracy_of_empty_set_is_undefined():
    with pytest.raises(DetectorDataError):
        detector_accuracy(Detector(DetectorSpec()), torch.empty(0, 3, 16, 16), torch.empty(0, dtype=torch.long))


def test_load_pairs_matches_by_name(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("a.png", "b.png", "c.png"):
        save_png(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), tmp_path / "cover" / name)
        save_png(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), tmp_path / "stego" / name)
    save_png(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), tmp_path / "cover" / "extra.png")

    covers, stegos, names = load_pairs(tmp_path / "cover", tmp_path / "stego")

    assert names == ["a.png", "b.png", "c.png"]
    assert covers.shape == stegos.shape == (3, 3, 16, 16)
    with pytest.raises(FileNotFoundError):
        load_pairs(tmp_path / "cover", tmp_path / "absent")


def test_write_accuracy_csv(tmp_path):
    path = write_accuracy_csv([{"al": 256, "test_accuracy": 0.5, "n_test": 40,
                                "shuffled_accuracy": 0.45, "shuffled_pvalue": 0.63}], tmp_path / "detect.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "al,test_accuracy,n_test,shuffled_accuracy,shuffled_pvalue"
    assert lines[1].startswith("256,0.5,40")
