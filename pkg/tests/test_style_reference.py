import numpy as np
import pytest
import torch

from src.tools.image_model import load_image, normalize, save_png
from src.tools.style_reference import (
    DEFAULT_GAMMA,
    DEFAULT_MATRIX,
    IDENTITY_MATRIX,
    StyleGroundTruthSource,
    TransformParams,
    canonical_image,
    ground_truth_for,
    ground_truths,
    reference_transform,
    style_image,
)
from src.utils.errors import ConfigurationError, MissingGroundTruthError

IDENTITY = TransformParams(matrix=IDENTITY_MATRIX, gamma=(1.0, 1.0, 1.0))


def _image(seed: int = 0, size: int = 16) -> torch.Tensor:
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed)) * 2 - 1


def test_identity_parameters_leave_input_unchanged():
    x = _image()
    torch.testing.assert_close(reference_transform(x, IDENTITY), x)


def test_black_stays_black():
    black = torch.full((3, 8, 8), -1.0)
    torch.testing.assert_close(reference_transform(black), black)


def test_mid_gray_maps_to_scaled_row_sums():
    out = reference_transform(torch.zeros(3, 4, 4))
    for channel, (row, gamma) in enumerate(zip(DEFAULT_MATRIX, DEFAULT_GAMMA)):
        expected = 2 * (0.5 * sum(row)) ** gamma - 1
        assert torch.allclose(out[channel], torch.tensor(expected), atol=1e-6)


def test_default_transform_changes_images_and_is_deterministic():
    x = _image(1)
    first, second = reference_transform(x), reference_transform(x)

    assert torch.equal(first, second)
    assert (first - x).abs().mean().item() > 0.01
    assert first.min().item() >= -1.0 and first.max().item() <= 1.0


def test_batched_input():
    batch = torch.stack([_image(0), _image(1)])
    out = reference_transform(batch)
    torch.testing.assert_close(out[1], reference_transform(_image(1)))


def test_degenerate_parameters_rejected():
    singular = TransformParams(matrix=((1, 1, 1), (1, 1, 1), (1, 1, 1)), gamma=(1, 1, 1))
    with pytest.raises(ConfigurationError, match="singular"):
        reference_transform(_image(), singular)
    with pytest.raises(ConfigurationError, match="gamma"):
        reference_transform(_image(), TransformParams(gamma=(1.0, 0.0, 1.0)))


def test_builtin_source_rejects_identity():
    with pytest.raises(ConfigurationError, match="identity"):
        StyleGroundTruthSource(transform=IDENTITY).check()


def test_builtin_ground_truth_delegates_to_transform():
    source = StyleGroundTruthSource()
    x = _image(2)

    torch.testing.assert_close(ground_truth_for("a.png", source, x=x), reference_transform(x))
    assert torch.equal(ground_truth_for("a.png", source, x=x), ground_truth_for("a.png", source, x=x))


def test_external_ground_truth_returns_stored_image(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    save_png(raw, tmp_path / "gt" / "a.png")
    source = StyleGroundTruthSource(mode="external_directory", ground_truth_dir="gt", style_image_path="y.png")

    z_g = ground_truth_for("a.png", source, size=16, base_dir=tmp_path)

    assert torch.equal(z_g, normalize(raw))


def test_external_ground_truth_missing(tmp_path):
    (tmp_path / "gt").mkdir()
    source = StyleGroundTruthSource(mode="external_directory", ground_truth_dir="gt")
    images = {"a.png": np.zeros((16, 16, 3), dtype=np.uint8), "b.png": np.zeros((16, 16, 3), dtype=np.uint8)}

    with pytest.raises(MissingGroundTruthError):
        ground_truth_for("a.png", source, size=16, base_dir=tmp_path)
    with pytest.raises(MissingGroundTruthError, match="b.png"):
        ground_truths(["a.png", "b.png"], images, source, base_dir=tmp_path)


def test_builtin_style_image_is_styled_canonical_image():
    source = StyleGroundTruthSource()
    y = style_image(source, 32)

    assert y.shape == (3, 32, 32)
    assert torch.equal(y, style_image(source, 32))
    torch.testing.assert_close(y, reference_transform(normalize(canonical_image(32))))
    assert not torch.equal(y, normalize(canonical_image(32)))


def test_style_image_from_file(tmp_path):
    raw = np.random.default_rng(3).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    save_png(raw, tmp_path / "style.png")
    source = StyleGroundTruthSource(style_image_path="style.png")

    assert torch.equal(style_image(source, 16, base_dir=tmp_path), normalize(load_image(tmp_path / "style.png")))


def test_missing_style_image_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        style_image(StyleGroundTruthSource(style_image_path="nope.png"), 16, base_dir=tmp_path)
    with pytest.raises(ConfigurationError):
        style_image(StyleGroundTruthSource(mode="external_directory", ground_truth_dir="gt"), 16, base_dir=tmp_path)
