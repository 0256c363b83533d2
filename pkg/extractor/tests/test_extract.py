import numpy as np
import pytest
from PIL import Image

from featx import ExtractorConfig, ExtractorError, extract
from featx.cli import main as cli_main
from featx.mrgf import read_records

SIZES = [(40, 52), (52, 40), (36, 36), (64, 48), (48, 64),
         (40, 40), (56, 44), (44, 56), (60, 60), (52, 52)]


def make_images(root, count=10, seed=42):
    """Deterministic little RGB pictures with varied aspect ratios."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        h, w = SIZES[i % len(SIZES)]
        ramp = np.linspace(0, 200, w, dtype=np.float64)[None, :, None]
        arr = (rng.integers(0, 55, (h, w, 3)) + ramp).astype(np.uint8)
        Image.fromarray(arr).save(root / f"img_{i:02d}.png")


def test_grid_arithmetic_patch14_resize224(tmp_path):
    make_images(tmp_path / "imgs", count=10)
    config = ExtractorConfig(variant="random-projection", resize=224)
    n = extract(tmp_path / "imgs", config, tmp_path / "f.mrgf")
    assert n == 10
    records, patch = read_records(tmp_path / "f.mrgf")
    assert patch == 14
    assert len(records) == 10
    assert all(grid.shape == (16, 16, 32) for _, grid in records)


def test_same_directory_twice_is_byte_identical(tmp_path):
    make_images(tmp_path / "imgs", count=4)
    config = ExtractorConfig(variant="random-projection", resize=28, batch_size=3)
    extract(tmp_path / "imgs", config, tmp_path / "a.mrgf")
    extract(tmp_path / "imgs", config, tmp_path / "b.mrgf")
    assert (tmp_path / "a.mrgf").read_bytes() == (tmp_path / "b.mrgf").read_bytes()


def test_ids_are_stems_in_sorted_order(tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(1)
    for name in ["zebra.png", "apple.jpg", "mango.jpeg"]:
        Image.fromarray(rng.integers(0, 255, (30, 30, 3), dtype=np.uint8)).save(imgs / name)
    config = ExtractorConfig(variant="random-projection", resize=28)
    extract(imgs, config, tmp_path / "f.mrgf")
    records, _ = read_records(tmp_path / "f.mrgf")
    assert [r[0] for r in records] == ["apple", "mango", "zebra"]


def test_corrupted_image_fails_naming_the_file(tmp_path, capsys):
    imgs = tmp_path / "imgs"
    make_images(imgs, count=2)
    (imgs / "img_99.png").write_bytes(b"\x89PNG but not really")
    config = ExtractorConfig(variant="random-projection", resize=28)
    with pytest.raises(ExtractorError, match="img_99.png"):
        extract(imgs, config, tmp_path / "f.mrgf")
    rc = cli_main(["extract", "--images", str(imgs), "--out", str(tmp_path / "f.mrgf"),
                   "--variant", "random-projection", "--resize", "28"])
    assert rc == 1
    assert "img_99.png" in capsys.readouterr().err


def test_config_validation():
    with pytest.raises(ExtractorError, match="unknown variant"):
        ExtractorConfig(variant="resnet")
    with pytest.raises(ExtractorError, match="not a multiple"):
        ExtractorConfig(variant="random-projection", resize=30)
    with pytest.raises(ExtractorError, match="fixed patch size"):
        ExtractorConfig(variant="dinov2-small", patch_size=16)
    assert ExtractorConfig(variant="dinov2-small").patch_size == 14


def test_empty_and_missing_directories(tmp_path):
    config = ExtractorConfig(variant="random-projection", resize=28)
    with pytest.raises(ExtractorError, match="not a directory"):
        extract(tmp_path / "nowhere", config, tmp_path / "f.mrgf")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ExtractorError, match="no PNG/JPEG"):
        extract(tmp_path / "empty", config, tmp_path / "f.mrgf")


def test_pretrained_unavailable_is_a_clear_error(tmp_path, monkeypatch):
    """Without hub access or a local cache the pretrained path must fail
    loudly instead of substituting another featurizer."""
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
    monkeypatch.setenv("HF_HOME", str(tmp_path / "hf-empty"))
    make_images(tmp_path / "imgs", count=1)
    config = ExtractorConfig(variant="dinov2-small")
    with pytest.raises(ExtractorError, match="unavailable") as err:
        extract(tmp_path / "imgs", config, tmp_path / "f.mrgf")
    assert "dinov2-small" in str(err.value)


def test_cli_verify_reports_ok(tmp_path, capsys):
    make_images(tmp_path / "imgs", count=3)
    rc = cli_main(["extract", "--images", str(tmp_path / "imgs"),
                   "--out", str(tmp_path / "f.mrgf"),
                   "--variant", "random-projection", "--resize", "28"])
    assert rc == 0
    assert cli_main(["verify", str(tmp_path / "f.mrgf")]) == 0
    out = capsys.readouterr().out
    assert "wrote 3 records" in out
    assert "OK: 3 records, grid 2x2x32, patch 14" in out


def test_cli_verify_missing_file(tmp_path, capsys):
    assert cli_main(["verify", str(tmp_path / "nope.mrgf")]) == 1
    assert "error:" in capsys.readouterr().err
