"""End-to-end runs of the command-line pipeline on a miniature dataset."""

import hashlib
import json
import shutil

import numpy as np
import pytest

from mvgen.cli import main
from mvgen.clustering import load_poses
from mvgen.config import (RunConfig, dumps_run_config, load_run_config,
                          with_overrides)
from mvgen.images import read_image, write_image
from mvgen.manifest import load_manifest

SPEC_TOML = """\
yaw_bins = 4
samples_per_bin = 6
image_size = 16
patch_size = 4
jitter_translate = 0.5
jitter_scale = 0.04
seed = 7
"""

RUN_TOML = """\
seed = 7

[schedule]
timesteps = 60

[unet]
image_size = 16
base_channels = 4
channel_multipliers = [1, 2]
res_blocks_per_level = 1
attention_levels = [8]
groupnorm_groups = 2
embed_dim = 8
pose_count = 4

[sampler]
steps = 6

[clustering]
clusters = 4

[training]
iterations = 12
batch_size = 4
lr = 0.001
checkpoint_every = 6
"""


def tree_hashes(root):
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One synth+cluster+train pipeline shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.toml").write_text(SPEC_TOML)
    (root / "run.toml").write_text(RUN_TOML)
    assert main(["synth", "--spec", str(root / "spec.toml"),
                 "--out", str(root / "ds")]) == 0
    assert main(["cluster", "--features", str(root / "ds" / "features.mrgf"),
                 "--config", str(root / "run.toml"),
                 "--out", str(root / "poses.json")]) == 0
    assert main(["train", "--data", str(root / "ds"),
                 "--poses", str(root / "poses.json"),
                 "--config", str(root / "run.toml"),
                 "--out", str(root / "run")]) == 0
    return root


def test_synth_writes_expected_tree(work):
    ds = work / "ds"
    for name in ("manifest.json", "features.mrgf", "truth.json", "spec.toml"):
        assert (ds / name).exists()
    manifest = load_manifest(ds / "manifest.json")
    assert len(manifest.entries) == 24
    assert all((ds / e.image).exists() for e in manifest.entries)


def test_synth_rerun_is_byte_identical(work, tmp_path):
    out = tmp_path / "again"
    spec = ["synth", "--spec", str(work / "spec.toml"), "--out", str(out)]
    assert main(spec) == 0
    before = tree_hashes(out)
    assert main(spec) == 0
    assert tree_hashes(out) == before


def test_synth_off_frame_jitter_is_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("yaw_bins = 4\nsamples_per_bin = 2\nimage_size = 16\n"
                   "patch_size = 4\njitter_translate = 9.0\n")
    code = main(["synth", "--spec", str(bad), "--out", str(tmp_path / "ds")])
    assert code == 1
    assert "jitter" in capsys.readouterr().err


def test_synth_rejects_unknown_spec_keys(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("yaw_bins = 4\nbanana = 1\n")
    assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "ds")]) == 1
    assert "banana" in capsys.readouterr().err


def test_cluster_records_k_and_echoes_config(work):
    doc = json.loads((work / "poses.json").read_text())
    assert doc["k"] == 4
    assert len(doc["labels"]) == 24
    echoed = load_run_config(work / "config.toml")
    assert echoed.clustering.clusters == 4
    assert echoed.seed == 7


def test_cluster_records_paper_scale_k(tmp_path):
    """A cars-scale pose count (25) round-trips into poses.json."""
    (tmp_path / "spec.toml").write_text(SPEC_TOML.replace(
        "samples_per_bin = 6", "samples_per_bin = 8"))
    assert main(["synth", "--spec", str(tmp_path / "spec.toml"),
                 "--out", str(tmp_path / "ds")]) == 0
    assert main(["cluster", "--features", str(tmp_path / "ds" / "features.mrgf"),
                 "--k", "25", "--out", str(tmp_path / "poses.json")]) == 0
    doc = json.loads((tmp_path / "poses.json").read_text())
    assert doc["k"] == 25
    assert len(set(doc["labels"].values())) <= 25


def test_cluster_k_above_image_count_fails(work, capsys):
    code = main(["cluster", "--features", str(work / "ds" / "features.mrgf"),
                 "--k", "999", "--out", str(work / "nope.json")])
    assert code == 1
    assert "999" in capsys.readouterr().err
    assert not (work / "nope.json").exists()


def test_train_outputs_and_loss_log(work):
    run = work / "run"
    assert (run / "checkpoint_final.mrgc").exists()
    assert (run / "checkpoint_final.opt.npz").exists()
    assert (run / "checkpoint_000006.mrgc").exists()
    assert (run / "config.toml").exists()
    lines = (run / "loss.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss,smoothed"
    assert len(lines) == 13


def test_train_resume_matches_uninterrupted(work, tmp_path):
    out = tmp_path / "resumed"
    code = main(["train", "--data", str(work / "ds"),
                 "--poses", str(work / "poses.json"),
                 "--config", str(work / "run.toml"),
                 "--resume", str(work / "run" / "checkpoint_000006.mrgc"),
                 "--out", str(out)])
    assert code == 0
    assert (out / "checkpoint_final.mrgc").read_bytes() == \
        (work / "run" / "checkpoint_final.mrgc").read_bytes()


def test_train_unlabeled_images_fail(work, tmp_path, capsys):
    doc = json.loads((work / "poses.json").read_text())
    dropped = sorted(doc["labels"])[0]
    del doc["labels"][dropped]
    poses = tmp_path / "partial.json"
    poses.write_text(json.dumps(doc))
    code = main(["train", "--data", str(work / "ds"), "--poses", str(poses),
                 "--config", str(work / "run.toml"),
                 "--out", str(tmp_path / "run")])
    assert code == 1
    assert dropped in capsys.readouterr().err


def test_sample_writes_pngs_and_metadata(work, tmp_path):
    out = tmp_path / "samples"
    argv = ["sample", "--ckpt", str(work / "run" / "checkpoint_final.mrgc"),
            "--pose", "1", "--count", "2", "--config", str(work / "run.toml"),
            "--out", str(out)]
    assert main(argv) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["steps"] == 6 and meta["pose"] == 1
    assert all((out / f).exists() for f in meta["files"])
    before = tree_hashes(out)
    assert main(argv) == 0
    assert tree_hashes(out) == before


def test_invert_reports_round_trip_error(work, tmp_path):
    ds = work / "ds"
    image = next(iter(sorted((ds / "images").glob("*.png"))))
    out = tmp_path / "inv"
    assert main(["invert", "--ckpt", str(work / "run" / "checkpoint_final.mrgc"),
                 "--image", str(image), "--pose", "0",
                 "--config", str(work / "run.toml"), "--out", str(out)]) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["round_trip_mae"] >= 0.0
    noise = np.load(out / "noise.npy")
    assert noise.shape == (3, 16, 16)
    assert (out / "recon.png").exists()


def test_novel_views_defaults_record_paper_settings(work, tmp_path):
    """Without flags or config the sampler runs gamma 1.5 at 50 steps."""
    out = tmp_path / "nv"
    image = sorted((work / "ds" / "images").glob("*.png"))[0]
    code = main(["novel-views", "--ckpt", str(work / "run" / "checkpoint_final.mrgc"),
                 "--poses", str(work / "poses.json"),
                 "--ref-image", str(image), "--targets", "0,2",
                 "--out", str(out)])
    assert code == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["gamma"] == 1.5
    assert meta["steps"] == 50
    assert [v["file"] for v in meta["views"]] == ["view_000.png", "view_002.png"]
    assert (out / "view_000.png").exists() and (out / "view_002.png").exists()


def test_novel_views_all_targets_and_rerun_identical(work, tmp_path):
    out = tmp_path / "nv"
    image = sorted((work / "ds" / "images").glob("*.png"))[0]
    argv = ["novel-views", "--ckpt", str(work / "run" / "checkpoint_final.mrgc"),
            "--poses", str(work / "poses.json"), "--ref-image", str(image),
            "--config", str(work / "run.toml"), "--out", str(out)]
    assert main(argv) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert [v["target"] for v in meta["views"]] == [0, 1, 2, 3]
    before = tree_hashes(out)
    assert main(argv) == 0
    assert tree_hashes(out) == before


def test_novel_views_noise_reference_needs_pose(work, tmp_path, capsys):
    code = main(["novel-views", "--ckpt", str(work / "run" / "checkpoint_final.mrgc"),
                 "--poses", str(work / "poses.json"),
                 "--config", str(work / "run.toml"),
                 "--out", str(tmp_path / "nv")])
    assert code == 1
    assert "--ref-pose" in capsys.readouterr().err


def test_eval_identical_views_score_zero_divergence(work, tmp_path):
    views = tmp_path / "views"
    views.mkdir()
    image = sorted((work / "ds" / "images").glob("*.png"))[0]
    for i in range(3):
        shutil.copy(image, views / f"view_{i:03d}.png")
    report_path = tmp_path / "report.json"
    assert main(["eval", "--views-dir", str(views),
                 "--poses", str(work / "poses.json"),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["histogram_divergence"]["mean"] == 0.0
    assert report["histogram_divergence"]["max"] == 0.0
    assert report["agreement"]["total"] == 3


def test_eval_empty_directory_fails(work, tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    code = main(["eval", "--views-dir", str(empty),
                 "--poses", str(work / "poses.json"),
                 "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert "no views" in capsys.readouterr().err


def test_ingest_builds_lexicographic_manifest(work, tmp_path):
    root = tmp_path / "plain"
    (root / "images").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for name in ("b", "a", "c"):
        img = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
        write_image(root / "images" / f"{name}.png", img)
    assert main(["ingest", "--root", str(root), "--image-size", "16",
                 "--patch-size", "4"]) == 0
    manifest = load_manifest(root / "manifest.json")
    assert [e.image_id for e in manifest.entries] == ["a", "b", "c"]
    assert manifest.patch_size == 4


def test_ingest_missing_images_dir_fails(tmp_path, capsys):
    assert main(["ingest", "--root", str(tmp_path), "--image-size", "16",
                 "--patch-size", "4"]) == 1
    assert "images" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main(["cluster"]) == 1          # missing required flags
    assert main(["no-such-command"]) == 1
    capsys.readouterr()


def test_run_config_round_trips_through_toml():
    config = RunConfig()
    assert load_run_config_text(dumps_run_config(config)) == config
    tweaked = with_overrides(config, {"sampler.gamma": 2.0, "seed": 11,
                                      "training.lr": None})
    assert tweaked.sampler.gamma == 2.0
    assert tweaked.seed == 11
    assert tweaked.training.lr == config.training.lr  # None = flag unset
    assert load_run_config_text(dumps_run_config(tweaked)) == tweaked


def load_run_config_text(text):
    import tomli
    return RunConfig.from_dict(tomli.loads(text))


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="sampler.pizza"):
        RunConfig.from_dict({"sampler": {"pizza": 1}})
    with pytest.raises(ValueError, match="unknown config key"):
        with_overrides(RunConfig(), {"sampler.pizza": 1})


def test_echoed_config_reproduces_run(work, tmp_path):
    """The config echoed into a run directory re-drives the same training."""
    out = tmp_path / "rerun"
    assert main(["train", "--data", str(work / "ds"),
                 "--poses", str(work / "poses.json"),
                 "--config", str(work / "run" / "config.toml"),
                 "--out", str(out)]) == 0
    assert (out / "checkpoint_final.mrgc").read_bytes() == \
        (work / "run" / "checkpoint_final.mrgc").read_bytes()
