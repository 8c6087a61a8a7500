from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from partvox.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from partvox.config import PipelineConfig
from partvox.errors import ConfigError


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small N=16 corpus plus briefly trained checkpoints, built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {"resolution": 16, "train": 40, "val": 8, "test": 8, "seed": 7, "d": 32, "heads": 4, "blocks": 1,
           "plan_steps": 4, "synth_steps": 4, "sample_steps": 3,
           "paths": {"data": str(root / "data"), "planner_ckpt": str(root / "planner.ckpt"),
                     "synth_ckpt": str(root / "synth.ckpt"), "out": str(root / "run")}}
    (root / "config.json").write_text(json.dumps(cfg))
    conf = ["--config", str(root / "config.json")]
    assert main(["datagen", *conf]) == EXIT_OK
    assert main(["plan-train", *conf, "--log-every", "0"]) == EXIT_OK
    assert main(["synth-train", *conf, "--log-every", "0"]) == EXIT_OK
    return root, conf


def test_usage_errors_exit_one(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["grad-check", "--bogus"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_bad_config_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"beta": 1.5}))
    assert main(["grad-check", "--config", str(bad)]) == EXIT_USAGE
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["grad-check", "--config", str(bad)]) == EXIT_USAGE
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"alpha": 0})


def test_config_hash_ignores_paths():
    a = PipelineConfig(paths={"data": "/x"})
    b = PipelineConfig(paths={"data": "/y"})
    assert a.hash() == b.hash() != PipelineConfig(seed=1).hash()
    assert a.seed_for("planner") != a.seed_for("synth")


def test_grad_check_command(capsys):
    assert main(["grad-check", "--samples", "20"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 4


def test_missing_checkpoint_is_config_error(workspace, tmp_path):
    root, conf = workspace
    code = main(["pipeline", *conf, "--planner-ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE


def test_checkpoints_carry_config_hash(workspace):
    root, _ = workspace
    cfg = PipelineConfig.load(root / "config.json")
    for name in ("planner.ckpt", "synth.ckpt"):
        side = json.loads((root / f"{name}.json").read_text())
        assert side["config_hash"] == cfg.hash()


def test_single_object_commands(workspace, tmp_path):
    root, conf = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    oid = manifest["splits"]["test"][0]
    obj = root / "data" / "objects" / oid
    boxes = tmp_path / "boxes.json"
    assert main(["plan-sample", *conf, "--voxels", str(obj / "voxels.json"), "--mask", str(obj / "mask.json"),
                 "--out", str(boxes)]) == EXIT_OK
    assert isinstance(json.loads(boxes.read_text()), list)
    parts = tmp_path / "parts.json"
    assert main(["synth-sample", *conf, "--boxes", str(obj / "boxes.json"), "--voxels", str(obj / "voxels.json"),
                 "--steps", "2", "-S", "3", "--out", str(parts)]) == EXIT_OK
    doc = json.loads(parts.read_text())
    assert doc["config_hash"] and all({"index", "voxels", "latents"} <= set(p) for p in doc["parts"])
    bad_mask = tmp_path / "mask.json"
    bad_mask.write_text("{not json")
    assert main(["plan-sample", *conf, "--voxels", str(obj / "voxels.json"), "--mask", str(bad_mask),
                 "--out", str(boxes)]) == EXIT_DATA


def test_pipeline_outputs_are_reproducible_and_read_only(workspace, tmp_path):
    root, conf = workspace
    before = tree_digest(root / "data")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", *conf, "--out", str(a)]) == EXIT_OK
    assert main(["pipeline", *conf, "--out", str(b)]) == EXIT_OK
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    report = json.loads((a / "report.json").read_text())
    assert report["header"]["config_hash"] == PipelineConfig.load(root / "config.json").hash()
    assert len(list((a / "objects").iterdir())) == 8
    for d in (a / "objects").iterdir():
        assert json.loads((d / "merged.json").read_text())["config_hash"] == report["header"]["config_hash"]
    assert tree_digest(root / "data") == before


def test_pipeline_isolates_a_corrupt_object(workspace, tmp_path):
    root, conf = workspace
    data = tmp_path / "data"
    import shutil

    shutil.copytree(root / "data", data)
    victim = json.loads((data / "manifest.json").read_text())["splits"]["test"][2]
    (data / "objects" / victim / "voxels.json").write_text("garbage")
    out = tmp_path / "run"
    assert main(["pipeline", *conf, "--data", str(data), "--out", str(out)]) == EXIT_DATA
    report = json.loads((out / "report.json").read_text())
    assert list(report["failed"]) == [victim]
    assert len(report["objects"]) == 7


def test_eval_command(workspace, tmp_path):
    root, conf = workspace
    run = tmp_path / "run"
    assert main(["pipeline", *conf, "--out", str(run), "--limit", "2"]) == EXIT_OK
    rep = tmp_path / "eval.json"
    assert main(["eval", *conf, "--pred", str(run), "--gt", str(root / "data"), "--report", str(rep),
                 "--oracle"]) == EXIT_OK
    doc = json.loads(rep.read_text())
    assert doc["aggregate"]["evaluated"] == 2 and doc["header"]["oracle"] is True
    pipe = json.loads((run / "report.json").read_text())
    for oid, entry in doc["objects"].items():
        assert entry["cd"] == pytest.approx(pipe["objects"][oid]["cd"], abs=1e-9)


def test_ablate_command(workspace, tmp_path):
    root, conf = workspace
    rep = tmp_path / "ablate.json"
    assert main(["ablate", *conf, "--steps", "2", "--report", str(rep)]) == EXIT_OK
    doc = json.loads(rep.read_text())
    assert [r["variant"] for r in doc["table"]] == ["full", "no_mask", "no_coverage"]
    assert doc["header"]["no_coverage"]["lam_cov"] == 0.0
    assert doc["header"]["no_mask"]["use_mask"] is False
    assert doc["columns"] == ["voxel_recall", "voxel_iou", "bbox_iou"]
    for c in doc["comparisons"].values():
        assert c["sign"] in {"+", "-", "0"}
