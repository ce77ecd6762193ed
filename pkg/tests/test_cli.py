import json

import numpy as np
import pytest
import yaml
from loguru import logger

from emcot_vla.main import build_parser, main, split_overrides
from emcot_vla.utils.io import read_json


@pytest.fixture(autouse=True)
def reset_logger():
    yield
    logger.remove()


@pytest.fixture
def config_file(tmp_path, tiny_run_config):
    path = tmp_path / "tiny.yaml"
    data = json.loads(json.dumps(tiny_run_config.to_dict()))
    path.write_text(yaml.safe_dump(data))
    return path


def last_error(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def read_pgm(path) -> np.ndarray:
    values = path.read_text().split()
    width, height = int(values[1]), int(values[2])
    return np.array(values[4:], dtype=int).reshape(height, width)


def test_split_overrides():
    overrides, rest = split_overrides(["--config=a.yaml", "--env.step_limit=5", "evaluate", "--mode", "full"])
    assert overrides == ["env.step_limit=5"]
    assert rest == ["--config=a.yaml", "evaluate", "--mode", "full"]


def test_parser_commands():
    parser = build_parser()
    args = parser.parse_args(["ablate", "--kind", "recipe", "--checkpoints", "full=a.pt,no_vg=b.pt"])
    assert args.checkpoints == ["full=a.pt", "no_vg=b.pt"]
    args = parser.parse_args(["evaluate", "--levels", "easy,hard", "--tasks", "stack_two"])
    assert args.levels == ["easy", "hard"] and args.tasks == ["stack_two"]


def test_inspect_mask_writes_demo(tmp_path):
    out = tmp_path / "mask.pgm"
    assert main(["inspect-mask", "--out", str(out)]) == 0
    grid = read_pgm(out)
    assert grid.shape == (8, 8)
    assert (grid[7] == 255).sum() == 6


def test_override_changes_mask(tmp_path):
    out = tmp_path / "mask.csv"
    assert main(["--tokens.isolate_noise_groups=false", "inspect-mask", "--out", str(out), "--format", "csv"]) == 0
    grid = np.loadtxt(out, delimiter=",", dtype=int)
    assert grid[7, 4] == 1 and grid[7, 5] == 1


def test_argument_error_is_validation_exit(capsys):
    assert main(["inspect-mask"]) == 1
    error = last_error(capsys)
    assert error["error"] == "ConfigurationError"
    assert error["exit_code"] == 1


def test_unknown_override_section(tmp_path, capsys):
    assert main(["--optimizer.lr=1", "inspect-mask", "--out", str(tmp_path / "m.pgm")]) == 1
    assert last_error(capsys)["error"] == "ConfigurationError"


def test_missing_manifest_is_input_error(tmp_path, capsys):
    assert main(["annotate", "--data", str(tmp_path)]) == 1
    error = last_error(capsys)
    assert error["error"] == "InputError"
    assert "manifest.json" in error["message"]


def test_ablate_rejects_unknown_variant(tmp_path, capsys, config_file):
    code = main(["--config", str(config_file), "ablate", "--checkpoints", "turbo=x.pt", "--out", str(tmp_path)])
    assert code == 1
    assert last_error(capsys)["error"] == "ConfigurationError"


def test_rollout_without_checkpoint(tmp_path, config_file):
    grid = tmp_path / "grid.png"
    code = main(
        ["--config", str(config_file), "rollout", "--task", "press_button", "--mode", "no_vis", "--grid", str(grid)]
    )
    assert code == 0
    assert grid.exists()


def test_data_pipeline_end_to_end(tmp_path, config_file, capsys):
    data = tmp_path / "data"
    common = ["--config", str(config_file)]
    synth = ["synth-env-data", "--out", str(data), "--tasks", "press_button", "--seeds", "2", "--vqa-per-scene", "1"]
    assert main(common + synth) == 0
    manifest = read_json(data / "manifest.json")
    assert manifest["collection"]["attempted"] == 2
    assert len(manifest["trajectories"]) == manifest["collection"]["succeeded"] >= 1

    assert main(common + ["annotate", "--data", str(data)]) == 0
    assert (data / "records.jsonl").exists() and (data / "labels.jsonl").exists()

    assert main(common + ["build-dataset", "--data", str(data), "--skip-codec"]) == 0

    pre = tmp_path / "pretrain"
    assert main(common + ["pretrain", "--data", str(data), "--out", str(pre), "--steps", "1", "--recipe", "no_vg"]) == 0
    assert (pre / "pretrain-final.pt").exists()

    fine = tmp_path / "finetune"
    finetune = ["finetune", "--data", str(data), "--out", str(fine), "--init", str(pre / "pretrain-final.pt")]
    assert main(common + finetune + ["--steps", "1", "--mode", "no_text"]) == 0
    report = read_json(fine / "finetune-report.json")
    assert report["steps"] == 1

    reports = tmp_path / "reports"
    capsys.readouterr()
    evaluate = ["evaluate", "--checkpoint", str(fine / "finetune-final.pt"), "--out", str(reports), "--mode", "no_text"]
    assert main(common + evaluate) == 0
    assert "press_button" in capsys.readouterr().out
    assert (reports / "evaluation.json").exists()
    assert (reports / "evaluation.xlsx").exists()


def test_log_level_is_validated(tmp_path, capsys):
    assert main(["--log-level", "debug", "inspect-mask", "--out", str(tmp_path / "m.pgm")]) == 0
    assert main(["--log-level", "FOO", "inspect-mask", "--out", str(tmp_path / "m.pgm")]) == 1
    error = last_error(capsys)
    assert error["error"] == "ConfigurationError"
    assert error["exit_code"] == 1
