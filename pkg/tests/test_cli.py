import json
import subprocess
import sys

import pytest

from hireplan.agent import EpisodeRecord
from hireplan.cli import main
from hireplan.evaluation import SuiteSpec


def test_gen_scenes_writes_suite_and_scene_files(tmp_path, capsys):
    out = tmp_path / "suite.json"
    assert main(["gen-scenes", "--count", "6", "--out", str(out),
                 "--scenes-dir", str(tmp_path / "scenes")]) == 0
    suite = SuiteSpec.load(out)
    assert len(suite.episodes) == 6
    files = sorted(p.name for p in (tmp_path / "scenes").iterdir())
    assert files == sorted(f"{e.episode_id}.json" for e in suite.episodes)
    one = json.loads((tmp_path / "scenes" / files[0]).read_text())
    assert set(one) == {"scene", "task"}


def test_gen_scenes_is_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["gen-scenes", "--count", "5", "--seed", "3", "--out", str(a)])
    main(["gen-scenes", "--count", "5", "--seed", "3", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_bad_profile_is_rejected(tmp_path):
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps({"occlusion_rate": 3.0}))
    assert main(["gen-scenes", "--count", "2", "--profile", str(prof),
                 "--out", str(tmp_path / "s.json")]) == 2


def test_run_then_dump_map_from_log(tmp_path, capsys):
    suite = tmp_path / "suite.json"
    main(["gen-scenes", "--count", "3", "--out", str(suite)])
    out = tmp_path / "run"
    assert main(["run", "--suite", str(suite), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "logs sha256" in text
    for name in ("summary.txt", "summary.csv", "episodes.csv"):
        assert (out / name).exists()
    rows = (out / "episodes.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * len(SuiteSpec.load(suite).variants)
    log = sorted((out / "logs" / "full").iterdir())[0]
    dumped = tmp_path / "map.json"
    assert main(["dump-map", "--log", str(log), "--out", str(dumped)]) == 0
    m = json.loads(dumped.read_text())
    eid = log.stem
    assert main(["dump-map", "--suite", str(suite), "--episode", eid,
                 "--out", str(tmp_path / "live.json")]) == 0
    assert json.loads((tmp_path / "live.json").read_text()) == m
    assert EpisodeRecord.read(log).of("header")[0]["episode_id"] == eid


def test_dump_map_needs_a_source(tmp_path):
    assert main(["dump-map"]) == 2
    assert main(["dump-map", "--n", "3", "--episode", "nope"]) == 2


def test_empty_suite_exits_3(tmp_path):
    suite = tmp_path / "empty.json"
    SuiteSpec([]).save(suite)
    assert main(["run", "--suite", str(suite), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("levels", ["", "high,top", "everything"])
def test_bad_levels_exit_2(tmp_path, levels):
    assert main(["ablation", "--n", "2", "--levels", levels, "--out", str(tmp_path / "o")]) == 2


def test_partial_ablation_variants(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablation", "--n", "2", "--levels", "low", "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "logs").iterdir()) == ["full", "wo_low"]


def test_invalid_config_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_steps": 0}))
    assert main(["run", "--n", "2", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_dataset_train_eval_pipeline(tmp_path, capsys):
    data, model = tmp_path / "d.jsonl", tmp_path / "m.pkl"
    assert main(["gen-dataset", "--n", "12", "--max-steps", "80", "--out", str(data)]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts["records"] == len(data.read_text().splitlines()) - 1
    assert main(["train-corrector", "--data", str(data), "--out", str(model)]) == 0
    held = json.loads(capsys.readouterr().out)["held_out"]
    assert main(["eval-corrector", "--model", str(model), "--data", str(data), "--held-out"]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again == held


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "hireplan.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for cmd in ("gen-scenes", "dump-map", "gen-dataset", "train-corrector", "eval-corrector",
                "run", "ablation"):
        assert cmd in out
