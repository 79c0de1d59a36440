import json
import re

import numpy as np
import pytest

from dwsmpc import cli, datagen
from dwsmpc import scene as S
from dwsmpc.arm import ArmSpec


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_documents_every_flag(capsys, command):
    with pytest.raises(SystemExit) as info:
        cli.main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    sub = cli.build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        if action.dest == "help":
            continue
        assert action.help, f"{command}: {action.dest} has no help text"
        for flag in action.option_strings:
            assert re.search(rf"(^|\s){re.escape(flag)}\b", text), f"{command}: {flag} missing from --help"


def test_gen_scenes_is_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "gen-scenes", "--env", "shelf", "--count", "4", "--seed", "7", "--out", str(tmp_path / d))[0] == 0
    a, b = (tmp_path / d / "scenes_shelf.jsonl" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    scenes = [S.Scene.from_json(line) for line in a.read_text().splitlines()]
    assert len(scenes) == 4
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "gen-scenes"
    assert set(manifest) >= {"config_hash", "tool_version", "timestamps"}
    assert manifest["config_hash"] == json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 3, "env": ["table"], "seed": 1}))
    assert run(capsys, "gen-scenes", "--config", str(cfg), "--out", str(tmp_path / "a"))[0] == 0
    assert len((tmp_path / "a" / "scenes_table.jsonl").read_text().splitlines()) == 3
    assert run(capsys, "gen-scenes", "--config", str(cfg), "--count", "2", "--out", str(tmp_path / "b"))[0] == 0
    assert len((tmp_path / "b" / "scenes_table.jsonl").read_text().splitlines()) == 2


@pytest.mark.parametrize("argv", [
    ["gen-scenes", "--bogus"],
    ["gen-scenes", "--count", "many"],
    ["teleport"],
    ["gen-scenes", "--env", "kitchen"],
])
def test_usage_errors_exit_2_with_json(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_malformed_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{count: 3")
    code, _, err = run(capsys, "gen-scenes", "--config", str(bad), "--out", str(tmp_path))
    assert code == 2 and "malformed config" in json.loads(err)["message"]
    bad.write_text(json.dumps({"colour": "red"}))
    assert run(capsys, "gen-scenes", "--config", str(bad), "--out", str(tmp_path))[0] == 2


def test_eval_without_weights_names_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--method", "diffusion+ocp", "--variant", "cspace", "--env", "table",
                       "--models", str(tmp_path), "--out", str(tmp_path / "o"))
    msg = json.loads(err.strip().splitlines()[-1])
    assert code == 2 and msg["error"] == "usage"
    assert str(tmp_path / "table_cspace.dwsw") in msg["message"]
    assert not (tmp_path / "o" / "metrics.json").exists()


def test_eval_cold_ocp_writes_rows_and_metrics(tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--method", "ocp_cold", "--env", "table", "--scenes", "1", "--problems", "2",
                     "--ocp-iters", "2", "--workers", "1", "--out", str(tmp_path))
    assert code == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["ocp_cold[it=2]"]["n"] == 2
    assert len((tmp_path / "rows_ocp_cold.csv").read_text().splitlines()) == 3


def test_inspect_dataset_counts_records(tmp_path, capsys):
    spec = ArmSpec()
    q = np.zeros((11, 3))
    rec = datagen.DatasetRecord(S.Scene(), np.zeros(3), np.array([0.9, 0.0]), q, 0.0, 0)
    path = tmp_path / "d.jsonl"
    datagen.write_dataset(path, datagen.make_header(spec, 10, "table"), [rec, rec, rec])
    code, out, _ = run(capsys, "inspect", str(path))
    assert code == 0
    assert json.loads(out)["records"] == len(path.read_text().splitlines()) - 1 == 3


def test_inspect_rejects_unknown_file(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"nothing to see")
    assert run(capsys, "inspect", str(junk))[0] == 2
    assert run(capsys, "inspect", str(tmp_path / "absent.jsonl"))[0] == 2


def test_runtime_failure_exits_1(monkeypatch, tmp_path, capsys):
    def explode(cfg, out):
        raise RuntimeError("solver blew up")

    monkeypatch.setitem(cli.COMMANDS, "gen-scenes", (explode, "x"))
    code, _, err = run(capsys, "gen-scenes", "--out", str(tmp_path))
    assert code == 1
    assert json.loads(err) == {"error": "runtime", "type": "RuntimeError", "message": "solver blew up"}
