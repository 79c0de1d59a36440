import json
from dataclasses import replace

import numpy as np
import pytest

from dwsmpc import collision as col, datagen, scene as S
from dwsmpc.arm import ArmSpec, end_effector

SPEC = ArmSpec()
EMPTY = S.EnvironmentSpec("empty", walls=(), count_range=(0, 0))
PARAMS = datagen.DatagenParams(T=20, ocp_iters=40, smooth_iters=20)


@pytest.fixture(scope="module")
def empty_run():
    return datagen.generate(EMPTY, SPEC, 2, 3, PARAMS, seed=5)


def test_empty_environment_accepts_everything(empty_run):
    records, report = empty_run
    assert report.attempted == 6
    assert report.acceptance_rate >= 5 / 6
    assert len(records) == report.accepted


def test_accepted_records_revalidate(empty_run):
    for rec in empty_run[0]:
        assert rec.trajectory.shape == (PARAMS.T + 1, SPEC.n)
        np.testing.assert_array_equal(rec.trajectory[0], rec.q_start)
        assert col.clearance(SPEC, rec.trajectory, rec.scene).min() >= PARAMS.eps_safe
        assert np.linalg.norm(end_effector(SPEC, rec.trajectory[-1]) - rec.goal) <= PARAMS.goal_tol
        assert datagen.record_violations(rec, SPEC, PARAMS.eps_safe, PARAMS.goal_tol) == []


def test_report_summary(empty_run):
    summary = empty_run[1].summary()
    assert summary["accepted"] + sum(summary["rejections"].values()) == summary["attempted"]
    assert summary["path_length"]["min"] <= summary["path_length"]["median"] <= summary["path_length"]["max"]
    json.dumps(summary)


def test_fixed_seed_gives_identical_files(tmp_path, empty_run):
    again, _ = datagen.generate(EMPTY, SPEC, 2, 3, PARAMS, seed=5)
    header = datagen.make_header(SPEC, PARAMS.T, "empty")
    datagen.write_dataset(tmp_path / "a.jsonl", header, empty_run[0])
    datagen.write_dataset(tmp_path / "b.jsonl", header, again)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_roundtrip(tmp_path, empty_run):
    path = tmp_path / "d.jsonl"
    header = datagen.make_header(SPEC, PARAMS.T, "empty", PARAMS.dt)
    datagen.write_dataset(path, header, empty_run[0])
    h, recs = datagen.read_dataset(path, SPEC, PARAMS.T)
    assert h == header
    assert len(recs) == len(empty_run[0])
    for a, b in zip(recs, empty_run[0]):
        np.testing.assert_array_equal(a.trajectory, b.trajectory)
        np.testing.assert_array_equal(a.goal, b.goal)
        assert a.scene == b.scene and a.cost == b.cost and a.seed == b.seed


def test_header_mismatch_rejected(tmp_path, empty_run):
    path = tmp_path / "d.jsonl"
    datagen.write_dataset(path, datagen.make_header(SPEC, PARAMS.T), empty_run[0])
    with pytest.raises(datagen.DatasetError, match="horizon"):
        datagen.read_dataset(path, T=PARAMS.T + 1)
    other = ArmSpec(lengths=(0.45, 0.3, 0.2))
    with pytest.raises(datagen.DatasetError, match="arm"):
        datagen.read_dataset(path, spec=other)
    path.write_text(json.dumps({"format": "something-else"}) + "\n")
    with pytest.raises(datagen.DatasetError, match="line 1"):
        datagen.read_dataset(path)


def test_truncated_line_names_line_number(tmp_path, empty_run):
    path = tmp_path / "d.jsonl"
    datagen.write_dataset(path, datagen.make_header(SPEC, PARAMS.T), empty_run[0][:3])
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(datagen.DatasetError, match="line 3"):
        datagen.read_dataset(path)


def test_record_violations_detects_penetration(empty_run):
    rec = empty_run[0][0]
    mid = rec.trajectory[len(rec.trajectory) // 2]
    tip = end_effector(SPEC, mid)
    bad = replace(rec, scene=S.Scene(obstacles=(S.Obstacle(col.Disc(0.05), col.Pose2(*tip), 0),)))
    reasons = datagen.record_violations(bad, SPEC, 0.01, 0.01)
    assert any("clearance" in r for r in reasons)
    far = replace(rec, goal=rec.goal + 0.1)
    assert any("goal" in r for r in datagen.record_violations(far, SPEC, 0.01, 0.01))


def test_low_acceptance_aborts():
    # an unreachable tolerance rejects every problem, so the run must abort with its report
    params = replace(PARAMS, goal_tol=-1.0, abort_after=3, ocp_iters=5)
    with pytest.raises(datagen.GenerationAborted) as info:
        datagen.generate(EMPTY, SPEC, 3, 2, params, seed=1)
    rep = info.value.report
    assert rep.attempted == 3 and rep.accepted == 0
    assert rep.rejections == {"goal_tolerance": 3}


def test_params_dict_roundtrip():
    p = datagen.DatagenParams()
    assert datagen.DatagenParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p
    assert p.solver_weights().eps_safe == pytest.approx(p.eps_safe + p.solver_margin)
