import json
import shutil
import subprocess
import sys

import pytest

from graspvoc.cli import main
from graspvoc.providers import LLM, FixtureTransport, build_conditioning_prompt
from graspvoc.scoring import GraspArchive, load_archive
from graspvoc.viewrender import read_pgm

from conftest import oracle_scores, oracle_winner


@pytest.fixture
def work(tmp_path, data_dir, monkeypatch):
    """A scratch copy of the bundled data set as the working directory."""
    dst = tmp_path / "data"
    shutil.copytree(data_dir, dst)
    monkeypatch.chdir(dst)
    return dst


def load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def test_segment_matches_golden(work, golden_dir):
    rc = main(["segment", "knife.ply", "--label", "knife", "--providers", "providers.json",
               "--out", "out/vocab.json", "--debug-render", "out/render.pgm", "--debug-masks", "out/masks.json"])
    assert rc == 0
    assert (work / "out/vocab.json").read_text() == (golden_dir / "run/00_knife/vocabulary.json").read_text()
    assert read_pgm(work / "out/render.pgm").shape == (512, 512)
    assert len(load(work / "out/masks.json")["masks"]) == 5


def test_segment_missing_cloud_is_io_error(work, capsys):
    rc = main(["segment", "nope.ply", "--label", "knife", "--providers", "providers.json", "--out", "v.json"])
    assert rc == 1
    assert "nope.ply" in capsys.readouterr().err
    assert not (work / "v.json").exists()


def test_segment_unrecorded_object_is_provider_error(work):
    rc = main(["segment", "knife.ply", "--label", "spoon", "--providers", "providers.json", "--out", "v.json"])
    assert rc == 2


def test_condition_knife_cut(work, golden_dir):
    rc = main(["condition", str(golden_dir / "run/00_knife/vocabulary.json"), "--task", "cut",
               "--providers", "providers.json", "--out", "cond.json"])
    assert rc == 0
    assert load(work / "cond.json") == {"task": "cut", "grasp_label": "handle", "task_label": "blade"}


def write_vocab(path, labels_to_idx, n, cloud_file="knife.ply"):
    parts = [{"label": lab, "point_indices": idx} for lab, idx in sorted(labels_to_idx.items())]
    path.write_text(json.dumps({"object_label": "knife", "cloud_file": cloud_file, "n_points": n, "subparts": parts}))


def test_condition_shell_hostile_task_round_trips(work):
    task = "cut the 'bread' & \"cheese\"; $(rm -rf /) `ls` | tee > out \\ ñ"
    labels = ["blade", "handle"]
    req = {"task": task, "labels": labels, "prompt": build_conditioning_prompt(task, labels)}
    FixtureTransport(work / "fixtures").record(LLM, req, '{"grasp_label": "handle", "task_label": "blade"}')
    write_vocab(work / "v.json", {"blade": [0], "handle": [1]}, 2)
    # through a real process boundary, no shell involved
    subprocess.run([sys.executable, "-m", "graspvoc.cli", "condition", "v.json", "--task", task,
                    "--providers", "providers.json", "--out", "c.json"], check=True, cwd=work)
    assert load(work / "c.json")["task"] == task


def test_condition_single_subpart_is_forced(work):
    write_vocab(work / "v.json", {"knife": list(range(2200))}, 2200)
    assert main(["condition", "v.json", "--task", "anything", "--providers", "providers.json", "--out", "c.json"]) == 0
    assert load(work / "c.json") == {"task": "anything", "grasp_label": "knife", "task_label": "knife"}


def test_condition_unrecorded_task_exits_2(work, golden_dir):
    vocab = str(golden_dir / "run/00_knife/vocabulary.json")
    assert main(["condition", vocab, "--task", "juggle", "--providers", "providers.json", "--out", "c.json"]) == 2


def test_condition_bad_label_fixture_exits_3(work):
    labels = ["blade", "handle"]
    req = {"task": "stab", "labels": labels, "prompt": build_conditioning_prompt("stab", labels)}
    FixtureTransport(work / "fixtures").record(LLM, req, '{"grasp_label": "hilt", "task_label": "blade"}')
    write_vocab(work / "v.json", {"blade": [0], "handle": [1]}, 2)
    assert main(["condition", "v.json", "--task", "stab", "--providers", "providers.json", "--out", "c.json"]) == 3


def rank_args(golden_dir, task="cut", *extra):
    base = golden_dir / "run/00_knife"
    return ["rank", "knife_archive.json", "--vocab", str(base / "vocabulary.json"),
            "--condition", str(base / task / "condition.json"), "--cloud", "knife.ply", *extra]


def test_rank_matches_oracle(work, golden_dir):
    assert main(rank_args(golden_dir, "cut", "--out", "r.json")) == 0
    out = load(work / "r.json")
    from graspvoc.cli import load_vocabulary
    from graspvoc.scoring import TaskCondition

    vocab = load_vocabulary(golden_dir / "run/00_knife/vocabulary.json", work / "knife.ply")
    cond = TaskCondition.from_dict(out["condition"])
    archive = load_archive(work / "knife_archive.json")
    expect = oracle_scores(archive, cond, vocab)
    assert out["optimal"]["id"] == oracle_winner(expect, archive) == out["ranked"][0]["id"]
    assert out["params"] == {"k_force": 10.0, "k_dist": 1.0}
    for row in out["ranked"]:
        assert row["score"] == expect[row["id"]][0]
    golden = load(golden_dir / "run/00_knife/cut/ranked.json")
    golden.pop("controls")
    assert out == golden


def test_rank_all_zero_exits_4_then_fallback(work, golden_dir):
    archive = load_archive(work / "knife_archive.json")
    from graspvoc.cli import load_vocabulary
    from graspvoc.scoring import score_archive, TaskCondition, write_archive

    vocab = load_vocabulary(golden_dir / "run/00_knife/vocabulary.json", work / "knife.ply")
    cond = TaskCondition.from_dict(load(golden_dir / "run/00_knife/cut/condition.json"))
    off = [sg.grasp for sg in score_archive(archive, cond, vocab) if sg.score == 0.0]
    write_archive(work / "off.json", GraspArchive("knife", tuple(off)))
    args = rank_args(golden_dir)
    args[1] = "off.json"
    assert main(args + ["--out", "r.json"]) == 4
    assert not (work / "r.json").exists()
    assert main(args + ["--fallback-max-force", "--out", "r.json"]) == 0
    out = load(work / "r.json")
    assert out["fallback"] is True
    assert out["optimal"]["force"] == max(g.force for g in off)


def test_rank_controls_seeded(work, golden_dir):
    for name in ("a.json", "b.json"):
        assert main(rank_args(golden_dir, "cut", "--controls", "3", "--seed", "7", "--out", name)) == 0
    a, b = load(work / "a.json"), load(work / "b.json")
    assert a == b
    ids = a["controls"]["ids"]
    assert len(set(ids)) == 3 and a["controls"]["seed"] == 7
    scores = {r["id"]: r["score"] for r in a["ranked"]}
    assert all(scores[i] == 0.0 for i in ids)


def test_rank_missing_archive_exits_1(work, golden_dir):
    args = rank_args(golden_dir)
    args[1] = "missing.json"
    assert main(args + ["--out", "r.json"]) == 1


def test_rank_bad_json_exits_3(work, golden_dir):
    (work / "bad.json").write_text('{"object_label": "knife", "grasps": [{"id": "x"}]}')
    args = rank_args(golden_dir)
    args[1] = "bad.json"
    assert main(args + ["--out", "r.json"]) == 3


def hand_case(work):
    write_vocab(work / "hv.json", {"a": [0, 2], "b": [1, 3]}, 4, "none.ply")
    (work / "hc.json").write_text(json.dumps({"task": "t", "grasp_label": "a", "task_label": "b"}))
    (work / "hg.json").write_text(json.dumps({"object_label": "knife", "task": "t", "n_points": 4, "selections": [[0, 1], [0]]}))
    return ["--pair", "hv.json", "hc.json", "hg.json"]


def test_eval_hand_case_and_perfect_pair(work, capsys):
    write_vocab(work / "pv.json", {"a": [0, 1], "b": [2, 3]}, 4, "none.ply")
    args = ["eval", *hand_case(work), "--pair", "pv.json", "hc.json", "hg.json", "--out-json", "m.json"]
    assert main(args) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "object_label,task,weighted_iou,precision,recall"
    assert rows[1].split(",")[2] == "0.5"
    assert [float(x) for x in rows[2].split(",")[2:]] == [1.0, 1.0, 1.0]
    rep = load(work / "m.json")
    assert rep["pairs"][0]["precision"] == pytest.approx(0.6667, abs=1e-4)


def test_eval_repeat_equals_single(work):
    assert main(["eval", *hand_case(work), "--out-csv", "one.csv"]) == 0
    assert main(["eval", *hand_case(work), "--repeat", "10", "--out-csv", "ten.csv"]) == 0
    assert (work / "one.csv").read_text() == (work / "ten.csv").read_text()


def test_eval_point_count_mismatch_exits_3(work):
    pair = hand_case(work)
    (work / "hg.json").write_text(json.dumps({"n_points": 5, "selections": [[0]]}))
    assert main(["eval", *pair]) == 3


def run_pipeline(work, name, *extra):
    return main(["pipeline", "manifest.json", "--out-root", str(work / "runs"), "--run-name", name, *extra])


def test_pipeline_two_entries_and_golden(work, golden_dir, capsys):
    assert run_pipeline(work, "a") == 0
    summary = capsys.readouterr().out.splitlines()
    assert len(summary) == 5 and all("\tok\t" in line for line in summary[1:])
    run = work / "runs/a"
    assert sorted(p.name for p in run.iterdir() if p.is_dir()) == ["00_knife", "01_mug"]
    for f in sorted((golden_dir / "run").rglob("*.json")):
        rel = f.relative_to(golden_dir / "run")
        assert (run / rel).read_bytes() == f.read_bytes(), rel
    cfg = load(run / "config.json")
    assert cfg["seed"] == 7 and cfg["score"] == {"k_force": 10.0, "k_dist": 1.0}


def test_pipeline_flags_override_manifest(work):
    assert run_pipeline(work, "b", "--k-force", "2", "--seed", "3", "--controls", "0") == 0
    cfg = load(work / "runs/b/config.json")
    assert cfg["score"]["k_force"] == 2.0 and cfg["seed"] == 3 and cfg["controls"] == 0
    assert "controls" not in load(work / "runs/b/00_knife/cut/ranked.json")


def test_pipeline_partial_failure(work):
    m = load(work / "manifest.json")
    m["entries"][0]["archive_file"] = "missing.json"
    (work / "manifest.json").write_text(json.dumps(m))
    assert run_pipeline(work, "c") == 1
    assert load(work / "runs/c/00_knife/error.json")["exit_code"] == 1
    assert (work / "runs/c/01_mug/fill/ranked.json").is_file()


def test_pipeline_requires_seed(work):
    m = load(work / "manifest.json")
    del m["seed"]
    (work / "manifest.json").write_text(json.dumps(m))
    assert run_pipeline(work, "d") == 3


def test_pipeline_parallel_matches_serial(work):
    assert run_pipeline(work, "s") == 0
    assert run_pipeline(work, "p", "--jobs", "2") == 0
    serial = {p.relative_to(work / "runs/s"): p.read_bytes() for p in (work / "runs/s").rglob("*.json") if p.name not in ("run.json", "config.json")}
    for rel, data in serial.items():
        assert (work / "runs/p" / rel).read_bytes() == data


def test_inputs_not_mutated(work, data_dir):
    before = {p.name: p.read_bytes() for p in work.glob("*.json")}
    assert run_pipeline(work, "e") == 0
    assert {p.name: p.read_bytes() for p in work.glob("*.json")} == before
