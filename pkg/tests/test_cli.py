import json
import subprocess
import sys

import numpy as np
import pytest

from influence_consensus import datastore as ds
from influence_consensus.aggregation import merge_scores
from influence_consensus.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from influence_consensus.influence import build_all_task_scores
from influence_consensus.results import read_ids
from influence_consensus.selection import consensus_strength, vote_distribution_stats

WORLD = ["--pool-size", "240", "--val-per-task", "12", "--test-per-task", "40"]


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def build(root, seed=0, tasks=5, block_rows=4096):
    assert run("gen-synth", "--out", root / "world", "--seed", seed, "--tasks", tasks, *WORLD) == EXIT_OK
    assert run("warmup", "--manifest", root / "world/manifest.json", "--out", root / "model", "--seed", seed) == EXIT_OK
    assert (
        run("grads", "--manifest", root / "world/manifest.json", "--model", root / "model/model.json", "--out", root / "grads")
        == EXIT_OK
    )
    assert (
        run("project", "--manifest", root / "grads/manifest.json", "--proj-dim", 16, "--seed", 7,
            "--block-rows", block_rows, "--out", root / "proj")
        == EXIT_OK
    )
    assert run("influence", "--manifest", root / "proj/manifest.json", "--out", root / "scores") == EXIT_OK
    return root


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    return build(tmp_path_factory.mktemp("cli"))


def test_gen_synth_layout(store):
    m = json.loads((store / "world/manifest.json").read_text())
    assert len(m["train_shards"]) == 1 and len(m["tasks"]) == 5
    assert m["normalized"] is False and m["projection"] is None
    for ref in m["train_shards"]:
        assert ds.read_header(store / "world" / ref["path"])[2] == ref["count"]
    for ref in m["tasks"]:
        assert ds.read_header(store / "world" / ref["val_shard"])[2] == ref["count"]


def test_projected_manifest(store):
    m = ds.Manifest.load(store / "proj/manifest.json")
    assert m.normalized and m.feature_dim == 16
    assert m.projection == {"seed": 7, "in_dim": 210, "out_dim": 16, "family": "rademacher"}
    m.check_shards()


def test_influence_matches_library(store):
    table = ds.read_score_table(store / "scores/scores.bin")
    ref = build_all_task_scores(ds.Manifest.load(store / "proj/manifest.json"))
    assert table.scores.tobytes() == ref.scores.tobytes()
    assert table.task_names == [f"task{k}" for k in range(5)]


def test_every_stage_is_byte_idempotent(store, tmp_path):
    again = build(tmp_path, block_rows=7)
    assert files(again) == files(store)


def test_threads_env_does_not_change_outputs(store, tmp_path, monkeypatch):
    monkeypatch.setenv("ICONS_THREADS", "1")
    assert run("influence", "--manifest", store / "proj/manifest.json", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "scores.bin").read_bytes() == (store / "scores/scores.bin").read_bytes()


def test_select_multi_ratio_and_strategy(store, tmp_path):
    scores = store / "scores/scores.bin"
    args = ["select", "--scores", scores, "--out", tmp_path, "--ratio", 0.2, "--ratio", 1.0]
    assert run(*args, "--strategy", "vote", "--strategy", "merge", "--strategy", "random") == EXIT_OK
    table = ds.read_score_table(scores)
    vote = read_ids(tmp_path / "vote_p0.2.ids")
    assert vote.size == 48 and len(set(vote.tolist())) == 48
    report = json.loads((tmp_path / "vote_p0.2.json").read_text())
    assert report["M"] == 48 and report["strategy"] == "vote" and len(report["thresholds"]) == 5
    merge = read_ids(tmp_path / "merge_p0.2.ids")
    assert merge.tolist() == merge_scores(table).order[:48].tolist()
    exact, _ = consensus_strength(table)
    full = read_ids(tmp_path / "vote_p1.ids")
    assert full.tolist() == np.lexsort((np.arange(240), -exact)).tolist()
    assert json.loads((tmp_path / "random_p0.2.json").read_text())["seed"] == 0


def test_aggregate_writes_keys(store, tmp_path):
    assert run("aggregate", "--scores", store / "scores/scores.bin", "--ratio", 0.2, "--strategy", "merge", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "merge_p0.2.keys.json").read_text())
    table = ds.read_score_table(store / "scores/scores.bin")
    assert doc["order"] == merge_scores(table).order.tolist()
    np.testing.assert_allclose(doc["keys"], merge_scores(table).keys)
    assert not list(tmp_path.glob("*.ids"))


def test_stats(store, tmp_path, capsys):
    assert run("stats", "--scores", store / "scores/scores.bin", "--ratio", 0.2, "--ratio", 1.0, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "vote_stats.json").read_text())
    table = ds.read_score_table(store / "scores/scores.bin")
    assert doc == json.loads(json.dumps(vote_distribution_stats(table, [0.2, 1.0]).to_dict()))
    assert doc["rows"][1]["zero_vote_fraction"] == 0
    assert "Zero-Vote" in capsys.readouterr().out


def test_overlap_and_eval_full_pool(store, tmp_path, capsys):
    (tmp_path / "all.ids").write_text("".join(f"{i}\n" for i in range(240)))
    assert run("overlap", "--scores", store / "scores/scores.bin", "--ratio", 0.2, "--selection", tmp_path / "all.ids", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "overlap.json").read_text())["p0.2"]
    assert np.allclose(np.diag(doc["pairwise"]), 1.0)
    assert run("eval", "--manifest", store / "world/manifest.json", "--selection", tmp_path / "all.ids", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "eval.json").read_text())["mean_rel"] == 1.0
    assert "Rel. = 1.0000" in capsys.readouterr().out


def test_overlap_of_selection_with_itself(tmp_path):
    build(tmp_path, tasks=1)
    scores = tmp_path / "scores/scores.bin"
    assert run("select", "--scores", scores, "--ratio", 0.25, "--out", tmp_path / "sel") == 0
    assert run("overlap", "--scores", scores, "--ratio", 0.25, "--selection", tmp_path / "sel/vote_p0.25.ids", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "overlap.json").read_text())["p0.25"]
    assert doc["specialist_vs_generalist"] == {"task0": 1.0}


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_exit_codes(store, tmp_path, capsys):
    assert run("select", "--scores", tmp_path / "missing.bin", "--ratio", 0.2, "--out", tmp_path) == EXIT_IO
    assert _err(capsys)["error"] == "io"
    assert run("influence", "--manifest", store / "grads/manifest.json", "--out", tmp_path) == EXIT_VALIDATION
    assert _err(capsys)["type"] == "NormalizationError"
    assert run("project", "--manifest", store / "proj/manifest.json", "--block-rows", 0, "--out", tmp_path) == EXIT_CONFIG
    assert _err(capsys)["error"] == "config"
    bad = tmp_path / "bad.bin"
    raw = bytearray((store / "scores/scores.bin").read_bytes())
    raw[40] ^= 1
    bad.write_bytes(bytes(raw))
    (tmp_path / "bad.json").write_bytes((store / "scores/scores.json").read_bytes())
    assert run("select", "--scores", bad, "--ratio", 0.2, "--out", tmp_path) == EXIT_VALIDATION
    assert _err(capsys)["type"] == "ChecksumMismatchError"
    (tmp_path / "far.ids").write_text("99999\n")
    assert run("overlap", "--scores", store / "scores/scores.bin", "--ratio", 0.2, "--selection", tmp_path / "far.ids", "--out", tmp_path) == EXIT_VALIDATION
    assert run("eval", "--manifest", store / "proj/manifest.json", "--selection", tmp_path / "far.ids", "--out", tmp_path) == EXIT_VALIDATION


@pytest.mark.parametrize(
    "argv",
    [
        ["select", "--scores", "x", "--ratio", "1.5", "--out", "o"],
        ["select", "--scores", "x", "--ratio", "0.2", "--strategy", "borda", "--out", "o"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_with_config_code(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_CONFIG
    assert _err(capsys)["error"] == "config"


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "influence_consensus", "gen-synth", "--out", str(tmp_path), "--pool-size", "50"],
        capture_output=True,
        text=True,
    )
    assert out.returncode == 0
    assert (tmp_path / "manifest.json").exists()
    bad = subprocess.run([sys.executable, "-m", "influence_consensus", "stats", "--scores", str(tmp_path / "nope"),
                          "--ratio", "0.1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert bad.returncode == EXIT_IO and json.loads(bad.stderr.strip().splitlines()[-1])["error"] == "io"
