import io
import json

import numpy as np
import pytest

from otfs.cli import main
from otfs.config import DEFAULTS
from otfs.experiments import ablation_grid
from otfs.episodes import LabeledEmbeddingSet
from otfs.formats import decode_encoder, read_embeddings, write_embeddings

SMALL_SYNTH = ["--classes", "6", "--dim", "8", "--samples", "40", "--separation", "4"]
SMALL_TRAIN = ["--epochs", "2", "--batch", "16", "--capacity", "64", "--partitions", "6", "--epoch-thr", "0", "--out-dim", "8"]


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(argv, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def records(text):
    return [json.loads(line) for line in text.splitlines()]


@pytest.fixture
def synth_file(tmp_path):
    path = tmp_path / "synth.emb"
    code, _, _ = run(["gen-synth", "--out", str(path), "--seed", "3", *SMALL_SYNTH])
    assert code == 0
    return path


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv("OTFS_SEED", raising=False)


def test_help_exits_zero():
    code, out, _ = run(["--help"])
    assert code == 0 and "usage" in out
    for sub in ("sinkhorn", "eval", "ablate"):
        assert run([sub, "--help"])[0] == 0


def test_usage_errors_exit_two():
    code, out, err = run(["eval", "--data", "x", "--bogus", "1"])
    assert code == 2 and out == "" and "usage" in err
    assert run(["frobnicate"])[0] == 2
    assert run([])[0] == 2
    # required file argument missing
    assert run(["eval"])[0] == 2


def test_bad_config_values_exit_two(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 1\n")
    code, _, err = run(["eval", "--data", "x", "--config", str(cfg)])
    assert code == 2 and "unknown config key" in err
    assert run(["eval", "--data", "x", "--shots", "two"])[0] == 2
    assert run(["ablate", "--axis", "depth"])[0] == 2
    assert run(["ablate", "--axis", "k", "--values", "a,b"])[0] == 2


def test_gen_synth_writes_file(synth_file):
    data = read_embeddings(synth_file)
    assert data.embeddings.shape == (240, 8)
    assert np.bincount(data.labels).tolist() == [40] * 6


def test_eval_byte_identical(synth_file):
    argv = ["eval", "--data", str(synth_file), "--seed", "7", "--episodes", "5"]
    first, second = run(argv), run(argv)
    assert first[0] == 0 and first[1] == second[1]
    rec = records(first[1])[0]
    assert len(rec["per_episode_accuracies"]) == 5
    assert rec["seed"] == 7 and len(rec["config_hash"]) == 16


def test_seed_from_environment(synth_file, monkeypatch):
    monkeypatch.setenv("OTFS_SEED", "9")
    _, out, _ = run(["eval", "--data", str(synth_file), "--episodes", "2"])
    assert records(out)[0]["seed"] == 9
    _, out, _ = run(["eval", "--data", str(synth_file), "--episodes", "2", "--seed", "4"])
    assert records(out)[0]["seed"] == 4


def test_config_file_and_flag_precedence(synth_file, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("episodes = 3\nseed = 5\n")
    _, out, _ = run(["eval", "--data", str(synth_file), "--config", str(cfg)])
    rec = records(out)[0]
    assert len(rec["per_episode_accuracies"]) == 3 and rec["seed"] == 5
    _, out, _ = run(["eval", "--data", str(synth_file), "--config", str(cfg), "--episodes", "4"])
    assert len(records(out)[0]["per_episode_accuracies"]) == 4


def test_sinkhorn_command(tmp_path):
    cost = tmp_path / "cost.json"
    cost.write_text("[[0, 1], [1, 0]]")
    code, out, _ = run(["sinkhorn", "--cost", str(cost), "--epsilon", "0.01"])
    assert code == 0
    rec = records(out)[0]
    assert rec["converged"] and rec["transport_cost"] < 0.01
    np.testing.assert_allclose(np.sum(rec["plan"], axis=1), 0.5, atol=1e-6)
    assert set(rec) >= {"config_hash", "seed"}


def test_runtime_failure_exit_one(tmp_path):
    cost = tmp_path / "cost.json"
    cost.write_text(json.dumps(np.random.default_rng(0).random((20, 20)).tolist()))
    code, out, err = run(["sinkhorn", "--cost", str(cost), "--epsilon", "0.001", "--max-iter", "2", "--tol", "1e-12"])
    assert code == 1 and out == ""
    rec = json.loads(err.strip())
    assert rec["error"] == "ConvergenceError" and "config_hash" in rec
    code, _, err = run(["eval", "--data", str(tmp_path / "missing.emb")])
    assert code == 1 and json.loads(err.strip())["error"] == "FileNotFoundError"


def test_memory_sim_records(synth_file):
    code, out, _ = run(["memory-sim", "--labels", str(synth_file), "--batches", "6", "--batch", "8", "--capacity", "32", "--partitions", "4", "--k", "1"])
    assert code == 0
    recs = records(out)
    assert [r["step"] for r in recs] == list(range(6))
    assert recs[0]["dbi"] is None and recs[-1]["dbi"] is not None
    assert all(r["seed"] == DEFAULTS["seed"] for r in recs)


def test_align_command(tmp_path, synth_file):
    data = read_embeddings(synth_file)
    first = [int(np.flatnonzero(data.labels == c)[0]) for c in range(6)]
    write_embeddings(LabeledEmbeddingSet(data.embeddings[first], data.labels[first]), tmp_path / "s.emb")
    write_embeddings(LabeledEmbeddingSet(data.embeddings[1::4], None), tmp_path / "q.emb")
    code, out, _ = run(["align", "--support", str(tmp_path / "s.emb"), "--query", str(tmp_path / "q.emb")])
    assert code == 0
    rec = records(out)[0]
    assert rec["classes"] == list(range(6)) and len(rec["predictions"]) == 60
    assert np.asarray(rec["prototypes"]).shape == (6, 8)


def test_pretrain_then_eval_with_encoder(synth_file, tmp_path):
    enc = tmp_path / "student.enc"
    code, out, _ = run(["pretrain", "--data", str(synth_file), "--out", str(enc), *SMALL_TRAIN])
    assert code == 0
    recs = records(out)
    assert [r["epoch"] for r in recs] == [0, 1]
    assert len({r["config_hash"] for r in recs}) == 1
    w, b = decode_encoder(enc.read_bytes())
    assert w.shape == (8, 8) and b.shape == (8,)
    code, out, _ = run(["eval", "--data", str(synth_file), "--encoder", str(enc), "--episodes", "3"])
    assert code == 0 and len(records(out)[0]["per_episode_accuracies"]) == 3


def test_ablate_variant_emits_three_records():
    code, out, _ = run(["ablate", "--axis", "variant", "--episodes", "3", *SMALL_SYNTH, *SMALL_TRAIN])
    assert code == 0
    recs = records(out)
    assert [r["value"] for r in recs] == ["fifo", "kmeans", "full"]
    assert all(r["status"] == "ok" and 0 <= r["mean_accuracy"] <= 1 for r in recs)


def test_ablate_default_grids():
    assert ablation_grid("k") == (1, 3, 5, 10)
    assert ablation_grid("M") == (2048, 4096, 8192, 12288)
    assert ablation_grid("mask_ratio") == (0.1, 0.3, 0.5, 0.7)
    assert ablation_grid("lambda") == (0.0, 0.1, 0.3, 0.5)
    assert ablation_grid("P") == (100, 200, 300, 500)


def test_ablate_k_runs_default_cells():
    code, out, _ = run(["ablate", "--axis", "k", "--episodes", "2", *SMALL_SYNTH, *SMALL_TRAIN])
    assert code == 0
    assert [r["value"] for r in records(out)] == [1, 3, 5, 10]


def test_ablate_cell_failure_is_recorded():
    # 100 partitions cannot fit a 64-slot memory: that cell fails, the others still run
    code, out, _ = run(["ablate", "--axis", "P", "--values", "4,100", "--episodes", "2", *SMALL_SYNTH, *SMALL_TRAIN])
    assert code == 1
    recs = records(out)
    assert [r["status"] for r in recs] == ["ok", "error"]
    assert recs[1]["error"] == "ValueError"
