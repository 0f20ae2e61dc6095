import json
import subprocess
import sys

import numpy as np
import pytest

from memstream.cli import main
from memstream.kv_store import load_cache, read_cache_manifest
from memstream.manifest import SPILL_ENV
from memstream.tensorio import write_tensor


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, json.loads(out.out), out.err


def gen(capsys, out, frames=40, questions=3, seed=0):
    code, res, _ = run_cli(capsys, "gen", "--out", out, "--frames", frames, "--questions", questions,
                           "--layers", 2, "--heads", 2, "--head-dim", 8, "--grid", "3x3", "--seed", seed)
    assert code == 0
    return res["manifest"]


class TestMemsize:
    def test_upper_bound(self, capsys):
        code, res, _ = run_cli(capsys, "memsize", 28, 900, 256, 4, 128, 2)
        assert code == 0
        assert res["bytes"] == 13_212_057_600
        assert res["human"] == "13.2 GB"

    def test_invalid(self, capsys):
        code, res, _ = run_cli(capsys, "memsize", 0, 1, 1, 1, 1)
        assert code == 1 and res["error"] == "ValueError"


class TestPipeline:
    def test_full_run(self, capsys, tmp_path):
        manifest = gen(capsys, tmp_path / "bench")
        cache = tmp_path / "c.mskv"
        code, enc, _ = run_cli(capsys, "encode", "--manifest", manifest, "--cache", cache, "--window-tokens", 45)
        assert code == 0 and enc["frames"] == 40
        assert enc["compression_rate"] == pytest.approx(9.0)  # 3x3 grid keeps ceil(9/16) = 1
        assert (tmp_path / "c.mskv.trace.json").is_file()
        code, q, _ = run_cli(capsys, "query", "--manifest", manifest, "--cache", cache, "--budget", 8,
                             "--question", "q001", "--rankings", "--out", tmp_path / "q")
        assert code == 0
        [entry] = q["results"]
        assert entry["question_id"] == "q001" and entry["recall"] == [1.0, 1.0]
        assert len(entry["rankings"][0]) == 2
        assert (tmp_path / "q" / "answer_q001_layer001.mstn").is_file()
        code, ev, _ = run_cli(capsys, "eval", "--manifest", manifest, "--cache", cache, "--budget", 8,
                              "--out", tmp_path / "ev")
        assert code == 0
        assert ev["mean_recall"]["mean_over_layers_then_questions"] == 1.0
        assert any(name.startswith("entropy_histogram_") for name in ev["files"])

    def test_runs_are_byte_identical(self, capsys, tmp_path):
        digests = []
        for run in ("a", "b"):
            root = tmp_path / run
            manifest = gen(capsys, root / "bench", seed=4)
            cache = root / "c.mskv"
            run_cli(capsys, "encode", "--manifest", manifest, "--cache", cache, "--strategy", "kmeans:4")
            _, q, _ = run_cli(capsys, "query", "--manifest", manifest, "--cache", cache)
            _, ev, _ = run_cli(capsys, "eval", "--manifest", manifest, "--cache", cache, "--out", root / "ev")
            digests.append((cache.read_bytes(), (root / "c.mskv.trace.json").read_bytes(), q, ev["sha256"]))
        assert digests[0] == digests[1]

    def test_strategy_does_not_change_cache(self, capsys, tmp_path):
        manifest = gen(capsys, tmp_path / "bench")
        blobs = []
        for s in ("full", "aks", "pool:2", "tome:3"):
            cache = tmp_path / f"{s.replace(':', '_')}.mskv"
            assert run_cli(capsys, "encode", "--manifest", manifest, "--cache", cache, "--strategy", s)[0] == 0
            blobs.append(cache.read_bytes())
        assert all(b == blobs[0] for b in blobs)

    def test_env_spill_dir(self, capsys, tmp_path, monkeypatch):
        manifest = gen(capsys, tmp_path / "bench")
        cache = tmp_path / "c.mskv"
        run_cli(capsys, "encode", "--manifest", manifest, "--cache", cache)
        _, plain, _ = run_cli(capsys, "query", "--manifest", manifest, "--cache", cache)
        monkeypatch.setenv(SPILL_ENV, str(tmp_path / "spill"))
        _, spilled, _ = run_cli(capsys, "query", "--manifest", manifest, "--cache", cache)
        assert plain == spilled
        assert (tmp_path / "spill").is_dir()


class TestEdgeCases:
    def test_empty_stream(self, capsys, caplog, tmp_path):
        manifest = gen(capsys, tmp_path / "bench", frames=0, questions=0)
        cache = tmp_path / "c.mskv"
        code, res, _ = run_cli(capsys, "encode", "--manifest", manifest, "--cache", cache)
        assert code == 0 and res["frames"] == 0
        assert "no frames" in caplog.text
        assert read_cache_manifest(cache)["frame_count"] == 0
        assert load_cache(cache).rep_matrix(0)[0] == []

    def test_missing_manifest(self, capsys, tmp_path):
        code, res, _ = run_cli(capsys, "encode", "--manifest", tmp_path / "nope.json", "--cache", tmp_path / "c")
        assert code == 1 and res["error"] == "ManifestError"

    def test_bad_tensor_shape_rejected(self, capsys, tmp_path):
        write_tensor(tmp_path / "q.mstn", np.zeros((4, 6), dtype=np.float32))
        write_tensor(tmp_path / "k.mstn", np.zeros((4, 5), dtype=np.float32))
        ref = {"q": "q.mstn", "k": "k.mstn", "v": "q.mstn"}
        doc = {"model": {"layers": 1, "heads": 2, "head_dim": 3},
               "frames": [{"index": 0, "grid": [2, 2], "qkv": [ref]}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        code, res, _ = run_cli(capsys, "encode", "--manifest", tmp_path / "m.json", "--cache", tmp_path / "c")
        assert code == 1 and "layer 0" in res["message"]
        assert not (tmp_path / "c").exists()

    def test_unknown_question(self, capsys, tmp_path):
        manifest = gen(capsys, tmp_path / "bench")
        cache = tmp_path / "c.mskv"
        run_cli(capsys, "encode", "--manifest", manifest, "--cache", cache)
        code, res, _ = run_cli(capsys, "query", "--manifest", manifest, "--cache", cache, "--question", "zzz")
        assert code == 1 and "zzz" in res["message"]

    def test_unknown_config_key(self, capsys, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"budgett": 3}))
        manifest = gen(capsys, tmp_path / "bench")
        code, res, _ = run_cli(capsys, "encode", "--config", tmp_path / "cfg.json", "--manifest", manifest,
                               "--cache", tmp_path / "c")
        assert code == 1 and "budgett" in res["message"]

    def test_module_entry_point_exit_code(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "memstream", "memsize", "1", "1", "1", "1", "1"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and json.loads(proc.stdout)["bytes"] == 4
        proc = subprocess.run([sys.executable, "-m", "memstream", "memsize", "-1", "1", "1", "1", "1"],
                              capture_output=True, text=True)
        assert proc.returncode == 1 and "error" in json.loads(proc.stdout)

    def test_warning_goes_to_stderr(self, capsys, tmp_path):
        manifest = gen(capsys, tmp_path / "bench", frames=0, questions=0)
        proc = subprocess.run([sys.executable, "-m", "memstream", "encode", "--manifest", manifest,
                               "--cache", str(tmp_path / "c.mskv")], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "no frames" in proc.stderr and "no frames" not in proc.stdout
        assert json.loads(proc.stdout)["frames"] == 0
