import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lrcp import cli
from lrcp.synth import gen_background_outliers, gen_low_rank_noise
from lrcp.tensor_io import load_matrix, save_matrix


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tokens(tmp_path):
    x = gen_low_rank_noise(576, 128, 4, [8.0, 6.0, 4.0, 3.0], sigma=0.01, seed=0).matrix
    return save_matrix(x, tmp_path / "tokens.npy")


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestCompress:
    def test_budget_64(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("compress", tokens, "--rank", 4, "--budget", 64, "--out", out) == 0
        assert load_matrix(out / "compressed.npy").shape == (64, 128)
        report = json.loads((out / "report.json").read_text())
        assert len(report["result"]["retained_indices"]) == 64
        assert report["config"]["rank"] == 4 and report["config"]["budget"] == 64
        rows = read_rows(out / "tokens.csv")
        assert rows[0] == ["index", "retained", "score", "assigned_to"]
        assert len(rows) == 577 and sum(int(r[1]) for r in rows[1:]) == 64

    def test_budget_n_is_identity(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("compress", tokens, "--budget", 576, "--out", out) == 0
        assert np.array_equal(load_matrix(out / "compressed.npy"), load_matrix(tokens))

    def test_rank_too_large(self, tokens, tmp_path, capsys):
        assert run("compress", tokens, "--rank", 128, "--budget", 64, "--out", tmp_path / "o") == 1
        assert "InvalidRank" in capsys.readouterr().err

    def test_qwen_preset_rank(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("compress", tokens, "--preset", "qwen", "--budget", 32, "--out", out) == 0
        assert json.loads((out / "report.json").read_text())["compression"]["rank"] == 8

    def test_no_merge_keeps_rows(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("compress", tokens, "--budget", 10, "--no-merge", "--out", out) == 0
        idx = json.loads((out / "report.json").read_text())["result"]["retained_indices"]
        assert np.array_equal(load_matrix(out / "compressed.npy"), load_matrix(tokens)[idx])

    def test_staged(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("compress", tokens, "--stage-ratios", "1/6,1/3", "--out", out) == 0
        assert load_matrix(out / "compressed_stage1.npy").shape == (96, 128)
        assert load_matrix(out / "compressed_stage2.npy").shape == (32, 128)
        report = json.loads((out / "report.json").read_text())
        assert [s["absolute_keep"] for s in report["plan"]["stages"]] == [96, 32]

    def test_stack_needs_layer(self, tmp_path, rng):
        path = save_matrix(rng.standard_normal((2, 20, 6)), tmp_path / "s.npy")
        assert run("compress", path, "--budget", 5, "--out", tmp_path / "o") == 1
        assert run("compress", path, "--budget", 5, "--layer", 1, "--out", tmp_path / "o") == 0

    def test_float32_output(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("compress", tokens, "--budget", 8, "--dtype", "float32", "--out", out) == 0
        assert load_matrix(out / "compressed.npy").dtype == np.float32

    def test_non_finite_input(self, tmp_path, capsys):
        x = np.ones((10, 4))
        x[2, 1] = np.nan
        np.save(tmp_path / "bad.npy", x)
        assert run("compress", tmp_path / "bad.npy", "--budget", 3, "--out", tmp_path / "o") == 1
        assert "row 2, column 1" in capsys.readouterr().err


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["frobnicate"],
            ["compress", "x.npy", "--out", "o", "--bogus"],
            ["spectrum", "x.npy"],
            ["plan", "--out", "p.json"],
            ["synth", "--out", "o", "--n", "abc"],
        ],
    )
    def test_exit_one(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        with pytest.raises(SystemExit) as exc:
            code = run(*argv)
            raise SystemExit(code)
        assert exc.value.code == 1

    def test_missing_input(self, tmp_path, capsys):
        assert run("compress", tmp_path / "missing.npy", "--out", tmp_path / "o") == 1
        assert "IoFailure" in capsys.readouterr().err

    def test_thread_env(self, tokens, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "1")
        assert run("compress", tokens, "--budget", 8, "--out", tmp_path / "o") == 0
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        assert run("compress", tokens, "--budget", 8, "--out", tmp_path / "o") == 1

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "lrcp", "plan", "--preset", "llava-v1.5/avg64", "--out", str(tmp_path / "p.json")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0 and "576 -> 96 -> 32" in proc.stdout


class TestSpectrum:
    def test_noiseless_rank_three(self, tmp_path):
        path = save_matrix(gen_low_rank_noise(200, 32, 3, [3.0, 2.0, 1.0], seed=0).matrix, tmp_path / "x.npy")
        out = tmp_path / "out"
        assert run("spectrum", path, "--out", out) == 0
        layer = json.loads((out / "spectrum.json").read_text())["layers"][0]
        assert layer["rank_at"]["90"] <= 3 and layer["rank_at"]["95"] <= 3
        assert read_rows(out / "rank_at.csv")[0] == ["layer", "name", "variance", "rank"]

    def test_directory_order_and_stack(self, tmp_path, rng):
        d = tmp_path / "layers"
        d.mkdir()
        for name, r in [("layer10.npy", 1), ("layer02.npy", 2), ("layer01.npy", 3)]:
            save_matrix(gen_low_rank_noise(40, 12, r, [float(r - j) for j in range(r)], seed=r).matrix, d / name)
        out = tmp_path / "out"
        assert run("spectrum", d, "--variance", "100", "--out", out) == 0
        layers = json.loads((out / "spectrum.json").read_text())["layers"]
        assert [l["name"] for l in layers] == ["layer01.npy", "layer02.npy", "layer10.npy"]
        assert [l["rank_at"]["100"] for l in layers] == [3, 2, 1]
        stack = save_matrix(rng.standard_normal((3, 10, 4)), tmp_path / "stack.npy")
        assert run("spectrum", stack, "--out", tmp_path / "o2") == 0
        names = [l["name"] for l in json.loads((tmp_path / "o2" / "spectrum.json").read_text())["layers"]]
        assert names == ["stack.npy[0]", "stack.npy[1]", "stack.npy[2]"]

    def test_threaded_matches_serial(self, tmp_path, monkeypatch, rng):
        d = tmp_path / "layers"
        d.mkdir()
        for i in range(4):
            save_matrix(rng.standard_normal((30, 8)), d / f"l{i}.npy")
        assert run("spectrum", d, "--out", tmp_path / "a") == 0
        monkeypatch.setenv(cli.THREADS_ENV, "4")
        assert run("spectrum", d, "--out", tmp_path / "a4") == 0
        a = json.loads((tmp_path / "a" / "spectrum.json").read_text())["layers"]
        b = json.loads((tmp_path / "a4" / "spectrum.json").read_text())["layers"]
        assert a == b


class TestStability:
    def test_drop_zero(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("stability", tokens, "--drop", "0", "--trials", 3, "--out", out) == 0
        exp = json.loads((out / "stability.json").read_text())["experiments"][0]
        assert exp["mean_similarity"] == pytest.approx(1.0, abs=1e-10)

    def test_pruned_mode(self, tokens, tmp_path):
        out = tmp_path / "out"
        assert run("stability", tokens, "--mode", "pruned", "--keeps", "288,115", "--out", out) == 0
        exp = json.loads((out / "stability.json").read_text())["experiments"][0]
        assert exp["keeps"] == [288, 115] and exp["min_similarity"] >= 0.9
        assert len(read_rows(out / "stability.csv")) == 3

    def test_too_few_survivors(self, tmp_path, rng):
        path = save_matrix(rng.standard_normal((10, 6)), tmp_path / "x.npy")
        assert run("stability", path, "--drop", "0.8", "--out", tmp_path / "o") == 1


class TestSynthOracle:
    def test_synth_then_oracle(self, tmp_path):
        out = tmp_path / "syn"
        assert run("synth", "--kind", "outliers", "--n", 8, "--outliers", 2, "--d", 5, "--rank", 1, "--out", out) == 0
        inst = json.loads((out / "instance.json").read_text())["instance"]
        assert inst["shape"] == [10, 5] and len(inst["outlier_indices"]) == 2
        assert run("oracle", out / "tokens.npy", "--rank", 1, "--budget", 2, "--out", tmp_path / "or") == 0
        report = json.loads((tmp_path / "or" / "oracle.json").read_text())
        assert report["match"] and sorted(report["oracle_indices"]) == inst["outlier_indices"]

    def test_relative_noise(self, tmp_path):
        out = tmp_path / "syn"
        assert run("synth", "--n", 50, "--d", 10, "--rank", 2, "--relative-noise", 0.05, "--out", out) == 0
        assert json.loads((out / "instance.json").read_text())["instance"]["noise_sigma"] > 0

    def test_oracle_mismatch_exit_two(self, tmp_path, monkeypatch, capsys, rng):
        path = save_matrix(rng.standard_normal((8, 4)), tmp_path / "x.npy")
        monkeypatch.setattr(cli, "brute_force_best_subset", lambda x, s, k: ((0,), -1.0))
        assert run("oracle", path, "--rank", 1, "--budget", 3) == 2
        assert "MISMATCH" in capsys.readouterr().err

    def test_oracle_too_many_subsets(self, tmp_path, rng):
        path = save_matrix(rng.standard_normal((40, 4)), tmp_path / "x.npy")
        assert run("oracle", path, "--rank", 1, "--budget", 20) == 1


class TestBenchPlan:
    def test_bench_outputs(self, tmp_path, capsys):
        out = tmp_path / "b"
        assert run("bench", "--sizes", "128,256", "--dim", 64, "--repeat", 1, "--budget", 16, "--out", out) == 0
        rows = read_rows(out / "bench.csv")
        assert rows[0] == ["n", "d", "r", "k", "seconds"] and [r[0] for r in rows[1:]] == ["128", "256"]
        assert "slope" in capsys.readouterr().out

    def test_bench_budget_check(self, tmp_path):
        assert run("bench", "--sizes", "16", "--budget", 64, "--out", tmp_path / "b") == 1

    def test_plan_custom(self, tmp_path):
        path = tmp_path / "p.json"
        assert run("plan", "--tokens", 2880, "--ratios", "1/12,1/3", "--out", path) == 0
        plan = json.loads(path.read_text())["plan"]
        assert plan["final_keep"] == 80 and round(plan["average_retention"] * 100, 1) == 5.6



DETERMINISM_CASES = {
    "compress": ["compress", "{x}", "--budget", "32", "--out", "{o}"],
    "compress-staged": ["compress", "{x}", "--stage-ratios", "1/2,1/3", "--out", "{o}"],
    "spectrum": ["spectrum", "{x}", "--out", "{o}"],
    "stability": ["stability", "{x}", "--trials", "3", "--out", "{o}"],
    "stability-pruned": ["stability", "{x}", "--mode", "pruned", "--drop", "0.5,0.8", "--out", "{o}"],
    "synth": ["synth", "--n", "40", "--d", "8", "--sigma", "0.1", "--seed", "3", "--out", "{o}"],
    "oracle": ["oracle", "{small}", "--rank", "1", "--budget", "3", "--out", "{o}"],
    "bench": ["bench", "--sizes", "64,128", "--dim", "32", "--budget", "8", "--repeat", "1", "--out", "{o}"],
    "plan": ["plan", "--preset", "qwen2.5-vl/avg10", "--out", "{o}/plan.json"],
}


@pytest.mark.parametrize("name", sorted(DETERMINISM_CASES))
def test_rerun_is_byte_identical(name, tmp_path, tokens, rng):
    small = save_matrix(rng.standard_normal((9, 4)), tmp_path / "small.npy")
    out = tmp_path / "run"
    argv = [a.format(x=tokens, small=small, o=out) for a in DETERMINISM_CASES[name]]
    out.mkdir()
    assert cli.main(argv) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "bench.csv"}
    for p in out.iterdir():
        p.unlink()
    assert cli.main(argv) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "bench.csv"}
    assert first and first == second
