import json
import subprocess
import sys

import numpy as np
import pytest

from slideagg.cli import main
from slideagg.dataset import load_manifest
from slideagg.io import load_packed_bits, load_patch_matrix


def run(argv):
    """Exit code of ``slideagg argv``; argparse usage errors surface as SystemExit."""
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run(["synth", "--classes", 4, "--slides-per-class", 8, "--dim", 8, "--patches-min", 4,
                "--patches-max", 8, "--seed", 1, "--out", out]) == 0
    return out / "manifest.json"


class TestSynth:
    def test_count(self, tmp_path):
        assert run(["synth", "--classes", 4, "--slides-per-class", 25, "--dim", 64, "--seed", 1,
                    "--out", tmp_path / "data"]) == 0
        assert len(load_manifest(tmp_path / "data" / "manifest.json").slides) == 100

    def test_rerun_identical(self, tmp_path):
        for name in ("a", "b"):
            run(["synth", "--slides-per-class", 3, "--dim", 4, "--seed", 2, "--out", tmp_path / name])
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_missing_out(self, capsys):
        assert run(["synth"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SLIDEAGG_SEED", "5")
        run(["synth", "--slides-per-class", 2, "--dim", 3, "--out", tmp_path / "env"])
        run(["synth", "--slides-per-class", 2, "--dim", 3, "--seed", 5, "--out", tmp_path / "flag"])
        a = load_patch_matrix(tmp_path / "env" / "slides" / "slide-0.sagg")
        b = load_patch_matrix(tmp_path / "flag" / "slides" / "slide-0.sagg")
        assert np.array_equal(a, b)


class TestEvaluate:
    def test_mean_reports(self, dataset, tmp_path, capsys):
        assert run(["evaluate", "--manifest", dataset, "--method", "mean", "--out", tmp_path]) == 0
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["method"] == "mean" and doc["mean"]["accuracy"] >= 0.9
        text = (tmp_path / "report.txt").read_text()
        row = [line for line in text.splitlines() if line.startswith("mean ")][0].split()
        assert len(row) == 4 and all(0 <= float(v) <= 1 for v in row[1:])
        assert "Macro F1" in capsys.readouterr().out

    def test_unknown_method(self, dataset, capsys):
        assert run(["evaluate", "--manifest", dataset, "--method", "nope"]) == 2
        err = capsys.readouterr().err
        assert "deep_fv_binary" in err and "yottixel" in err

    def test_missing_manifest_flag(self, capsys):
        assert run(["evaluate", "--method", "mean"]) == 2

    def test_missing_manifest_file(self, tmp_path):
        assert run(["evaluate", "--manifest", tmp_path / "none.json", "--method", "mean"]) == 1

    def test_config_file(self, dataset, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text(f"[run]\nmanifest = {dataset}\nmethod = gmm_fv\nK = 2\nseed = 3\nout = {tmp_path / 'r'}\n")
        assert run(["evaluate", "--config", cfg]) == 0
        assert json.loads((tmp_path / "r" / "report.json").read_text())["method"] == "gmm_fv"

    def test_flags_override_config(self, dataset, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text(f"[run]\nmanifest = {dataset}\nmethod = gmm_fv\n")
        assert run(["evaluate", "--config", cfg, "--method", "max", "--out", tmp_path / "r"]) == 0
        assert json.loads((tmp_path / "r" / "report.json").read_text())["method"] == "max"

    def test_bad_config_key(self, dataset, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[run]\nbogus = 1\n")
        assert run(["evaluate", "--config", cfg]) == 2

    def test_deterministic(self, dataset, tmp_path):
        for name in ("a", "b"):
            assert run(["evaluate", "--manifest", dataset, "--method", "deep_fv_binary", "--M", 40, "--epochs", 2,
                        "--seed", 4, "--out", tmp_path / name]) == 0
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        timings = json.loads((tmp_path / "a" / "timings.json").read_text())
        assert [t["fold"] for t in timings] == list(range(5))


class TestEncode:
    def test_binary(self, dataset, tmp_path):
        assert run(["encode", "--manifest", dataset, "--method", "deep_fv_binary", "--M", 40, "--epochs", 2,
                    "--out", tmp_path]) == 0
        words, nbits = load_packed_bits(tmp_path / "embeddings.sagg")
        assert words.shape == (32, 1) and nbits == 40
        assert (tmp_path / "model.sagm").exists() and (tmp_path / "selector.sagm").exists()
        assert len(json.loads((tmp_path / "slides.json").read_text())) == 32

    def test_dense(self, dataset, tmp_path):
        assert run(["encode", "--manifest", dataset, "--method", "mean", "--out", tmp_path]) == 0
        assert load_patch_matrix(tmp_path / "embeddings.sagg").shape == (32, 8)

    def test_yottixel_refused(self, dataset, tmp_path):
        assert run(["encode", "--manifest", dataset, "--method", "yottixel", "--out", tmp_path]) == 2


class TestSweepAlpha:
    def test_empty_list(self, dataset):
        assert run(["sweep-alpha", "--manifest", dataset, "--alphas", ""]) == 2

    def test_one_alpha(self, dataset, tmp_path, capsys):
        assert run(["sweep-alpha", "--manifest", dataset, "--alphas", "0.01", "--M", 30, "--epochs", 1,
                    "--out", tmp_path]) == 0
        rows = json.loads((tmp_path / "alpha_sweep.json").read_text())
        assert [r["alpha"] for r in rows] == [0.01]
        assert len(capsys.readouterr().out.strip().splitlines()) == 2

    def test_default_grid(self, dataset, tmp_path):
        assert run(["sweep-alpha", "--manifest", dataset, "--flavor", "binary", "--M", 30, "--epochs", 1,
                    "--out", tmp_path]) == 0
        rows = json.loads((tmp_path / "alpha_sweep.json").read_text())
        assert [r["alpha"] for r in rows] == [0.0, 0.1, 0.01, 0.001, 0.0001, 0.00001]

    def test_failed_alpha_is_runtime_error(self, dataset, tmp_path):
        assert run(["sweep-alpha", "--manifest", dataset, "--alphas", "0", "--M", 10**6, "--epochs", 1]) == 1


class TestBench:
    def test_single_dim_json(self, capsys):
        assert run(["bench", "--dims", "300", "--gallery", 30, "--repeats", 1]) == 0
        table = json.loads(capsys.readouterr().out)
        assert [r["dimension"] for r in table["rows"]] == [300]

    def test_default_dims(self, monkeypatch, capsys):
        import slideagg.cli as cli

        seen = {}

        def fake(gallery, dims, methods, **kw):
            seen["dims"] = list(dims)
            return {"gallery_size": gallery, "repeats": 1, "k": 1, "methods": list(methods),
                    "rows": [{"dimension": d} for d in dims]}

        monkeypatch.setattr(cli, "bench_search", fake)
        assert run(["bench"]) == 0
        assert seen["dims"] == [300, 3000, 30000]
        assert len(json.loads(capsys.readouterr().out)["rows"]) == 3

    def test_text_format(self, capsys):
        assert run(["bench", "--dims", "64,128", "--gallery", 10, "--repeats", 1, "--format", "text"]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 3

    def test_unknown_method(self):
        assert run(["bench", "--methods", "cosine"]) == 2


def test_all(tmp_path):
    assert run(["all", "--out", tmp_path]) == 0
    assert (tmp_path / "report" / "report.json").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "slideagg.cli", "synth", "--out", tmp_path / "d",
                           "--slides-per-class", "2", "--dim", "3"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "slideagg.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
