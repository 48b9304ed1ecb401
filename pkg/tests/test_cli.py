"""End-to-end command-line workflow on a tiny synthetic corpus."""

import json

import numpy as np
import pytest
from PIL import Image

from genmatch.cli import main
from genmatch.train import load_model

TINY_MODEL_FLAGS = [
    "--latent-dim", "3", "--embed-dim", "8", "--episode-len", "3",
    "--classes-per-episode", "1", "--match-steps", "1", "--width", "0.25",
]


@pytest.fixture(scope="module")
def run_dir(corpus_dir, tmp_path_factory):
    """One tiny training run shared by every read-only CLI test."""
    out = tmp_path_factory.mktemp("run")
    code = main([
        "train",
        "--data", str(corpus_dir / "omniglot_train.gmd"),
        "--out", str(out),
        "--steps", "4", "--episodes-per-batch", "2",
        "--checkpoint-every", "2", "--log-every", "1", "--seed", "3",
        *TINY_MODEL_FLAGS,
    ])
    assert code == 0
    return out


class TestExitCodes:
    def test_usage_error_is_exit_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["train", "--no-such-flag"])
        assert excinfo.value.code == 2

    def test_missing_subcommand_is_exit_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2

    def test_missing_checkpoint_is_exit_1(self, corpus_dir, tmp_path, capsys):
        code = main([
            "eval-nll",
            "--checkpoint", str(tmp_path / "nope.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_data_cache_is_exit_1(self, tmp_path, capsys):
        code = main([
            "train",
            "--data", str(tmp_path / "missing.gmd"),
            "--out", str(tmp_path / "out"),
            "--steps", "1", *TINY_MODEL_FLAGS,
        ])
        assert code == 1
        assert "no such data cache" in capsys.readouterr().err

    def test_unreadable_config_file_is_exit_2(self, corpus_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(SystemExit) as excinfo:
            main([
                "train",
                "--data", str(corpus_dir / "omniglot_train.gmd"),
                "--out", str(tmp_path / "out"),
                "--config", str(bad),
            ])
        assert excinfo.value.code == 2


class TestTrainCommand:
    def test_run_directory_contents(self, run_dir):
        assert (run_dir / "ckpt_final.gmck").exists()
        assert (run_dir / "ckpt_000002.gmck").exists()
        assert (run_dir / "metrics.jsonl").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["model"]["latent_dim"] == 3
        assert manifest["config"]["steps"] == 4
        assert manifest["checkpoint"]["path"].endswith("ckpt_final.gmck")
        records = [
            json.loads(line)
            for line in (run_dir / "metrics.jsonl").read_text().splitlines()
        ]
        assert [r["step"] for r in records] == [1, 2, 3, 4]

    def test_final_checkpoint_is_loadable(self, run_dir):
        model, payload = load_model(run_dir / "ckpt_final.gmck")
        assert payload["step"] == 4
        assert model.config.latent_dim == 3

    def test_config_file_with_flag_override(self, corpus_dir, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({
            "steps": 2,
            "episodes_per_batch": 2,
            "model": {
                "latent_dim": 4, "embed_dim": 8, "episode_len": 3,
                "classes_per_episode": 1, "match_steps": 1, "width": 0.25,
            },
        }))
        out = tmp_path / "run"
        code = main([
            "train",
            "--data", str(corpus_dir / "omniglot_train.gmd"),
            "--out", str(out),
            "--config", str(config),
            "--latent-dim", "5",
        ])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["model"]["latent_dim"] == 5  # flag wins
        assert manifest["config"]["steps"] == 2  # file wins over default

    def test_resume_from_checkpoint(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "resumed"
        code = main([
            "train",
            "--data", str(corpus_dir / "omniglot_train.gmd"),
            "--out", str(out),
            "--resume", str(run_dir / "ckpt_000002.gmck"),
            "--steps", "4", "--episodes-per-batch", "2",
            "--checkpoint-every", "2", "--log-every", "1", "--seed", "3",
            *TINY_MODEL_FLAGS,
        ])
        assert code == 0
        _, payload = load_model(out / "ckpt_final.gmck")
        assert payload["step"] == 4


class TestEvalCommands:
    def test_nll_curve_outputs(self, corpus_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main([
            "eval-nll",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--out", str(out),
            "--episodes", "3", "--length", "3", "--samples", "8",
        ])
        assert code == 0
        lines = (out / "nll.csv").read_text().splitlines()
        assert lines[0] == "stat,t0,t1,t2"
        assert lines[1].startswith("mean,")
        assert lines[2].startswith("se,")
        stdout = capsys.readouterr().out
        assert "t=0: nll" in stdout
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "eval-nll"
        assert manifest["outputs"] == ["nll.csv"]
        assert manifest["data"]["split"] == "test"

    def test_nll_csv_is_seed_deterministic(self, corpus_dir, run_dir, tmp_path):
        args = [
            "eval-nll",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--episodes", "3", "--length", "3", "--samples", "8",
            "--seed", "4",
        ]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "nll.csv").read_bytes() == (
            tmp_path / "b" / "nll.csv"
        ).read_bytes()

    def test_eval_nll_rejects_mnist_cache(self, corpus_dir, run_dir, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            main([
                "eval-nll",
                "--checkpoint", str(run_dir / "ckpt_final.gmck"),
                "--data", str(corpus_dir / "mnist_test.gmd"),
                "--out", str(tmp_path / "out"),
            ])
        assert excinfo.value.code == 2

    def test_eval_mnist_rejects_glyph_cache(self, corpus_dir, run_dir, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            main([
                "eval-mnist",
                "--checkpoint", str(run_dir / "ckpt_final.gmck"),
                "--data", str(corpus_dir / "omniglot_test.gmd"),
                "--out", str(tmp_path / "out"),
            ])
        assert excinfo.value.code == 2

    def test_eval_mnist_happy_path(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "mnist"
        code = main([
            "eval-mnist",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "mnist_test.gmd"),
            "--out", str(out),
            "--episodes", "2", "--length", "3", "--samples", "8",
        ])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "eval-mnist"
        assert manifest["data"]["split"] == "mnist-test"


class TestClassifyCommand:
    def test_outputs(self, corpus_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "cls"
        code = main([
            "classify",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--out", str(out),
            "--ways", "3", "--shots", "1", "--trials", "4",
            "--method", "cosine",
        ])
        assert code == 0
        summary = json.loads((out / "classification.json").read_text())
        assert set(summary) == {
            "accuracy", "se", "trials", "ways", "shots", "method",
        }
        assert summary["trials"] == 4
        assert 0.0 <= summary["accuracy"] <= 1.0
        assert "3-way 1-shot (cosine):" in capsys.readouterr().out


class TestSampleCommand:
    def test_grid_png_dimensions(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "grid" / "grid.png"
        code = main([
            "sample",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--out", str(out),
            "--episode-len", "2", "--n-samples", "3",
        ])
        assert code == 0
        with Image.open(out) as img:
            assert img.mode == "L"
            # Pseudo-element model: rows for t = 0..2, columns 1 + samples.
            rows, cols, cell, pad, sep = 3, 4, 28, 2, 4
            assert img.size == (
                cols * (cell + pad) + pad + sep, rows * (cell + pad) + pad
            )
            arr = np.asarray(img)
        assert (arr == 128).any()  # input/sample separator stripe
        manifest = json.loads((out.parent / "manifest.json").read_text())
        assert manifest["outputs"] == ["grid.png"]


class TestDiagnosticsCommand:
    def test_entropy_and_elbo_csvs(self, corpus_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "diag"
        code = main([
            "diagnostics",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--out", str(out),
            "--episodes", "2", "--length", "3",
            "--metrics", str(run_dir / "metrics.jsonl"),
        ])
        assert code == 0
        entropy_lines = (out / "prior_entropy.csv").read_text().splitlines()
        assert entropy_lines[0] == "t,0,1,2"
        assert entropy_lines[1].startswith("entropy,")
        elbo_lines = (out / "per_t_elbo.csv").read_text().splitlines()
        assert elbo_lines[0] == "step,t0,t1,t2"
        assert len(elbo_lines) == 1 + 4  # one row per logged training step
        assert "prior entropy" in capsys.readouterr().out
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["outputs"] == ["prior_entropy.csv", "per_t_elbo.csv"]

    def test_entropy_only_without_metrics(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "diag2"
        code = main([
            "diagnostics",
            "--checkpoint", str(run_dir / "ckpt_final.gmck"),
            "--data", str(corpus_dir / "omniglot_test.gmd"),
            "--out", str(out),
            "--episodes", "2", "--length", "3",
        ])
        assert code == 0
        assert not (out / "per_t_elbo.csv").exists()


class TestSynthDataCommand:
    def test_generates_and_ingests(self, tmp_path, capsys):
        out = tmp_path / "corpus"
        code = main([
            "synth-data", "--out", str(out),
            "--train-alphabets", "1", "--test-alphabets", "1",
            "--classes-per-alphabet", "2", "--mnist-per-class", "2",
            "--seed", "1",
        ])
        assert code == 0
        cache = out / "cache"
        for name in ("omniglot_train.gmd", "omniglot_test.gmd", "mnist_test.gmd"):
            assert (cache / name).exists()
        assert "caches:" in capsys.readouterr().out
