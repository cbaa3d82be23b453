import json

import numpy as np
import pytest

from mgll.cli import main, rebuild_argv, render_table
from mgll.numerics import write_mgem


def run_cli(argv, tmp_path, name="report.json"):
    out = tmp_path / name
    code = main(argv + ["--out", str(out)])
    report = json.loads(out.read_text()) if out.exists() else None
    return code, report


class TestGenSynth:
    def test_writes_manifest_and_embeddings(self, tmp_path):
        code, report = run_cli(
            ["gen-synth", "--out-dir", str(tmp_path / "corpus"), "--seed", "3",
             "--n-samples", "10", "--dim", "8", "--coarse-labels", "3",
             "--fine-per-coarse", "2", "--labels-per-sample", "2"],
            tmp_path,
        )
        assert code == 0
        assert (tmp_path / "corpus" / "manifest.json").exists()
        # 10 samples + 3 coarse + 6 fine anchors
        assert report["results"]["n_embedding_files"] == 19

    def test_same_seed_byte_identical(self, tmp_path):
        args = ["gen-synth", "--seed", "9", "--n-samples", "8", "--dim", "8",
                "--coarse-labels", "2", "--fine-per-coarse", "2",
                "--labels-per-sample", "1"]
        _, rep1 = run_cli(args + ["--out-dir", str(tmp_path / "a")], tmp_path, "r1.json")
        _, rep2 = run_cli(args + ["--out-dir", str(tmp_path / "b")], tmp_path, "r2.json")
        assert rep1["results"]["manifest_sha256"] == rep2["results"]["manifest_sha256"]
        assert rep1["results"]["embeddings_sha256"] == rep2["results"]["embeddings_sha256"]

    def test_invalid_dim_exits_two(self, tmp_path):
        code = main(["gen-synth", "--out-dir", str(tmp_path / "x"),
                     "--seed", "1", "--dim", "1"])
        assert code == 2

    def test_missing_seed_exits_two(self, tmp_path):
        code = main(["gen-synth", "--out-dir", str(tmp_path / "x")])
        assert code == 2


class TestLossEval:
    def test_diagonal_fixture_value(self, tmp_path, diagonal_manifest_dir, capsys):
        code, report = run_cli(
            ["loss-eval", "--manifest", str(diagonal_manifest_dir / "manifest.json"),
             "--losses", "soft_clip,clip", "--tau", "1.0"],
            tmp_path,
        )
        assert code == 0
        captured = capsys.readouterr().out
        assert "soft_clip = 0.313261687518" in captured
        assert report["results"]["losses"]["soft_clip"] == pytest.approx(
            0.313262, abs=1e-6
        )
        assert report["results"]["losses"]["clip"] == pytest.approx(
            0.313262, abs=1e-6
        )

    def test_identical_levels_zero_kl(self, tmp_path, twin_level_manifest_dir):
        code, report = run_cli(
            ["loss-eval", "--manifest", str(twin_level_manifest_dir / "manifest.json"),
             "--losses", "smooth_kl"],
            tmp_path,
        )
        assert code == 0
        assert report["results"]["losses"]["smooth_kl"] == pytest.approx(0.0, abs=1e-12)

    def test_zero_alphas_zero_total(self, tmp_path, diagonal_manifest_dir):
        code, report = run_cli(
            ["loss-eval", "--manifest", str(diagonal_manifest_dir / "manifest.json"),
             "--losses", "mgll", "--alpha1", "0", "--alpha2", "0", "--alpha3", "0"],
            tmp_path,
        )
        assert code == 0
        assert report["results"]["losses"]["mgll"] == 0.0

    def test_missing_manifest_exits_one(self, tmp_path):
        code = main(["loss-eval", "--manifest", str(tmp_path / "nope.json")])
        assert code == 1


class TestGradcheck:
    def test_pointwise_high_precision_report(self, tmp_path):
        code, report = run_cli(
            ["gradcheck", "--loss", "pointwise", "--seed", "4",
             "--n-samples", "5", "--dim", "8", "--probes", "16",
             "--step", "1e-8", "--precision", "mpmath"],
            tmp_path,
        )
        assert code == 0
        assert report["results"]["max_rel_error"] < 1e-9

    def test_default_longdouble_report(self, tmp_path):
        code, report = run_cli(
            ["gradcheck", "--loss", "mgll", "--seed", "5", "--probes", "32"],
            tmp_path,
        )
        assert code == 0
        assert report["results"]["max_rel_error"] < 1e-5


class TestTrain:
    def test_reduces_loss_on_random_init(self, tmp_path, diagonal_manifest_dir):
        code, report = run_cli(
            ["train", "--manifest", str(diagonal_manifest_dir / "manifest.json"),
             "--loss", "soft_clip", "--init", "random", "--seed", "2",
             "--step-size", "0.5", "--max-iters", "60", "--tau", "1.0"],
            tmp_path,
        )
        assert code == 0
        assert report["results"]["final_loss"] <= report["results"]["initial_loss"]


class TestMetricsCmd:
    def test_perfect_prediction(self, tmp_path):
        scores = np.array([[2.0, -2.0], [-2.0, 2.0], [2.0, -2.0]])
        truth = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        write_mgem(tmp_path / "scores.mgem", scores)
        write_mgem(tmp_path / "truth.mgem", truth)
        code, report = run_cli(
            ["metrics", "--scores", str(tmp_path / "scores.mgem"),
             "--truth", str(tmp_path / "truth.mgem")],
            tmp_path,
        )
        assert code == 0
        assert report["results"]["auc"] == 1.0

    def test_degenerate_truth_exits_one(self, tmp_path):
        write_mgem(tmp_path / "s.mgem", np.ones((3, 1)))
        write_mgem(tmp_path / "t.mgem", np.ones((3, 1)))
        code = main(["metrics", "--scores", str(tmp_path / "s.mgem"),
                     "--truth", str(tmp_path / "t.mgem")])
        assert code == 1


class TestDeterminism:
    def test_report_replay_is_bit_identical(self, tmp_path, diagonal_manifest_dir):
        code, first = run_cli(
            ["loss-eval", "--manifest", str(diagonal_manifest_dir / "manifest.json"),
             "--tau", "0.07"],
            tmp_path, "first.json",
        )
        assert code == 0
        argv = rebuild_argv(first)
        out2 = tmp_path / "second.json"
        assert main(argv + ["--out", str(out2)]) == 0
        second = json.loads(out2.read_text())
        assert json.dumps(first["results"], sort_keys=True) == json.dumps(
            second["results"], sort_keys=True
        )
        assert first["config"] == second["config"]

    def test_gradcheck_replay(self, tmp_path):
        code, first = run_cli(
            ["gradcheck", "--loss", "soft_clip", "--seed", "11", "--probes", "8"],
            tmp_path, "g1.json",
        )
        assert code == 0
        out2 = tmp_path / "g2.json"
        assert main(rebuild_argv(first) + ["--out", str(out2)]) == 0
        second = json.loads(out2.read_text())
        assert first["results"] == second["results"]


class TestRenderTable:
    def test_alignment(self):
        rows = [
            {"variant": "clip", "split_seed": 0, "auc": 0.5, "map": 0.25,
             "acc": 0.75, "final_loss": 1.234, "iterations": 10},
            {"variant": "full", "split_seed": 0, "auc": 0.75, "map": 0.5,
             "acc": 0.8, "final_loss": 0.9, "iterations": 12},
        ]
        text = render_table(rows)
        lines = text.splitlines()
        assert len(lines) == 4
        assert len({len(l) for l in lines if l.strip()}) == 1


class TestWeightModes:
    def test_cooccurrence_mode_runs(self, tmp_path):
        from mgll import SyntheticSpec, generate_synthetic, write_manifest

        manifest = generate_synthetic(
            SyntheticSpec(seed=6, n_samples=12, dim=8, coarse_labels=3,
                          fine_per_coarse=2, labels_per_sample=2)
        )
        mdir = tmp_path / "m"
        write_manifest(manifest, mdir)
        for mode in ("uniform", "cooccurrence"):
            code, report = run_cli(
                ["loss-eval", "--manifest", str(mdir / "manifest.json"),
                 "--losses", "soft_clip", "--weights-mode", mode],
                tmp_path, f"{mode}.json",
            )
            assert code == 0
            assert report["results"]["losses"]["soft_clip"] > 0


class TestAblateJobs:
    def test_parallel_jobs_match_sequential(self, tmp_path):
        from mgll import SyntheticSpec, generate_synthetic, write_manifest

        manifest = generate_synthetic(
            SyntheticSpec(seed=8, n_samples=40, dim=8, coarse_labels=3,
                          fine_per_coarse=2, labels_per_sample=2)
        )
        mdir = tmp_path / "m"
        write_manifest(manifest, mdir)
        base = ["ablate", "--manifest", str(mdir / "manifest.json"),
                "--ladder", "robustness", "--seed", "0", "--seeds", "2",
                "--max-iters", "8", "--step-size", "1.0"]
        code1, rep1 = run_cli(base + ["--jobs", "1"], tmp_path, "seq.json")
        code2, rep2 = run_cli(base + ["--jobs", "2"], tmp_path, "par.json")
        assert code1 == 0 and code2 == 0
        assert rep1["results"]["rows"] == rep2["results"]["rows"]
