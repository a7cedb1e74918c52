import json
import subprocess
import sys

import numpy as np
import pytest

from bisimlab.cli import main
from bisimlab.errors import ConfigError
from bisimlab.experiments import repetition_seed
from bisimlab.harness import PRESETS, build_config, parse_override, ratio_target, run_command
from bisimlab.mdp import build_mdp, save_mdp

SMALL_SUITE = {"verify": {"n_mdps": 3, "max_states": 5, "weights": [[1.0, 0.9], [0.5, 0.5]]}}
TINY_TRAIN = {
    "env": {"task": "sparse_cartpole", "episode_cap": 20},
    "agent": {"latent_dim": 4, "encoder_hidden": [8], "model_hidden": [8], "q_hidden": [8], "warmup_steps": 10,
              "eval_every": 50, "eval_episodes": 1, "log_every": 10},
    "train": {"batch_size": 8},
    "run": {"steps": 100, "repetitions": 2},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def csv_bytes(out_dir):
    return {p.name: p.read_bytes() for p in sorted(out_dir.glob("*.csv"))}


class TestConfig:
    def test_layering(self):
        doc = build_config({"bisim": {"c_T": 0.5}}, preset="normed", seed=9, overrides=[("train.lr", 0.01)])
        assert doc["seed"] == 9
        assert doc["bisim"]["c_T"] == 0.5
        assert doc["train"]["projection_enabled"] is True
        assert doc["train"]["lr"] == 0.01

    def test_def2_follows_discount(self):
        doc = build_config({"mdp": {"gamma": 0.8}}, preset="def2")
        assert doc["bisim"]["c_R"] == 1.0 and doc["bisim"]["c_T"] == 0.8

    def test_def1_weighting(self):
        bisim = build_config(preset="def1")["bisim"]
        assert bisim["c_R"] + bisim["c_T"] == pytest.approx(1.0)

    @pytest.mark.parametrize("preset, target", [(None, 10.0), ("dbc-alt", 1.0)])
    def test_ratio_targets(self, preset, target):
        doc = build_config({"train": {"c_T": 0.9}} if preset is None else {}, preset=preset)
        assert ratio_target(doc["train"].get("c_R", 1.0), doc["train"]["c_T"]) == pytest.approx(target)

    def test_half_weighting_target(self):
        assert ratio_target(1.0, 0.5) == pytest.approx(2.0)

    def test_all_named_variants_exist(self):
        assert {"def1", "def2", "dbc-orig", "dbc-matched", "dbc-alt", "normed", "normed-ir",
                "normed-ir-id"} <= set(PRESETS)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            build_config(preset="nope")

    @pytest.mark.parametrize("text, expected", [("a.b=1", ("a.b", 1)), ("a=null", ("a", None)),
                                                ("env.task=mountain_car", ("env.task", "mountain_car"))])
    def test_parse_override(self, text, expected):
        assert parse_override(text) == expected

    def test_repetition_seeds_differ(self):
        seeds = {repetition_seed(0, k) for k in range(10)}
        assert len(seeds) == 10
        assert repetition_seed(5, 3) == repetition_seed(5, 3)


class TestCommands:
    def test_exact_metric_self_loop(self, tmp_path):
        mdp = build_mdp(np.eye(2)[:, None, :], np.array([[1.0], [0.0]]), gamma=0.5)
        save_mdp(mdp, tmp_path / "mdp.json")
        doc = build_config({"mdp": {"path": str(tmp_path / "mdp.json")}, "policy": {"kind": "uniform"},
                            "bisim": {"c_R": 1.0, "c_T": 0.5, "tol": 1e-12}})
        summary = run_command("exact-metric", doc, tmp_path / "out")
        assert summary.passed
        rows = (tmp_path / "out" / "distances.csv").read_text().splitlines()
        assert rows[0] == "i,j,d"
        d01 = {tuple(r.split(",")[:2]): float(r.split(",")[2]) for r in rows[1:]}[("0", "1")]
        assert d01 == pytest.approx(2.0, abs=1e-10)

    def test_run_directory_contents(self, tmp_path):
        run_command("gen-mdp", build_config(), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        names = {e["file"] for e in manifest["files"]}
        assert {"config.json", "summary.json", "mdp.json", "policy.json"} <= names
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["command"] == "gen-mdp"

    def test_verify_bounds_passes(self, tmp_path):
        summary = run_command("verify-bounds", build_config(SMALL_SUITE), tmp_path)
        assert summary.passed
        report = json.loads((tmp_path / "check_value_difference.json").read_text())
        assert report["cases"] > 0 and report["failures"] == 0

    def test_verify_bounds_lists_every_check_once(self, tmp_path):
        from bisimlab.verify import CHECKS
        summary = run_command("verify-bounds", build_config(SMALL_SUITE), tmp_path)
        assert list(summary.checks) == list(CHECKS)

    def test_out_of_hypothesis_is_not_failure(self, tmp_path):
        # c_T = 0.9 >= gamma = 0.5: the exact model-error bound never applies
        doc = build_config({"verify": {"n_mdps": 2, "max_states": 4, "weights": [[1.0, 0.9]], "gamma": 0.5}})
        summary = run_command("verify-bounds", doc, tmp_path)
        assert summary.passed
        assert "fail" not in summary.checks.values()

    def test_train_records_divergence_without_failing(self, tmp_path):
        doc = build_config(TINY_TRAIN, preset="dbc-plain")
        summary = run_command("train", doc, tmp_path)
        assert summary.passed
        assert {"rep0", "rep1"} <= set(summary.scalars)
        assert (tmp_path / "diagnostics_rep1.csv").exists()

    def test_normed_train_respects_radius(self, tmp_path):
        summary = run_command("train", build_config(TINY_TRAIN, preset="normed"), tmp_path)
        for rep in ("rep0", "rep1"):
            s = summary.scalars[rep]
            assert s["max_logged_norm"] <= s["radius"] + 1e-9

    def test_ratio_study_header(self, tmp_path):
        doc = build_config({"train": {"c_R": 1.0, "c_T": 0.5, "batch_size": 16},
                            "ratio": {"steps": 20, "log_every": 5, "grid": [[-3.1416, 3.1416, 5], [-8, 8, 5]]}})
        summary = run_command("ratio-study", doc, tmp_path)
        assert summary.checks["exact_ratio"] == "pass"
        assert (tmp_path / "ratio.csv").read_text().splitlines()[0] == "# target=2.0"


class TestDeterminism:
    @pytest.mark.parametrize("command, doc", [
        ("exact-metric", {}),
        ("verify-bounds", SMALL_SUITE),
        ("train", TINY_TRAIN),
        ("ratio-study", {"train": {"c_T": 0.5, "batch_size": 16},
                         "ratio": {"steps": 30, "log_every": 5, "grid": [[-3.1416, 3.1416, 5], [-8, 8, 5]]}}),
    ])
    def test_byte_identical_csv(self, tmp_path, command, doc):
        cfg = build_config(doc, seed=123)
        run_command(command, cfg, tmp_path / "a")
        run_command(command, cfg, tmp_path / "b")
        first, second = csv_bytes(tmp_path / "a"), csv_bytes(tmp_path / "b")
        assert first and first == second


class TestCli:
    def test_success(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"bisim": {"c_T": 0.5}})
        assert main(["exact-metric", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "4"]) == 0
        assert "diameter: pass" in capsys.readouterr().out
        assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 4

    def test_perturbed_metric_fails(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SMALL_SUITE)
        code = main(["verify-bounds", "--config", cfg, "--out", str(tmp_path / "o"), "--perturb-metric", "0.1"])
        assert code == 1
        assert "value_difference" in capsys.readouterr().err

    @pytest.mark.parametrize("doc", [{"bisim": {"c_T": 1.5}}, {"train": {"bogus": 1}}, {"mdp": {"n_states": 0}}])
    def test_config_errors(self, tmp_path, doc):
        cfg = write_config(tmp_path, doc)
        command = "train" if "train" in doc else "exact-metric"
        assert main([command, "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_missing_and_malformed_config(self, tmp_path):
        assert main(["gen-mdp", "--config", str(tmp_path / "missing.json")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen-mdp", "--config", str(bad)]) == 2

    def test_unknown_preset(self, tmp_path):
        assert main(["gen-mdp", "--preset", "nope", "--out", str(tmp_path)]) == 2

    def test_forbidden_divergence_exit(self, tmp_path):
        doc = {**TINY_TRAIN, "run": {"steps": 60, "repetitions": 1, "forbid_divergence": True},
               "train": {"batch_size": 8, "divergence_norm": 1e-6}}
        cfg = write_config(tmp_path, doc)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1

    def test_console_script(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "bisimlab.cli", "gen-mdp", "--out", str(tmp_path)],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert (tmp_path / "mdp.json").exists()
