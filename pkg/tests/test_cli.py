"""Tests for the command-line entry point: config validation, overrides,
run modes, exit codes, and byte-level determinism of run outputs."""

import json
import os

import numpy as np
import pytest

from metamask import cli

TINY_SYNTHETIC = {
    "n_samples": 32,
    "n_classes": 2,
    "d_signal": 2,
    "d_confounder": 2,
    "d_noise": 2,
    "confounder_modes": 2,
    "seed": 0,
}


def tiny_config(out_dir, mode="train", total_steps=3):
    return {
        "mode": mode,
        "seed": 0,
        "output_dir": str(out_dir),
        "batch_size": 16,
        "model": {"repr_dim": 4, "head_dim": 4},
        "optim": {"lr_main": 1e-4, "total_steps": total_steps},
        "data": {"synthetic": TINY_SYNTHETIC},
    }


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestValidateConfig:
    def test_defaults_fill_in(self):
        cfg, diags = cli.validate_config({"output_dir": "/tmp/x"})
        assert diags == []
        assert cfg["mode"] == "train"
        assert cfg["optim"]["alpha"] == 100.0
        assert cfg["contrastive"]["temperature"] == 0.5
        assert cfg["drr"]["lambda"] == 0.005

    def test_missing_output_dir(self):
        _, diags = cli.validate_config({})
        assert any(d["field"] == "output_dir" for d in diags)

    def test_unknown_field_flagged_with_path(self):
        _, diags = cli.validate_config(
            {"output_dir": "/tmp/x", "optim": {"lr_fast": 1.0}}
        )
        assert any(d["field"] == "optim.lr_fast" for d in diags)

    def test_bad_mode_and_types(self):
        _, diags = cli.validate_config(
            {"output_dir": "/tmp/x", "mode": "fit", "seed": "zero",
             "batch_size": 0}
        )
        fields = {d["field"] for d in diags}
        assert {"mode", "seed", "batch_size"} <= fields

    def test_batch_size_versus_dataset(self):
        raw = {"output_dir": "/tmp/x", "batch_size": 99,
               "data": {"synthetic": {"n_samples": 50}}}
        _, diags = cli.validate_config(raw)
        assert any(d["field"] == "batch_size" for d in diags)

    def test_eval_requires_params_dir(self):
        _, diags = cli.validate_config({"output_dir": "/tmp/x", "mode": "eval"})
        assert any(d["field"] == "params_dir" for d in diags)


class TestOverrides:
    def test_parse_set(self):
        assert cli._parse_set("optim.lr_main=0.5") == ("optim.lr_main", 0.5)
        assert cli._parse_set("mode=train") == ("mode", "train")
        assert cli._parse_set("flags=[1,2]") == ("flags", [1, 2])
        with pytest.raises(Exception):
            cli._parse_set("no_equals_sign")

    def test_apply_override_nested(self):
        raw = {}
        cli._apply_override(raw, "optim.lr_main", 0.25)
        assert raw == {"optim": {"lr_main": 0.25}}


class TestRunModes:
    def test_train_mode_outputs(self, tmp_path):
        out = tmp_path / "run"
        code = cli.main(["run", write_config(tmp_path, tiny_config(out))])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "train"
        final = summary["final"]
        assert 0.0 <= final["knn_accuracy"] <= 1.0
        assert np.isfinite(final["loss_contrast"])
        lines = (out / "report.jsonl").read_text().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["step"] == 0
        assert (out / "params" / "manifest.json").exists()
        assert not (out / ".lock").exists()

    def test_train_then_eval(self, tmp_path):
        out1 = tmp_path / "train"
        cli.main(["run", write_config(tmp_path, tiny_config(out1), "c1.json")])
        out2 = tmp_path / "eval"
        cfg = tiny_config(out2, mode="eval")
        cfg["params_dir"] = str(out1 / "params")
        code = cli.main(["run", write_config(tmp_path, cfg, "c2.json")])
        assert code == 0
        summary = json.loads((out2 / "summary.json").read_text())
        final = summary["final"]
        for key in ("knn_accuracy", "linear_probe_accuracy",
                    "phi_masked", "phi_unmasked"):
            assert key in final
        assert (out2 / "representations.mmt").exists()

    def test_random_mask_study_mode(self, tmp_path):
        out = tmp_path / "study"
        cfg = tiny_config(out, mode="random_mask_study")
        cfg["study"] = {"mask_rates": [0.0, 0.5], "trials_per_rate": 3}
        code = cli.main(["run", write_config(tmp_path, cfg)])
        assert code == 0
        csv_lines = (out / "random_mask_study.csv").read_text().splitlines()
        assert csv_lines[0] == "study,rate_or_width,trial,accuracy,baseline"
        assert len(csv_lines) == 1 + 2 * 3

    def test_learned_mask_study_mode(self, tmp_path):
        out = tmp_path / "study"
        cfg = tiny_config(out, mode="learned_mask_study")
        cfg["study"] = {"mask_rates": [1.0], "trials_per_rate": 2}
        code = cli.main(["run", write_config(tmp_path, cfg)])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert "below_average_dims" in summary["final"]

    def test_dim_sweep_mode(self, tmp_path):
        out = tmp_path / "sweep"
        cfg = tiny_config(out, mode="dim_sweep")
        cfg["study"] = {"head_widths": [4, 8]}
        code = cli.main(["run", write_config(tmp_path, cfg)])
        assert code == 0
        rows = json.loads((out / "summary.json").read_text())["final"]["rows"]
        assert [(r["width"], r["variant"]) for r in rows] == [
            (4, "full"), (4, "no_meta"), (8, "full"), (8, "no_meta"),
        ]

    def test_alpha_sweep_mode(self, tmp_path):
        out = tmp_path / "alpha"
        cfg = tiny_config(out, mode="alpha_sweep")
        cfg["study"] = {"alphas": [1.0, 100.0]}
        code = cli.main(["run", write_config(tmp_path, cfg)])
        assert code == 0
        by_alpha = json.loads((out / "summary.json").read_text())["final"][
            "accuracy_by_alpha"
        ]
        assert set(by_alpha) == {"1.0", "100.0"}

    def test_set_override_changes_run(self, tmp_path):
        out = tmp_path / "run"
        path = write_config(tmp_path, tiny_config(out))
        code = cli.main(["run", path, "--set", "optim.total_steps=2"])
        assert code == 0
        lines = (out / "report.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_summary_embeds_resolved_config(self, tmp_path):
        out = tmp_path / "run"
        cli.main(["run", write_config(tmp_path, tiny_config(out))])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["config"]["optim"]["alpha"] == 100.0
        assert summary["config"]["seed"] == summary["seed"] == 0


class TestDeterminism:
    def test_repeated_run_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = tiny_config(out)
            code = cli.main(["run", write_config(tmp_path, cfg, f"{name}.json")])
            assert code == 0
            outs.append(out)
        r1 = (outs[0] / "report.jsonl").read_bytes()
        r2 = (outs[1] / "report.jsonl").read_bytes()
        assert r1 == r2
        s1 = json.loads((outs[0] / "summary.json").read_text())
        s2 = json.loads((outs[1] / "summary.json").read_text())
        s1["config"]["output_dir"] = s2["config"]["output_dir"]
        assert s1 == s2


class TestExitCodes:
    def test_validate_ok(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = cli.main(["validate", write_config(tmp_path, tiny_config(out))])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["diagnostics"] == []

    def test_validate_reports_all_diagnostics(self, tmp_path, capsys):
        cfg = {"mode": "fit", "bogus": 1}
        code = cli.main(["validate", write_config(tmp_path, cfg)])
        assert code == 2
        diags = json.loads(capsys.readouterr().out)["diagnostics"]
        fields = {d["field"] for d in diags}
        assert {"mode", "bogus", "output_dir"} <= fields

    def test_run_invalid_config_exits_2(self, tmp_path, capsys):
        code = cli.main(["run", write_config(tmp_path, {"mode": "fit"})])
        assert code == 2
        payload = json.loads(capsys.readouterr().out)
        assert payload["error"] == "config"

    def test_run_missing_file_exits_2(self, tmp_path, capsys):
        code = cli.main(["run", str(tmp_path / "absent.json")])
        assert code == 2
        capsys.readouterr()

    def test_run_unreadable_json_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert cli.main(["run", str(path)]) == 2
        capsys.readouterr()

    def test_locked_output_dir_exits_4(self, tmp_path, capsys):
        out = tmp_path / "run"
        os.makedirs(out)
        (out / ".lock").touch()
        code = cli.main(["run", write_config(tmp_path, tiny_config(out))])
        assert code == 4
        payload = json.loads(capsys.readouterr().out)
        assert payload["error"] == "io"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_3(self, tmp_path, capsys):
        from metamask.data import SyntheticSpec, make_synthetic, save_dataset
        from metamask.data import Dataset

        spec = SyntheticSpec(**TINY_SYNTHETIC)
        ds = make_synthetic(spec)
        bad_views = [v.copy() for v in ds.views]
        bad_views[0][0, 0] = np.inf
        bad = Dataset(views=bad_views, labels=ds.labels, n_classes=ds.n_classes)
        save_dataset(tmp_path / "data", bad)
        out = tmp_path / "run"
        cfg = tiny_config(out)
        cfg["batch_size"] = 32
        cfg["data"] = {"manifest": str(tmp_path / "data" / "manifest.json")}
        code = cli.main(["run", write_config(tmp_path, cfg)])
        assert code == 3
        payload = json.loads(capsys.readouterr().out)
        assert payload["error"] == "divergence"
        assert not (out / ".lock").exists()
