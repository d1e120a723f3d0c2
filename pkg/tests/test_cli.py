"""End-to-end command-line behavior on a micro configuration."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cvaeseg.cli import RunConfig, main
from cvaeseg.errors import CvaesegError

MICRO_CONFIG = {
    "seed": 11,
    "data": {
        "n_train": 12, "n_val": 4, "n_test": 4,
        "generator": {
            "height": 16, "width": 16, "body_axis": [4.0, 6.0], "tail_len": [3.0, 5.0],
            "distractor_len": [3.0, 5.0], "gap": [1.0, 2.0], "margin": 0.5,
        },
    },
    "arch": {
        "input_size": 16, "classes": 2, "latent_dim": 4, "seg_size": 8,
        "trunk_channels": [4, 6], "img_channels": 8, "seg_channels": [4, 6],
        "dec_seed_channels": 8, "dec_channels": 6, "fcn_channels": 6,
        "hr_mid_channels": 4, "hr_input_channels": 3,
    },
    "train": {
        "batch_size": 6,
        "epochs": {"fcn": 2, "vae": 2, "imgenc": 2, "joint": 2, "hr": 2},
    },
}


def write_config(tmp_path: Path, **overrides) -> Path:
    cfg = json.loads(json.dumps(MICRO_CONFIG))
    cfg["data"]["dir"] = str(tmp_path / "ds")
    cfg["out_dir"] = str(tmp_path / "run")
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def tree_digest(root: Path, skip=("timing",)) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and not any(s in p.name for s in skip):
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig.from_dict(json.loads(json.dumps(MICRO_CONFIG)))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_defaults_when_empty(self):
        cfg = RunConfig.from_dict({})
        assert cfg.seed == 0
        assert cfg.data.n_train == 500
        assert cfg.arch.input_size == 32

    @pytest.mark.parametrize("broken", [
        {"bogus": 1},
        {"data": {"bogus": 1}},
        {"arch": {"bogus": 1}},
        {"train": {"bogus": 1}},
        {"data": {"generator": {"bogus": 1}}},
        {"train": {"seed": 5}},
    ])
    def test_unknown_keys_rejected(self, broken):
        base = json.loads(json.dumps(MICRO_CONFIG))
        for key, val in broken.items():
            if isinstance(val, dict) and isinstance(base.get(key), dict):
                node = base[key]
                for k2, v2 in val.items():
                    if isinstance(v2, dict):
                        node.setdefault(k2, {}).update(v2)
                    else:
                        node[k2] = v2
            else:
                base[key] = val
        with pytest.raises(CvaesegError):
            RunConfig.from_dict(base)

    def test_seed_override_propagates_to_training(self, tmp_path):
        path = write_config(tmp_path)
        cfg = RunConfig.load(path, seed=99)
        assert cfg.seed == 99
        assert cfg.train.seed == 99


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth + train all, shared by the command tests below."""
    tmp_path = tmp_path_factory.mktemp("cli")
    config = write_config(tmp_path)
    assert main(["synth", "--config", str(config)]) == 0
    assert main(["train", "--config", str(config), "--phase", "all"]) == 0
    return tmp_path, config


class TestSynth:
    def test_deterministic_outputs(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["synth", "--config", str(config)]) == 0
        first = tree_digest(tmp_path / "ds")
        assert main(["synth", "--config", str(config)]) == 0
        assert tree_digest(tmp_path / "ds") == first

    def test_counts_written(self, tmp_path, capsys):
        config = write_config(tmp_path)
        main(["synth", "--config", str(config)])
        out = capsys.readouterr().out
        assert "train: 12" in out and "val: 4" in out and "test: 4" in out

    def test_unwritable_dir_exits_2_with_path(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not a directory")
        config = write_config(tmp_path)
        raw = json.loads(config.read_text())
        raw["data"]["dir"] = str(blocker / "sub")
        config.write_text(json.dumps(raw))
        assert main(["synth", "--config", str(config)]) == 2
        assert "blocker" in capsys.readouterr().err


class TestTrain:
    def test_all_phases_write_five_checkpoints(self, pipeline):
        tmp_path, _ = pipeline
        ckpts = sorted(p.name for p in (tmp_path / "run" / "checkpoints").glob("*.ckpt"))
        assert ckpts == ["fcn.ckpt", "hr.ckpt", "imgenc.ckpt", "joint.ckpt", "vae.ckpt"]

    def test_training_curve_figure_written(self, pipeline):
        tmp_path, _ = pipeline
        assert (tmp_path / "run" / "figures" / "train_all.png").exists()

    def test_metrics_logs_have_expected_columns(self, pipeline):
        tmp_path, _ = pipeline
        header = (tmp_path / "run" / "logs" / "joint_metrics.csv").read_text().splitlines()[0]
        assert header == "step,phase,kl,recon_nll,objective"
        timing = (tmp_path / "run" / "logs" / "joint_timing.csv").read_text().splitlines()[0]
        assert timing == "step,phase,wall_time"

    def test_phase_without_prerequisite_exits_2(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["synth", "--config", str(config)]) == 0
        code = main(["train", "--config", str(config), "--phase", "imgenc"])
        assert code == 2
        assert "vae" in capsys.readouterr().err


class TestEval:
    def test_report_contains_all_four_variants(self, pipeline, capsys):
        tmp_path, config = pipeline
        assert main(["eval", "--config", str(config), "--split", "test"]) == 0
        report = json.loads((tmp_path / "run" / "eval" / "eval_test.json").read_text())
        assert [row["variant"] for row in report] == ["fcn", "imgenc", "lr_cvae", "hr_cvae"]
        for row in report:
            assert 0.0 <= row["pixel_accuracy"] <= 1.0
            assert 0.0 <= row["sap"] <= 1.0
            assert set(row["iou_per_class"]) == {"0", "1"}
        assert (tmp_path / "run" / "eval" / "eval_test.csv").exists()
        assert (tmp_path / "run" / "eval" / "eval_test.png").exists()

    def test_missing_checkpoints_exit_2(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["synth", "--config", str(config)]) == 0
        assert main(["eval", "--config", str(config)]) == 2


class TestPredict:
    def test_outputs_and_reproducibility(self, pipeline):
        tmp_path, config = pipeline
        sample = str(tmp_path / "ds" / "test-00000.bin")
        ckpt = str(tmp_path / "run" / "checkpoints" / "joint.ckpt")
        out_a = tmp_path / "pred_a"
        out_b = tmp_path / "pred_b"
        for out in (out_a, out_b):
            code = main(["predict", "--config", str(config), "--checkpoint", ckpt,
                         "--input", sample, "--out", str(out)])
            assert code == 0
        mask_a = (out_a / "test-00000.mask.bin").read_bytes()
        mask_b = (out_b / "test-00000.mask.bin").read_bytes()
        assert mask_a == mask_b
        labels = np.frombuffer(mask_a, dtype=np.uint8)
        assert labels.size == 4 * 4  # joint checkpoint predicts at input/4
        assert labels.max() < 2
        pgm = (out_a / "test-00000.pgm").read_bytes()
        assert pgm.startswith(b"P5\n4 4\n255\n")

    def test_hr_checkpoint_predicts_full_resolution(self, pipeline):
        tmp_path, config = pipeline
        sample = str(tmp_path / "ds" / "test-00001.bin")
        ckpt = str(tmp_path / "run" / "checkpoints" / "hr.ckpt")
        out = tmp_path / "pred_hr"
        assert main(["predict", "--config", str(config), "--checkpoint", ckpt,
                     "--input", sample, "--out", str(out)]) == 0
        labels = np.frombuffer((out / "test-00001.mask.bin").read_bytes(), dtype=np.uint8)
        assert labels.size == 16 * 16

    def test_vae_checkpoint_rejected(self, pipeline, capsys):
        tmp_path, config = pipeline
        sample = str(tmp_path / "ds" / "test-00000.bin")
        ckpt = str(tmp_path / "run" / "checkpoints" / "vae.ckpt")
        assert main(["predict", "--config", str(config), "--checkpoint", ckpt,
                     "--input", sample]) == 1

    def test_missing_arguments_exit_1(self, pipeline):
        _, config = pipeline
        assert main(["predict", "--config", str(config)]) == 1


class TestVerify:
    def test_default_run_exits_zero(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["verify", "--config", str(config)]) == 0
        out = capsys.readouterr().out
        assert "PASS overall" in out
        assert (tmp_path / "run" / "verify_report.txt").exists()
        assert (tmp_path / "run" / "figures" / "verify.png").exists()

    def test_injected_fault_exits_3_naming_check(self, tmp_path, capsys, monkeypatch):
        import cvaeseg.gaussian as gaussian_mod
        true_kl = gaussian_mod.kl_diag
        monkeypatch.setattr(gaussian_mod, "kl_diag", lambda q, p: true_kl(q, p) * -1.0)
        config = write_config(tmp_path)
        assert main(["verify", "--config", str(config)]) == 3
        captured = capsys.readouterr()
        assert "kl" in captured.err


class TestUsage:
    def test_help_for_every_command(self, capsys):
        for cmd in ("synth", "train", "eval", "predict", "verify"):
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
            assert "--config" in capsys.readouterr().out

    def test_bad_config_json_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--config", str(bad)]) == 1

    def test_unknown_config_key_exits_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"mystery": True}))
        assert main(["synth", "--config", str(bad)]) == 1
