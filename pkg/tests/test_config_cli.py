import os

import numpy as np
import pytest

from turnpike_resnet.cli import main
from turnpike_resnet.config import RECIPES, ConfigError, ExperimentConfig
from turnpike_resnet.data import read_csv
from turnpike_resnet.resnet import init_params, load_checkpoint, save_checkpoint

TINY = ["--set", "dataset.n_per_class=15", "--set", "network.depth=4",
        "--set", "network.hidden_dim=4", "--epochs", "5"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig.build()
        assert cfg["network"]["depth"] == 30 and cfg.num_classes == 2
        assert cfg.epsilon() == pytest.approx(0.1 * np.log(19))

    def test_recipes(self):
        cfg = ExperimentConfig.build("two-spirals")
        n, o = cfg["network"], cfg["objective"]
        assert (n["arch"], n["depth"], n["hidden_dim"], cfg.activations) == (
            "bottleneck", 30, 8, ("tanh", "identity"))
        assert (cfg["smoothing"]["p_d"], o["gamma"], o["reg_r"], cfg["optimizer"]["lr"]) == (
            0.95, 3.0, 0.005, 0.1)
        assert cfg["dataset"]["n_per_class"] == 240
        m = ExperimentConfig.build("mnist-subset", overrides=["dataset.images_path=a",
                                                              "dataset.labels_path=b"])
        assert (m["network"]["hidden_dim"], m.activations, m["smoothing"]["p_d"]) == (
            128, ("relu", "identity"), 0.91)
        assert (m["objective"]["gamma"], m["objective"]["reg_r"]) == (1.0, 1e-5)
        assert set(RECIPES) == {"two-spirals", "mnist-subset"}

    def test_text_and_override_precedence(self):
        cfg = ExperimentConfig.build("two-spirals", "[network]\ndepth = 12\n",
                                     ["network.depth=7"])
        assert cfg["network"]["depth"] == 7
        cfg = ExperimentConfig.build(None, "[optimizer]\ndecay_biases = no\n")
        assert cfg["optimizer"]["decay_biases"] is False

    @pytest.mark.parametrize("text,match", [
        ("[network]\nwidth = 3\n", "unknown key"),
        ("[model]\ndepth = 3\n", "unknown section"),
        ("[network]\ndepth = three\n", "cannot parse"),
        ("[network]\narch = conv\n", "arch"),
        ("[network]\nactivations = tanh\n", "activation"),
        ("[smoothing]\np_d = 0.4\n", "p_d"),
        ("[objective]\ngamma = -1\n", "gamma"),
        ("[objective]\nstage_mode = l1\n", "stage_mode"),
        ("[objective]\nterminal_loss = mse\n", "terminal_loss"),
        ("[optimizer]\nbeta2 = 1.0\n", "beta2"),
        ("[dataset]\nkind = mnist\n", "images_path"),
        ("[network]\nstate_dim = 1\n", "state_dim"),
        ("garbage", "malformed"),
    ])
    def test_rejects(self, text, match):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig.build(None, text)

    def test_low_confidence_for_ten_classes(self):
        base = ["dataset.kind=mnist", "dataset.images_path=a", "dataset.labels_path=b",
                "network.state_dim=784"]
        ExperimentConfig.build(None, None, base + ["smoothing.p_d=0.5"])
        with pytest.raises(ConfigError):
            ExperimentConfig.build(None, None, base + ["smoothing.p_d=0.05"])

    def test_effective_text_roundtrip(self):
        cfg = ExperimentConfig.build("two-spirals", None, ["objective.reg_r=0.1234567890123"])
        again = ExperimentConfig.build(None, cfg.effective_text())
        assert again.values == cfg.values
        assert again.effective_text() == cfg.effective_text()

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.build(None, None, ["depth=3"])
        with pytest.raises(ConfigError):
            ExperimentConfig.build(None, None, ["network.width=3"])


class TestCli:
    def test_gen_data(self, tmp_path, capsys):
        code, out, _ = run(["gen-data", "--out", str(tmp_path), "--set", "dataset.n_per_class=12"],
                           capsys)
        assert code == 0
        ds = read_csv(tmp_path / "dataset.csv", 2)
        assert ds.size == 24 and "24 samples" in out

    def test_train_artifacts_and_diagnose(self, tmp_path, capsys):
        code, out, _ = run(["train", "--out", str(tmp_path)] + TINY, capsys)
        assert code == 0
        for name in ("config.ini", "history.csv", "model.ckpt", "profile.csv", "report.txt"):
            assert (tmp_path / name).is_file()
        assert out.startswith("accuracy=") and "entry_layer=" in out and "objective=" in out
        assert len((tmp_path / "history.csv").read_text().splitlines()) == 6
        train_profile = (tmp_path / "profile.csv").read_bytes()
        diag = tmp_path / "diag"
        code, out, _ = run(["diagnose", "--config", str(tmp_path / "config.ini"),
                            "--checkpoint", str(tmp_path / "model.ckpt"), "--out", str(diag),
                            "--sweep"], capsys)
        assert code == 0
        assert (diag / "profile.csv").read_bytes() == train_profile
        sweeps = sorted(diag.glob("report_sweep_*.txt"))
        assert len(sweeps) == 10
        sets = []
        for path in sweeps:
            kv = dict(line.split(" = ") for line in path.read_text().splitlines())
            sets.append(set(kv["q_eps"].split(",")) - {""})
        for a, b in zip(sets, sets[1:]):
            assert a <= b

    def test_rerun_from_effective_config(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["train", "--out", str(a)] + TINY, capsys)[0] == 0
        assert run(["train", "--config", str(a / "config.ini"), "--out", str(b)], capsys)[0] == 0
        for name in ("history.csv", "profile.csv", "model.ckpt", "report.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_everything_under_output_dir(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        out = tmp_path / "nested" / "run"
        assert run(["train", "--out", str(out)] + TINY, capsys)[0] == 0
        assert sorted(os.listdir(tmp_path)) == ["nested"]

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_text("# turnpike-resnet checkpoint v1\narch plain\n")
        code, _, err = run(["diagnose", "--checkpoint", str(tmp_path / "bad.ckpt"),
                            "--out", str(tmp_path)], capsys)
        assert code == 1 and "bad.ckpt:2" in err

    def test_dim_mismatch(self, tmp_path, capsys):
        save_checkpoint(tmp_path / "m.ckpt", init_params("plain", 2, 3, ("tanh",)))
        code, _, err = run(["diagnose", "--checkpoint", str(tmp_path / "m.ckpt"),
                            "--out", str(tmp_path)], capsys)
        assert code == 1 and "3" in err and "2" in err and "dim" in err

    def test_validation_before_work(self, tmp_path, capsys):
        out = tmp_path / "never"
        code, _, err = run(["train", "--out", str(out), "--set", "smoothing.p_d=0.3"], capsys)
        assert code == 1 and "p_d" in err and not out.exists()

    def test_crop_without_turnpike(self, tmp_path, capsys, caplog):
        p = init_params("bottleneck", 6, 2, ("tanh", "identity"), 4, seed=0)
        save_checkpoint(tmp_path / "m.ckpt", p.with_flat(4 * p.flat))
        code, out, err = run(["crop", "--checkpoint", str(tmp_path / "m.ckpt"),
                              "--out", str(tmp_path), "--set", "dataset.n_per_class=20",
                              "--set", "network.depth=6"], capsys)
        assert code == 0 and "no turnpike" in err + caplog.text
        assert not (tmp_path / "cropped.ckpt").exists()

    def test_crop_clamps_margin(self, tmp_path, capsys):
        # zero network on points already at the minimizers: entry layer 0
        p = init_params("plain", 5, 2, ("tanh",)).zeros_like()
        save_checkpoint(tmp_path / "m.ckpt", p)
        (tmp_path / "c.ini").write_text(
            "[dataset]\nn_per_class = 5\nnoise_std = 0.0\n[network]\narch = plain\n"
            "activations = tanh\ndepth = 5\n[diagnostics]\nepsilon = 100\nmargin = 9\n")
        code, out, _ = run(["crop", "--config", str(tmp_path / "c.ini"),
                            "--checkpoint", str(tmp_path / "m.ckpt"), "--out", str(tmp_path)],
                           capsys)
        assert code == 0 and "clamped" in out
        q, _ = load_checkpoint(tmp_path / "cropped.ckpt")
        assert q.depth == 5
        summary = (tmp_path / "crop_summary.txt").read_text()
        assert "entry_layer = 0" in summary and "cropped_depth = 5" in summary

    def test_gradcheck_default(self, capsys):
        code, out, _ = run(["grad-check"], capsys)
        assert code == 0
        worst = float(out.strip().splitlines()[-1].split()[4])
        assert worst < 1e-5 and "PASS" in out
        for mode in ("none", "soft_ce", "hard_ce"):
            assert mode in out

    def test_gradcheck_zero_trials(self, capsys, caplog):
        code, out, err = run(["grad-check", "--trials", "0"], capsys)
        assert code == 0 and "vacuous" in out and "0 trials" in err + caplog.text

    def test_gradcheck_size_limits(self, capsys):
        assert run(["grad-check", "--state-dim", "6"], capsys)[0] == 1
        assert run(["grad-check", "--depth", "4"], capsys)[0] == 1
        assert run(["grad-check", "--samples", "9"], capsys)[0] == 1

    def test_numerical_failure_exit(self, tmp_path, capsys):
        code, _, err = run(["train", "--out", str(tmp_path), "--set", "optimizer.lr=1e200",
                            "--set", "network.arch=plain", "--set", "network.activations=identity",
                            "--set", "dataset.n_per_class=5", "--set", "network.depth=3",
                            "--epochs", "3"], capsys)
        assert code == 2 and "diverged" in err

    def test_missing_mnist_files(self, tmp_path, capsys):
        code, _, err = run(["gen-data", "--recipe", "mnist-subset", "--out", str(tmp_path),
                            "--set", f"dataset.images_path={tmp_path}/nope",
                            "--set", f"dataset.labels_path={tmp_path}/nope"], capsys)
        assert code == 1 and "nope" in err

    def test_mnist_gen_data(self, tmp_path, capsys, mnist_idx):
        code, out, _ = run(["gen-data", "--recipe", "mnist-subset", "--out", str(tmp_path),
                            "--limit", "30", "--set", f"dataset.images_path={mnist_idx[0]}",
                            "--set", f"dataset.labels_path={mnist_idx[1]}"], capsys)
        assert code == 0 and "30 samples with 784 features" in out
