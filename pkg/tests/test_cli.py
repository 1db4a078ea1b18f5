import json

import numpy as np
import pytest

from boolnet import circuit as circ
from boolnet.checkpoint import save_checkpoint
from boolnet.cli import RUN_DEFAULTS, UserError, main, resolve_run
from boolnet.models import PRESETS

from conftest import random_frozen_network, synthetic_mnist

SMALL_RUN = {
    "dataset": "mnist",
    "arch": "dense",
    "widths": [400, 400],
    "K": 8,
    "tau": 10.0,
    "batch_size": 32,
    "eval_interval": 50,
    "val_size": 60,
    "learning_rate": 0.05,
}


@pytest.fixture
def workspace(tmp_path):
    data = synthetic_mnist(tmp_path / "data")
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(SMALL_RUN))
    return tmp_path, data, cfg


def run_train(tmp_path, data, cfg, out, *extra):
    return main(["train", "--config", str(cfg), "--data-dir", str(data), "--out", str(tmp_path / out),
                 "--steps", "100", "--no-aug", "--seed", "7", *extra])


@pytest.fixture
def trained(workspace):
    tmp_path, data, cfg = workspace
    assert run_train(tmp_path, data, cfg, "a") == 0
    return tmp_path, data, tmp_path / "a"


class TestResolve:
    def test_cifar_tiny(self):
        run = resolve_run(preset="cifar-conv-T")
        assert (run["k"], run["thresholds"], run["tau"], run["patience"]) == (64, 3, 20, 100)
        assert run["arch"] == "conv" and run["dataset"] == "cifar10"

    def test_mnist_medium(self):
        run = resolve_run(preset="mnist-conv-M")
        assert (run["k"], run["tau"]) == (256, 63)

    def test_presets_cover_table(self):
        for name in ("mnist-conv-S", "mnist-conv-M", "cifar-conv-T", "cifar-conv-S", "cifar-conv-M",
                     "cifar-conv-L"):
            assert name in PRESETS
        assert resolve_run(preset="cifar-conv-L")["patience"] == 15000

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rat": 0.1}))
        with pytest.raises(UserError, match="learning_rat"):
            resolve_run(cfg)

    def test_unknown_preset(self):
        with pytest.raises(UserError):
            resolve_run(preset="nope")

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"preset": "cifar-conv-T", "tau": 5.0, "seed": 3}))
        run = resolve_run(cfg, overrides={"seed": 9, "total_steps": None})
        assert run["k"] == 64 and run["tau"] == 5.0 and run["seed"] == 9
        assert run["total_steps"] == PRESETS["cifar-conv-T"]["total_steps"]

    def test_defaults_are_complete(self):
        assert set(resolve_run()) == set(RUN_DEFAULTS)


class TestTrain:
    def test_outputs(self, trained):
        _, _, out = trained
        for name in ("config.json", "metrics.jsonl", "last.npz", "best.npz"):
            assert (out / name).exists()
        recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs] == [50, 100]
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["seed"] == 7 and cfg["total_steps"] == 100 and cfg["augment"] is False

    def test_deterministic(self, workspace):
        tmp_path, data, cfg = workspace
        assert run_train(tmp_path, data, cfg, "a") == 0
        assert run_train(tmp_path, data, cfg, "b") == 0
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_config_echo_reruns(self, trained):
        tmp_path, _, out = trained
        echoed = json.loads((out / "config.json").read_text())
        echoed["out"] = str(tmp_path / "again")
        cfg2 = tmp_path / "echo.json"
        cfg2.write_text(json.dumps(echoed))
        assert main(["train", "--config", str(cfg2)]) == 0
        assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()

    def test_missing_data(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(SMALL_RUN))
        code = main(["train", "--config", str(cfg), "--data-dir", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o"), "--steps", "1"])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_env_data_dir(self, workspace, monkeypatch):
        tmp_path, data, cfg = workspace
        monkeypatch.setenv("BOOLNET_DATA_DIR", str(data))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "e"), "--steps", "5",
                     "--no-aug"]) == 0

    def test_nan_abort_exit_code(self, workspace, monkeypatch):
        tmp_path, data, cfg = workspace
        from boolnet import training

        def bad_loss(logits, y):
            return float("nan"), np.zeros_like(logits)

        monkeypatch.setattr(training, "cross_entropy_loss", bad_loss)
        assert run_train(tmp_path, data, cfg, "nan") == 2


class TestPipeline:
    def test_compile_prune_eval_bench(self, trained, capsys):
        tmp_path, data, out = trained
        capsys.readouterr()
        assert main(["compile", str(out / "best.npz"), "--out", str(tmp_path / "m.bnet")]) == 0
        assert capsys.readouterr().out.strip() == "neurons=800"

        assert main(["prune", str(tmp_path / "m.bnet"), "--out", str(tmp_path / "p.bnet")]) == 0
        report = capsys.readouterr().out.strip()
        neurons, bops = (int(part.split("=")[1]) for part in report.split())
        assert report.startswith("neurons=800 bops=") and bops <= neurons

        assert main(["prune", str(tmp_path / "p.bnet"), "--out", str(tmp_path / "pp.bnet")]) == 0
        assert capsys.readouterr().out.strip() == f"neurons={bops} bops={bops}"
        assert (tmp_path / "p.bnet").read_text() == (tmp_path / "pp.bnet").read_text()

        assert main(["eval", str(tmp_path / "p.bnet"), "--data-dir", str(data)]) == 0
        net_lines = capsys.readouterr().out.splitlines()
        assert main(["eval", str(out / "best.npz"), "--data-dir", str(data)]) == 0
        ckpt_lines = capsys.readouterr().out.splitlines()
        assert net_lines[0] == ckpt_lines[0] and net_lines[0].startswith("discretized_acc=")
        assert ckpt_lines[1].startswith("relaxed_acc=") and ckpt_lines[2].startswith("gap=")
        confusion = json.loads(ckpt_lines[-1].split("=", 1)[1])
        assert np.sum(confusion) == 100

        assert main(["bench", str(tmp_path / "p.bnet"), "--samples", "256", "--scalar-samples", "4"]) == 0
        bench = json.loads(capsys.readouterr().out)
        assert {"scalar_samples_per_sec", "packed_samples_per_sec", "speedup"} <= set(bench)

    def test_frozen_checkpoint_gap_zero(self, workspace, rng, capsys):
        tmp_path, data, _ = workspace
        net = random_frozen_network(rng, 784, [400, 200], 10, tau=5.0)
        save_checkpoint(tmp_path / "f.npz", net, extra={"run": {"dataset": "mnist", "thresholds": 1}})
        assert main(["eval", str(tmp_path / "f.npz"), "--data-dir", str(data)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert "gap=0.0000" in lines

    def test_prune_refuses_unverified(self, trained, monkeypatch, capsys):
        tmp_path, _, out = trained
        main(["compile", str(out / "best.npz"), "--out", str(tmp_path / "m.bnet")])
        real_prune = circ.prune

        def broken(c):
            pruned, bops = real_prune(c)
            pruned.outputs[0, 0] = circ.CONST1 if pruned.outputs[0, 0] != circ.CONST1 else circ.CONST0
            return pruned, bops

        monkeypatch.setattr(circ, "prune", broken)
        code = main(["prune", str(tmp_path / "m.bnet"), "--out", str(tmp_path / "bad.bnet")])
        assert code == 2
        assert not (tmp_path / "bad.bnet").exists()

    def test_bad_netlist(self, tmp_path, capsys):
        (tmp_path / "x.bnet").write_text("garbage\n")
        assert main(["bench", str(tmp_path / "x.bnet")]) == 1
        assert "error" in capsys.readouterr().err

    def test_plot(self, trained):
        pytest.importorskip("matplotlib")
        tmp_path, _, out = trained
        assert main(["plot", str(out / "metrics.jsonl"), "--out", str(tmp_path / "c.png")]) == 0
        assert (tmp_path / "c.png").stat().st_size > 0
