import json

import numpy as np
import pytest

from fslab.checkpoint import save_checkpoint
from fslab.cli import build_parser, main
from fslab.network import init_velocity_net

SUBCOMMANDS = [
    "gen-data", "train", "sample", "eval-sweep", "verify-identities", "rescale-distill"
]


def write_tiny_config(tmp_path, **over):
    doc = {
        "dataset": "gauss1",
        "objective": "fm",
        "steps": 15,
        "batch": 8,
        "lr": 1e-2,
        "seed": 0,
        "hidden": 8,
        "depth": 2,
        "n_freqs": 4,
        "n_train": 128,
        "eval_n": 32,
        "sampler_eval": [1],
        "output_dir": str(tmp_path / "run"),
        "log_every": 5,
    }
    doc.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def save_tiny_net(tmp_path, name="net.fslb", seed=0):
    net = init_velocity_net(dim=2, hidden=8, depth=2, n_classes=1, seed=seed, n_freqs=4)
    path = tmp_path / name
    save_checkpoint(net, path)
    return path


class TestHelp:
    def test_top_level_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        assert "gen-data" in capsys.readouterr().out

    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_subcommand_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        assert "--" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["gen-data", "--bogus"])
        assert e.value.code == 2
        assert "usage" in capsys.readouterr().err


class TestGenData:
    def test_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "pts.csv"
        rc = main(["gen-data", "--kind", "gauss8", "--n", "50", "--seed", "3",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "x0,x1,label"
        assert len(lines) == 51


class TestTrainSample:
    def test_train_then_sample(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        ckpt = tmp_path / "run" / "model.fslb"
        assert ckpt.exists()
        out = tmp_path / "samples.csv"
        rc = main(["sample", "--ckpt", str(ckpt), "--method", "euler",
                   "--nfe", "1", "--n", "20", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "x0,x1"
        assert len(lines) == 21

    def test_train_set_overrides(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path)
        rc = main(["train", "--config", str(cfg), "--set", "steps=3"])
        assert rc == 0
        assert "3 steps" in capsys.readouterr().out


class TestEvalSweep:
    def test_row_count_exact(self, tmp_path):
        ckpt = save_tiny_net(tmp_path)
        out = tmp_path / "sweep.csv"
        rc = main([
            "eval-sweep",
            "--model", f"a={ckpt}:euler",
            "--model", f"b={ckpt}:meanflow",
            "--dataset", "gauss1",
            "--nfe", "1,2,4",
            "--seeds", "0,1",
            "--n", "32",
            "--out", str(out),
        ])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "method,nfe,seed,n,mmd2,w2"
        assert len(lines) - 1 == 2 * 3 * 2  # methods x nfe x seeds

    def test_teacher_reference_row(self, tmp_path):
        ckpt = save_tiny_net(tmp_path)
        out = tmp_path / "sweep.csv"
        main([
            "eval-sweep", "--model", f"teacher={ckpt}:euler",
            "--dataset", "gauss1", "--nfe", "1", "--seeds", "0",
            "--n", "16", "--out", str(out),
        ])
        rows = out.read_text().splitlines()[1:]
        assert any(r.startswith("teacher,100,") for r in rows)

    def test_bad_model_spec(self, tmp_path, capsys):
        rc = main(["eval-sweep", "--model", "nonsense", "--dataset", "gauss1",
                   "--nfe", "1", "--out", str(tmp_path / "x.csv")])
        assert rc == 2


class TestVerifyIdentities:
    def test_healthy_build_exit_zero(self, capsys):
        rc = main(["verify-identities", "--seed", "7"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 6

    def test_corrupted_build_exit_nonzero(self, monkeypatch, capsys):
        from fslab import schedules as sch

        orig = sch.wrap_fm_model_as_trigflow
        monkeypatch.setattr(
            sch, "wrap_fm_model_as_trigflow",
            lambda v: (lambda x, t, c=None: 1.01 * orig(v)(x, t, c)),
        )
        rc = main(["verify-identities", "--seed", "7"])
        assert rc == 1


class TestRescaleDistill:
    def test_smoke(self, tmp_path, capsys):
        teacher = init_velocity_net(
            dim=2, hidden=8, depth=2, n_classes=8, seed=1, t_scale=1000.0, n_freqs=4
        )
        tpath = tmp_path / "teacher.fslb"
        save_checkpoint(teacher, tpath)
        out = tmp_path / "student.fslb"
        rc = main([
            "rescale-distill", "--teacher", str(tpath), "--out", str(out),
            "--steps", "40", "--lr", "1e-3", "--batch", "16",
            "--n-data", "128", "--dataset", "gauss8",
        ])
        assert rc == 0
        assert out.exists()


def test_parser_covers_all_subcommands():
    parser = build_parser()
    actions = [a for a in parser._actions if hasattr(a, "choices") and a.choices]
    assert set(SUBCOMMANDS) <= set(actions[-1].choices)
