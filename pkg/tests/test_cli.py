"""The ``hip`` command line: config resolution, reproducibility and exit codes."""
import numpy as np
import pytest

from hiperceiver import cli
from hiperceiver.checkpoint import load_checkpoint
from hiperceiver.pgm import read_pgm

FAST = ["--grid", "16", "--steps", "3", "--batch-size", "2"]


def run(argv, **env):
    return cli.run(argv, environ=env)


class TestConfig:
    def test_print_config_roundtrip(self, tmp_path, capsys):
        text = run(["print-config", "--seed", "5", "--mask-mode", "groupwise"])
        assert capsys.readouterr().out == text
        path = tmp_path / "c.toml"
        path.write_text(text)
        cfg = cli.load_toml(path)
        assert cfg.seed == 5 and cfg.mask.mode == "groupwise"
        assert cli.dump_toml(cfg) == text

    def test_env_seed_overrides_flag(self):
        args = cli.parser().parse_args(["print-config", "--seed", "1"])
        assert cli.resolve_config(args, {"HIP_SEED": "9"}).seed == 9
        assert cli.resolve_config(args, {}).seed == 1

    def test_task_selects_dataset(self):
        args = cli.parser().parse_args(["finetune", "--task", "segment"])
        assert cli.resolve_config(args, {}).dataset.kind == "shapes-seg"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('seed = 1\nlearning_rate = 0.1\n')
        assert cli.main(["print-config", "--config", str(path)]) == 2


class TestRuns:
    def test_pretrain_is_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["pretrain", *FAST, "--out", str(a)])
        run(["pretrain", "--config", str(a / "config.toml"), "--out", str(b)])
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        pa, oa, _ = load_checkpoint(a / "checkpoint.hipckpt")
        pb, ob, _ = load_checkpoint(b / "checkpoint.hipckpt")
        assert all(pa[n].tobytes() == pb[n].tobytes() for n in pa)
        assert all(oa[n].tobytes() == ob[n].tobytes() for n in oa)

    def test_seed_changes_run(self, tmp_path):
        run(["pretrain", *FAST, "--out", str(tmp_path / "a")])
        run(["pretrain", *FAST, "--out", str(tmp_path / "b")], HIP_SEED="4")
        assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()

    def test_finetune_then_eval(self, tmp_path, capsys):
        res = run(["finetune", *FAST, "--out", str(tmp_path)])
        again = run(["eval", "--checkpoint", str(tmp_path / "checkpoint.hipckpt")])
        assert again == res
        assert capsys.readouterr().out.splitlines()[-1].startswith("accuracy=")

    def test_analyze_pos(self, tmp_path):
        run(["pretrain", *FAST, "--out", str(tmp_path / "r")])
        res = run(["analyze-pos", "--checkpoint", str(tmp_path / "r/checkpoint.hipckpt"), "--out", str(tmp_path / "p")])
        assert res["channels"] == 32 and "locality_gap" in res
        assert (tmp_path / "p/pca_variance.csv").exists()
        assert read_pgm(tmp_path / "p/channel_00.pgm").shape == (16, 16)


class TestDumpMasks:
    def test_rate_zero_white(self, tmp_path):
        res = run(["dump-masks", "--grid", "32", "--mask-rate", "0", "--out", str(tmp_path)])
        assert res["masked"] == 0
        assert np.all(read_pgm(tmp_path / "mask_uniform.pgm") == 255)

    def test_groupwise_period(self, tmp_path):
        res = run(["dump-masks", "--grid", "64", "--mask-mode", "groupwise", "--out", str(tmp_path)])
        img = read_pgm(tmp_path / "mask_groupwise.pgm")
        assert res["lag"] == 4 and np.array_equal(img[:4], img[4:8])


class TestExitCodes:
    def test_success(self, tmp_path):
        assert cli.main(["dump-masks", "--grid", "16", "--out", str(tmp_path)]) == 0

    def test_eval_without_checkpoint(self, capsys):
        assert cli.main(["eval"]) == 2
        assert "--checkpoint" in capsys.readouterr().err

    def test_unknown_preset(self, tmp_path):
        assert cli.main(["pretrain", "--preset", "nope", "--out", str(tmp_path)]) == 2

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["pretrain", "--mask-mode", "diagonal"])
        assert exc.value.code == 2


class TestBench:
    def test_bench_csv(self, tmp_path):
        cfg = tmp_path / "b.toml"
        cfg.write_text('command = "bench"\n[bench]\nresolutions = [256]\npresets = ["hip16-toy", "hip16-toy-flat"]\n'
                       'batch_size = 1\nwarmup = 0\nsteps = 1\n')
        rows = run(["bench", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert [r["preset"] for r in rows] == ["hip16-toy", "hip16-toy-flat"]
        lines = (tmp_path / "o/bench.csv").read_text().splitlines()
        assert lines[0] == "preset,tokens,batch,analytic_macs,median_s,steps_per_sec" and len(lines) == 3
        assert rows[0]["analytic_macs"] < rows[1]["analytic_macs"]
