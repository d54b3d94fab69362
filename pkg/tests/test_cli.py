import json

import pytest

from qtape import cli
from qtape import data as D
from qtape import engine as E
from qtape import training as T


@pytest.fixture()
def config_path(tmp_path):
    spec = E.make_residual_spec(base_channels=4, blocks_per_stage=1,
                                stages=2)
    cfg = T.TrainConfig(mode="exact", bits=8, batch_size=8, total_iters=4,
                        seed=0, lr_schedule=[(0, 0.01)], hflip=False,
                        translate=False)
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"network": spec.to_json(),
                                "train": cfg.to_json()}))
    return str(path)


@pytest.fixture()
def data_dir(tmp_path):
    d = tmp_path / "cifar"
    D.make_synthetic_cifar_dir(str(d), seed=0, train_n=64, test_n=16)
    return str(d)


class TestCli:
    def test_quantcheck_exits_zero(self, capsys):
        assert cli.main(["quantcheck", "--bits", "4",
                         "--values", "50000"]) == 0
        out = capsys.readouterr().out
        assert "[PASS] K=4" in out

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["frobnicate"])
        assert e.value.code == 2

    def test_missing_required_flag_exits_two(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["train"])
        assert e.value.code == 2

    def test_bad_config_path_exits_one(self, capsys):
        assert cli.main(["memreport", "--config", "/nonexistent.json"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_train_writes_log(self, config_path, data_dir, tmp_path, capsys):
        log = tmp_path / "log.csv"
        rc = cli.main(["train", "--config", config_path, "--data", data_dir,
                       "--out", str(log)])
        assert rc == 0
        lines = log.read_text().strip().split("\n")
        assert lines[0] == "iter,loss,lr,elapsed_ms"
        assert len(lines) == 5

    def test_train_seed_determinism_modulo_timing(self, config_path,
                                                  data_dir, tmp_path):
        logs = []
        for name in ("a.csv", "b.csv"):
            log = tmp_path / name
            cli.main(["train", "--config", config_path, "--data", data_dir,
                      "--seed", "7", "--out", str(log)])
            rows = [line.split(",")[:3] for line in
                    log.read_text().strip().split("\n")]
            logs.append(rows)
        assert logs[0] == logs[1]

    def test_memreport_prints_ratio(self, config_path, capsys):
        assert cli.main(["memreport", "--config", config_path,
                         "--bits", "4", "--batch", "8"]) == 0
        out = capsys.readouterr().out
        assert "ratio vs exact store" in out

    def test_gradcheck_csv(self, config_path, data_dir, tmp_path, capsys):
        out_csv = tmp_path / "grad.csv"
        rc = cli.main(["gradcheck", "--config", config_path, "--data",
                       data_dir, "--bits", "8", "--batches", "3",
                       "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().strip().split("\n")
        assert lines[0] == "layer,kind,approx_error,sgd_noise,ratio"

    def test_synth_dataset_flag(self, tmp_path, capsys):
        rc = cli.main(["sweep", "--depths", "3", "--bits", "8",
                       "--batches", "2", "--synth", "120", "--seed", "3"])
        assert rc == 0
        assert "depth   3" in capsys.readouterr().out

    def test_sweep_csv_deterministic(self, data_dir, tmp_path):
        outs = []
        for name in ("s1.csv", "s2.csv"):
            path = tmp_path / name
            rc = cli.main(["sweep", "--depths", "3,4", "--bits", "8",
                           "--batches", "2", "--data", data_dir,
                           "--out", str(path)])
            assert rc == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]
