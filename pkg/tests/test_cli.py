import csv
import json

import numpy as np
import pytest

from bionas import cli
from bionas.data import write_cifar10_bin
from bionas.persistence import save_genotype
from bionas.supernet import Genotype
from bionas.trainer import CancelToken
from fixtures import DESK_GENOTYPE_DICT

SMALL = ["--per-class", "12"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_genotype(Genotype.from_dict(DESK_GENOTYPE_DICT), d / "g.json")
    assert cli.main(["train", "--genotype", str(d / "g.json"), "--out", str(d / "train"), "--epochs", "2"] + SMALL) == 0
    return d


def test_search_writes_artifacts(tmp_path):
    rc = cli.main(["--seed", "3", "search", "--engine", "darts", "--epochs", "1", "--out", str(tmp_path)] + SMALL)
    assert rc == 0
    g = json.loads((tmp_path / "genotype.json").read_text())
    assert g["version"] == 1 and len(g["normal"]) == 4
    assert (tmp_path / "config.toml").exists() and (tmp_path / "search_log.csv").exists()


def test_train_artifacts(trained):
    out = trained / "train"
    rows = list(csv.DictReader(open(out / "train_log.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert json.loads((out / "result.json").read_text())["epochs"] == 2
    assert (out / "checkpoint.bin").read_bytes()[:8] == b"BIONAS01"


def test_resume_continues_log(trained, tmp_path):
    out = tmp_path / "r"
    rc = cli.main(["train", "--genotype", str(trained / "g.json"), "--out", str(out), "--epochs", "3",
                   "--resume", str(trained / "train" / "checkpoint.bin")] + SMALL)
    assert rc == 0 and json.loads((out / "result.json").read_text())["epochs"] == 3
    assert [r["epoch"] for r in csv.DictReader(open(out / "train_log.csv"))] == ["2"]


@pytest.mark.parametrize("kind,extra", [("fgsm", ["--epsilon", "0.1"]), ("pgd", ["--steps", "3"]),
                                         ("square", ["--steps", "20"]), ("one_pixel", ["--steps", "2"])])
def test_attack_rows(trained, tmp_path, kind, extra):
    out = tmp_path / "a.csv"
    rc = cli.main(["attack", "--kind", kind, "--checkpoint", str(trained / "train" / "checkpoint.bin"), "--genotype",
                   str(trained / "g.json"), "--n-samples", "6", "--out", str(out)] + extra + SMALL)
    assert rc == 0
    (row,) = list(csv.DictReader(open(out)))
    assert row["attack"] == kind and row["n_samples"] == "6"
    assert 0.0 <= float(row["robust_acc"]) <= float(row["clean_acc"]) <= 1.0 or kind == "square"


def test_analyze_weights(trained, tmp_path):
    rc = cli.main(["analyze", "weights", "--genotype", str(trained / "g.json"), "--checkpoint",
                   str(trained / "train" / "checkpoint.bin"), "--out", str(tmp_path)] + SMALL)
    assert rc == 0 and "variance" in json.loads((tmp_path / "weightstats_summary.json").read_text())


def test_data_synth(tmp_path):
    assert cli.main(["data", "synth", "--out", str(tmp_path / "s.npz"), "--per-class", "4"]) == 0
    assert np.load(tmp_path / "s.npz")["images"].shape == (12, 3, 8, 8)


def test_fetch_check(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("data_batch_1.bin", "test_batch.bin"):
        write_cifar10_bin(tmp_path / name, rng.integers(0, 256, (4, 3, 32, 32)), rng.integers(0, 10, 4))
    assert cli.main(["data", "fetch-check", "--data-path", str(tmp_path)]) == 0


class TestExitCodes:
    def test_bad_genotype(self, tmp_path):
        (tmp_path / "g.json").write_text('{"version": 7, "normal": [], "reduce": []}')
        assert cli.main(["train", "--genotype", str(tmp_path / "g.json"), "--out", str(tmp_path)]) == 2

    def test_bad_config(self, trained, tmp_path):
        (tmp_path / "c.toml").write_text("lr = -1.0\n")
        assert cli.main(["train", "--genotype", str(trained / "g.json"), "--config", str(tmp_path / "c.toml"),
                         "--out", str(tmp_path)]) == 2

    def test_threads(self):
        assert cli.main(["--threads", "0", "data", "synth"]) == 2

    def test_cifar_without_path(self, tmp_path):
        assert cli.main(["data", "fetch-check"]) == 2

    def test_missing_data(self, tmp_path):
        assert cli.main(["data", "fetch-check", "--data-path", str(tmp_path)]) == 3

    def test_missing_checkpoint(self, trained, tmp_path):
        assert cli.main(["attack", "--kind", "fgsm", "--checkpoint", str(tmp_path / "none.bin"), "--genotype",
                         str(trained / "g.json")]) == 3

    def test_corrupt_checkpoint(self, trained, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"garbage")
        assert cli.main(["attack", "--kind", "fgsm", "--checkpoint", str(tmp_path / "c.bin"), "--genotype",
                         str(trained / "g.json")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self, trained, tmp_path):
        (tmp_path / "c.toml").write_text("lr = 1e30\nclip_norm = 1e300\n")
        assert cli.main(["train", "--genotype", str(trained / "g.json"), "--config", str(tmp_path / "c.toml"),
                         "--out", str(tmp_path), "--epochs", "3"] + SMALL) == 4

    def test_interrupt_flushes(self, trained, tmp_path, monkeypatch):
        def cancelled():
            t = CancelToken()
            t.cancel()
            return t
        monkeypatch.setattr(cli, "_install_cancel", cancelled)
        rc = cli.main(["train", "--genotype", str(trained / "g.json"), "--out", str(tmp_path), "--epochs", "2"]
                      + SMALL)
        assert rc == 130 and (tmp_path / "checkpoint.bin").exists() and (tmp_path / "train_log.csv").exists()
