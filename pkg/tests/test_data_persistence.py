import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bionas.data import CIFAR_RECORD, DataError, Dataset, gen_orientation_task, gen_synthetic, load_cifar10_bin, \
    write_cifar10_bin
from bionas.models import SmallConvNet
from bionas.persistence import (MAGIC, CheckpointError, GenotypeFormatError, genotype_from_json, genotype_to_json,
                                load_checkpoint, load_genotype, read_checkpoint_file, save_checkpoint, save_genotype,
                                write_checkpoint_file)
from bionas.supernet import Genotype
from fixtures import DESK_GENOTYPE_DICT, resume_mismatch


def cifar_fixture(n=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, size=n)


class TestCifar:
    def test_round_trip(self, tmp_path):
        px, lab = cifar_fixture()
        write_cifar10_bin(tmp_path / "b.bin", px, lab)
        raw = (tmp_path / "b.bin").read_bytes()
        assert len(raw) == 5 * CIFAR_RECORD and raw[0] == lab[0] and raw[1:4] == bytes(px[0, 0, 0, :3])
        ds = load_cifar10_bin(tmp_path / "b.bin")
        assert np.array_equal(ds.labels, lab)
        assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), px)
        write_cifar10_bin(tmp_path / "c.bin", np.rint(ds.images * 255).astype(np.uint8), ds.labels)
        assert (tmp_path / "c.bin").read_bytes() == raw

    def test_multiple_files(self, tmp_path):
        for i in range(2):
            write_cifar10_bin(tmp_path / f"{i}.bin", *cifar_fixture(3, i))
        assert len(load_cifar10_bin([tmp_path / "0.bin", tmp_path / "1.bin"])) == 6

    def test_truncated(self, tmp_path):
        write_cifar10_bin(tmp_path / "b.bin", *cifar_fixture(2))
        (tmp_path / "t.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-10])
        with pytest.raises(DataError, match="offset 3073"):
            load_cifar10_bin(tmp_path / "t.bin")

    def test_bad_label(self, tmp_path):
        px, lab = cifar_fixture(3)
        lab[1] = 12
        write_cifar10_bin(tmp_path / "b.bin", px, lab)
        with pytest.raises(DataError, match="label 12 > 9 at byte offset 3073"):
            load_cifar10_bin(tmp_path / "b.bin")

    def test_dataset_shape_check(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 1, 4, 4)), [0, 1])


class TestSynthetic:
    def test_deterministic_and_balanced(self):
        a, b = gen_synthetic(3, 10, 8, 0.1, seed=5), gen_synthetic(3, 10, 8, 0.1, seed=5)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
        assert np.bincount(a.labels).tolist() == [10, 10, 10]
        assert a.images.shape == (30, 3, 8, 8) and a.images.min() >= 0 and a.images.max() <= 1

    def test_noise_free_class_template(self):
        ds = gen_synthetic(2, 4, 8, 0.0, seed=0)
        yy, xx = np.mgrid[0:8, 0:8] / 8
        # class 0: horizontal-frequency grating with frequency 1, scaled by the red-channel gain 1
        base = np.sin(2 * np.pi * xx)
        img = ds.images[ds.labels == 0][0, 0]
        contrast = (img - 0.5) / (0.5 * np.where(base == 0, 1, base))
        mask = np.abs(base) > 0.1
        assert np.ptp(contrast[mask]) < 1e-12 and 0.5 <= contrast[mask][0] <= 1.0

    def test_seeds_differ(self):
        assert not np.array_equal(gen_synthetic(3, 5, 8, seed=0).images, gen_synthetic(3, 5, 8, seed=1).images)

    def test_orientation_task_transposes(self):
        ds = gen_orientation_task(50, 8, 0.0, seed=0)
        assert set(np.unique(ds.labels)) == {0, 1}

    def test_split_disjoint(self):
        ds = gen_synthetic(3, 10, 8, seed=0)
        a, b = ds.split(0.3)
        assert len(a) == 9 and len(b) == 21

    def test_bad_args(self):
        with pytest.raises(ValueError):
            gen_synthetic(3, 10, 2)


class TestGenotype:
    def test_round_trip(self, tmp_path):
        g = Genotype.from_dict(DESK_GENOTYPE_DICT)
        save_genotype(g, tmp_path / "g.json")
        assert load_genotype(tmp_path / "g.json") == g
        assert genotype_to_json(genotype_from_json(genotype_to_json(g))) == genotype_to_json(g)

    @pytest.mark.parametrize("text,match", [
        ("{not json", "malformed"),
        ("[1, 2]", "object"),
        (json.dumps({**DESK_GENOTYPE_DICT, "extra": 1}), "unknown genotype fields"),
        (json.dumps({**DESK_GENOTYPE_DICT, "version": 2}), "version"),
        (json.dumps({"version": 1, "normal": []}), "missing"),
        (json.dumps({**DESK_GENOTYPE_DICT, "normal": [[0, "conv_7x7", "fa"]]}), "unknown operation"),
        (json.dumps({**DESK_GENOTYPE_DICT, "normal": [[0, "sep_conv_3x3"]]}), "malformed genotype entry"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(GenotypeFormatError, match=match):
            genotype_from_json(text)


class TestCheckpoint:
    def test_tensor_round_trip(self, tmp_path):
        t = {"a": np.arange(6.0).reshape(2, 3), "b": np.arange(4, dtype=np.int64), "c": np.float32(2.5) * np.ones(1),
             "scalar": np.array(3.0)}
        write_checkpoint_file(tmp_path / "c.bin", t, {"epoch": 3})
        t2, state = read_checkpoint_file(tmp_path / "c.bin")
        assert state == {"epoch": 3}
        for k in t:
            assert t2[k].dtype == t[k].dtype and np.array_equal(t2[k], t[k])

    def test_layout(self, tmp_path):
        write_checkpoint_file(tmp_path / "c.bin", {"w": np.array([1.5])}, {})
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == MAGIC and struct.unpack("<II", raw[8:16]) == (1, 1)
        assert struct.unpack("<H", raw[16:18]) == (1,) and raw[18:19] == b"w"
        assert struct.unpack("<BBQd", raw[19:37]) == (1, 1, 1, 1.5)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint_file(tmp_path / "c.bin")

    @given(st.integers(9, 60))
    def test_truncation(self, tmp_path_factory, cut):
        p = tmp_path_factory.mktemp("ck") / "c.bin"
        write_checkpoint_file(p, {"w": np.arange(3.0)}, {"epoch": 1})
        raw = p.read_bytes()
        p.write_bytes(raw[:min(cut, len(raw) - 1)])
        with pytest.raises(CheckpointError):
            read_checkpoint_file(p)

    def test_dim_overflow(self, tmp_path):
        blob = MAGIC + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + struct.pack("<BBQQ", 1, 2, 1 << 40,
                                                                                             1 << 30)
        (tmp_path / "c.bin").write_bytes(blob)
        with pytest.raises(CheckpointError, match="dim overflow"):
            read_checkpoint_file(tmp_path / "c.bin")

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.bin", SmallConvNet(3, 4, 6, 3))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin", SmallConvNet(3, 4, 7, 3))

    def test_model_round_trip(self, tmp_path):
        a, b = SmallConvNet(3, 4, 6, 3, seed=0), SmallConvNet(3, 4, 6, 3, seed=1)
        save_checkpoint(tmp_path / "c.bin", a, meta={"note": "x"})
        state = load_checkpoint(tmp_path / "c.bin", b)
        assert state["meta"] == {"note": "x"}
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(p.value, q.value)

    def test_resume_bit_exact(self, tmp_path):
        assert resume_mismatch(tmp_path) == 0
