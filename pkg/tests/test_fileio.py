import os

import numpy as np
import pytest
import torch

from src.errors import DataFormatError
from src.fileio import export_pgm, import_pgm, load_checkpoint, read_oct1, save_checkpoint, write_oct1
from src.manifest import ManifestRow, read_manifest, rows_for_split, write_manifest


@pytest.mark.parametrize("shape", [(7,), (3, 5), (2, 4, 6), (1, 1, 1, 9)])
def test_oct1_round_trip_is_bit_exact(tmp_path, shape):
    array = np.random.default_rng(len(shape)).normal(size=shape).astype(np.float32)
    path = str(tmp_path / "a.oct1")
    write_oct1(path, array)
    back = read_oct1(path)
    assert back.shape == shape
    assert back.tobytes() == array.tobytes()
    assert os.path.getsize(path) == 4 + 4 + 4 * len(shape) + 4 + 4 * array.size


def test_oct1_header_layout(tmp_path):
    path = str(tmp_path / "a.oct1")
    write_oct1(path, np.zeros((2, 3), dtype=np.float32))
    raw = open(path, "rb").read()
    assert raw[:4] == b"OCT1"
    assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [2, 2, 3, 0]


def test_oct1_parse_errors_report_offsets(tmp_path):
    path = str(tmp_path / "bad.oct1")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 12)
    with pytest.raises(DataFormatError, match="byte 0"):
        read_oct1(path)

    write_oct1(path, np.ones((4, 4), dtype=np.float32))
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:-5])
    with pytest.raises(DataFormatError, match="truncated payload"):
        read_oct1(path)

    with open(path, "wb") as f:
        f.write(raw + b"\x00")
    with pytest.raises(DataFormatError, match="trailing"):
        read_oct1(path)

    with pytest.raises(DataFormatError, match="not found"):
        read_oct1(str(tmp_path / "missing.oct1"))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "generator.head.0.weight": torch.from_numpy(rng.normal(size=(4, 1, 3, 3)).astype(np.float32)),
        "generator.head.1.weight": torch.from_numpy(rng.normal(size=(4,)).astype(np.float32)),
        "discriminator.scalar": torch.tensor(3.0),
        "generator.head.1.num_batches_tracked": torch.tensor(12),
    }
    path = str(tmp_path / "m.ckp1")
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for name, value in tensors.items():
        assert back[name].dtype == torch.float32
        assert back[name].shape == value.shape
        assert back[name].numpy().tobytes() == value.float().numpy().tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "m.ckp1")
    write_oct1(path, np.zeros(2, dtype=np.float32))
    with pytest.raises(DataFormatError, match="magic"):
        load_checkpoint(path)


def test_pgm_round_trip_within_quantization(tmp_path):
    image = np.random.default_rng(2).random((20, 30))
    path = str(tmp_path / "img.pgm")
    export_pgm(image, path)
    assert open(path, "rb").read(2) == b"P5"
    back = import_pgm(path)
    assert back.shape == (20, 30)
    assert np.max(np.abs(back - image)) <= 0.5 / 255 + 1e-12


def test_pgm_errors(tmp_path):
    path = str(tmp_path / "bad.pgm")
    with open(path, "wb") as f:
        f.write(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(DataFormatError, match="byte 0"):
        import_pgm(path)
    with pytest.raises(DataFormatError):
        export_pgm(np.zeros((2, 2, 2)), str(tmp_path / "x.pgm"))


def test_manifest_round_trip_and_errors(tmp_path):
    rows = [
        ManifestRow("P000", "P000_OD", "train", "eyes/P000_OD.oct1"),
        ManifestRow("P000", "P000_OS", "train", "eyes/P000_OS.oct1"),
        ManifestRow("P001", "P001_OD", "test", "eyes/P001_OD.oct1"),
    ]
    path = str(tmp_path / "manifest.tsv")
    write_manifest(path, rows)
    assert read_manifest(path) == rows
    assert [r.eye_id for r in rows_for_split(rows, "test")] == ["P001_OD"]

    with open(path, "a", encoding="utf-8") as f:
        f.write("P002\tP002_OD\tholdout\tx.oct1\n")
    with pytest.raises(DataFormatError, match=":4:"):
        read_manifest(path)
    with pytest.raises(DataFormatError, match="not found"):
        read_manifest(str(tmp_path / "none.tsv"))
