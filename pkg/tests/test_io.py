import numpy as np
import pytest

from levirenorm.io import file_hash, read_array, read_csv, text_hash, write_array, write_csv


def test_array_roundtrip(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4, 5))
    write_array(tmp_path / "a.bin", a, {"eps": 0.1, "tag": "x"})
    b, head = read_array(tmp_path / "a.bin")
    assert np.array_equal(a, b)
    assert head["eps"] == 0.1 and head["tag"] == "x" and head["shape"] == [3, 4, 5]


def test_array_header_is_text(tmp_path):
    write_array(tmp_path / "a.bin", np.zeros(2), {"n": 4})
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw.startswith(b"levirenorm-array 1\n")
    assert b"\nEND\n" in raw


def test_array_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        read_array(tmp_path / "x.bin")


def test_csv_roundtrip_and_numpy_scalars(tmp_path):
    rows = [{"a": np.float64(0.1), "b": np.int64(3), "c": np.bool_(True)}, {"a": 1.5, "b": 4, "c": False}]
    write_csv(tmp_path / "t.csv", rows)
    back = read_csv(tmp_path / "t.csv")
    assert back[0] == {"a": "0.1", "b": "3", "c": "True"}
    assert float(back[1]["a"]) == 1.5


def test_hashes(tmp_path):
    (tmp_path / "f").write_text("abc")
    assert file_hash(tmp_path / "f") == text_hash("abc")
    assert text_hash("abc") != text_hash("abd")
