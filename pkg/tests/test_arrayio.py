import numpy as np
import pytest

from pnpmbir.arrayio import (
    MAGIC,
    read_array,
    read_metadata,
    write_array,
    write_metadata,
    write_png,
)
from pnpmbir.errors import FormatError


class TestArrayContainer:
    @pytest.mark.parametrize("shape", [(7,), (5, 9), (3, 4, 2)])
    def test_round_trip(self, tmp_path, shape):
        arr = np.random.default_rng(0).normal(size=shape)
        path = tmp_path / "a.arr"
        write_array(path, arr)
        back = read_array(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "a.arr"
        write_array(path, np.zeros((2, 3)))
        data = path.read_bytes()
        assert data[:16] == MAGIC
        assert len(MAGIC) == 16
        assert int.from_bytes(data[16:20], "little") == 2
        assert int.from_bytes(data[20:24], "little") == 2
        assert int.from_bytes(data[24:28], "little") == 3
        assert len(data) == 28 + 6 * 8

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.arr"
        path.write_bytes(b"X" * 40)
        with pytest.raises(FormatError, match="magic"):
            read_array(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "a.arr"
        write_array(path, np.zeros((4, 4)))
        data = path.read_bytes()
        (tmp_path / "t.arr").write_bytes(data[:-8])
        with pytest.raises(FormatError, match="truncated"):
            read_array(tmp_path / "t.arr")

    def test_implausible_rank(self, tmp_path):
        path = tmp_path / "r.arr"
        path.write_bytes(MAGIC + (99).to_bytes(4, "little"))
        with pytest.raises(FormatError, match="rank"):
            read_array(path)


class TestMetadata:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.meta"
        write_metadata(path, {"seed": 7, "mA": 40.0, "i0_ref": 1e5, "sd": 5.0})
        meta = read_metadata(path)
        assert meta["seed"] == "7"
        assert float(meta["mA"]) == 40.0

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "m.meta"
        path.write_text("novalue\n")
        with pytest.raises(FormatError):
            read_metadata(path)


class TestPng:
    def test_windowed_png_is_valid(self, tmp_path):
        from PIL import Image
        values = np.linspace(0, 1, 64 * 64).reshape(64, 64)
        path = tmp_path / "img.png"
        write_png(path, values, 0.0, 1.0)
        with Image.open(path) as im:
            assert im.size == (64, 64)
            assert im.mode == "L"

    def test_degenerate_window_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_png(tmp_path / "x.png", np.zeros((4, 4)), 1.0, 1.0)
