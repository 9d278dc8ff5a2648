import struct

import numpy as np
import pytest

from patrecon.grid import Image, ImageGrid, Measurements
from patrecon.io import (MAGIC, FileFormatError, decode, encode, read_array, read_image,
                         read_measurements, read_png_grayscale, write_array, write_image,
                         write_measurements, write_png)


def test_encode_layout_by_hand():
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    blob = encode(arr, {"note": "x"})
    assert blob[:8] == MAGIC
    version, n = struct.unpack_from("<II", blob, 8)
    assert version == 1
    assert np.frombuffer(blob[16 + n:], "<f8").tolist() == [1.0, 2.0, 3.0, 4.0]
    back, meta = decode(blob)
    assert np.array_equal(back, arr) and meta["note"] == "x" and meta["shape"] == [2, 2]
    assert meta["units"]["length"] == "mm"


def test_corrupt_files_are_rejected():
    blob = encode(np.ones(3), {})
    with pytest.raises(FileFormatError):
        decode(b"NOTMAGIC" + blob[8:])
    with pytest.raises(FileFormatError):
        decode(blob[:-8])
    with pytest.raises(FileFormatError):
        decode(blob[:10])
    bad_version = blob[:8] + struct.pack("<I", 9) + blob[12:]
    with pytest.raises(FileFormatError):
        decode(bad_version)


def test_image_and_measurement_round_trip(tmp_path, rng):
    img = Image(ImageGrid(6, 4, 0.2, 0.1), rng.standard_normal((6, 4)))
    write_image(tmp_path / "img.bin", img, {"seed": 3})
    back, meta = read_image(tmp_path / "img.bin")
    assert np.array_equal(back.data, img.data)
    assert (back.grid.dx, back.grid.dy) == (0.2, 0.1) and meta["seed"] == 3
    meas = Measurements(rng.standard_normal((3, 5)), 0.01, metadata={"snr_db": 20.0})
    write_measurements(tmp_path / "m.bin", meas)
    m2 = read_measurements(tmp_path / "m.bin")
    assert np.array_equal(m2.data, meas.data) and m2.dt == 0.01
    assert m2.metadata["snr_db"] == 20.0
    with pytest.raises(FileFormatError):
        read_measurements(tmp_path / "img.bin")
    with pytest.raises(FileNotFoundError):
        read_array(tmp_path / "nope.bin")


def test_atomic_write_leaves_no_temporaries(tmp_path):
    write_array(tmp_path / "sub" / "a.bin", np.zeros(4), {})
    write_array(tmp_path / "sub" / "a.bin", np.ones(4), {})
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.bin"]
    assert np.all(read_array(tmp_path / "sub" / "a.bin")[0] == 1)


def test_png_scaling_and_orientation(tmp_path):
    a = np.zeros((4, 3))
    a[3, 0] = 2.0
    a[0, 2] = -1.0
    scale = write_png(tmp_path / "a.png", a)
    assert scale == {"png_min": -1.0, "png_max": 2.0}
    back = read_png_grayscale(tmp_path / "a.png")
    assert back.shape == (4, 3)
    assert back[3, 0] == 1.0 and back[0, 2] == 0.0
    assert back[1, 1] == pytest.approx(85 / 255)
    write_png(tmp_path / "c.png", np.full((2, 2), 5.0))
    assert np.all(read_png_grayscale(tmp_path / "c.png") == 0)
