import struct

import numpy as np
import pytest
from PIL import Image

from cwf import io as cio
from cwf.ctf import CtfParams
from cwf.imaging import ImageStack


def header(nx, ny, nz, mode=2, order="<", stamp=b"\x44\x44\x00\x00"):
    h = bytearray(1024)
    struct.pack_into(order + "4i", h, 0, nx, ny, nz, mode)
    struct.pack_into(order + "3f", h, 40, 2.0 * nx, 2.0 * ny, 2.0 * nz)
    h[208:212] = b"MAP "
    h[212:216] = stamp
    return bytes(h)


def test_stack_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.standard_normal((3, 8, 8)).astype(np.float32)
    p1, p2 = tmp_path / "a.mrc", tmp_path / "b.mrc"
    cio.write_stack(ImageStack(data.astype(np.float64), 1.5), p1)
    st = cio.read_stack(p1)
    assert np.array_equal(st.data.astype(np.float32), data)
    assert st.pixel_size == pytest.approx(1.5)
    cio.write_stack(st, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(cio.read_stack_raw(p1), data)


def test_header_layout(tmp_path):
    p = tmp_path / "s.mrc"
    cio.write_stack(np.zeros((5, 4, 4)), p, pixel_size=2.0)
    raw = p.read_bytes()
    assert struct.unpack("<4i", raw[:16]) == (4, 4, 5, 2)
    assert struct.unpack("<f", raw[40:44])[0] == 8.0
    assert raw[212:214] == b"\x44\x44"
    assert len(raw) == 1024 + 5 * 16 * 4


def test_big_endian_fixture(tmp_path):
    values = [1.5, -2.25, 3.0e-3, 1024.0]
    p = tmp_path / "be.mrc"
    p.write_bytes(header(2, 2, 1, order=">", stamp=b"\x11\x11\x00\x00") + struct.pack(">4f", *values))
    # reference decoder: swap every 4-byte word by hand and reinterpret
    payload = p.read_bytes()[1024:]
    swapped = b"".join(payload[i : i + 4][::-1] for i in range(0, 16, 4))
    ref = np.frombuffer(swapped, dtype="<f4").reshape(1, 2, 2)
    assert np.array_equal(cio.read_stack_raw(p), ref)
    # the same path through the stack reader on an 8 x 8 image
    big = (np.arange(64).reshape(1, 8, 8) / 7).astype(">f4")
    q = tmp_path / "be8.mrc"
    q.write_bytes(header(8, 8, 1, order=">", stamp=b"\x11\x11\x00\x00") + big.tobytes())
    st = cio.read_stack(q)
    assert np.array_equal(st.data, big.astype(np.float64))
    assert st.pixel_size == pytest.approx(2.0)


def test_empty_stack_rejected(tmp_path):
    p = tmp_path / "e.mrc"
    p.write_bytes(header(4, 4, 0))
    with pytest.raises(cio.EmptyStackError):
        cio.read_stack(p)


def test_unsupported_mode_named(tmp_path):
    p = tmp_path / "m.mrc"
    p.write_bytes(header(2, 2, 1, mode=1) + bytes(8))
    with pytest.raises(cio.UnsupportedModeError, match="mode 1"):
        cio.read_stack(p)


def test_truncated_payload_reports_bytes(tmp_path):
    p = tmp_path / "t.mrc"
    p.write_bytes(header(4, 4, 2) + bytes(100))
    with pytest.raises(cio.CorruptFileError, match="100 bytes.*128"):
        cio.read_stack(p)
    q = tmp_path / "h.mrc"
    q.write_bytes(bytes(200))
    with pytest.raises(cio.CorruptFileError):
        cio.read_stack(q)


def test_ctf_table_round_trip(tmp_path):
    params = [CtfParams(1.0 + 0.1 * g, 300, 2.0, 0.07, 10.0, 5.0) for g in range(3)]
    p = tmp_path / "ctf.csv"
    cio.write_ctf_table(params, p)
    assert cio.read_ctf_table(p, 5.0) == params
    assert p.read_text().splitlines()[0] == ",".join(cio.CTF_COLUMNS)


@pytest.mark.parametrize(
    "text",
    [
        "group_id,defocus_um\n0,1\n",
        ",".join(cio.CTF_COLUMNS) + "\n0,1,300,2,0.07,10\n2,1,300,2,0.07,10\n",
        ",".join(cio.CTF_COLUMNS) + "\n0,1,300,2,0.07,10\n0,2,300,2,0.07,10\n",
    ],
)
def test_ctf_table_errors(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(cio.FormatError):
        cio.read_ctf_table(p)


def test_assignments(tmp_path):
    p = tmp_path / "a.csv"
    cio.write_assignments([0, 2, 1, 0], p)
    assert list(cio.read_assignments(p, 4)) == [0, 2, 1, 0]
    with pytest.raises(cio.FormatError):
        cio.read_assignments(p, 5)
    p.write_text("image_index,group_id\n0,0\n2,1\n")
    with pytest.raises(cio.FormatError):
        cio.read_assignments(p)


def test_report_round_trip(tmp_path):
    p = tmp_path / "r.json"
    cio.write_report({"a": np.float64(1.5), "b": np.arange(3), "c": float("nan"), "d": {1: np.int64(2)}}, p)
    body = cio.read_report(p)
    assert body == {"schema": cio.REPORT_SCHEMA, "a": 1.5, "b": [0, 1, 2], "c": None, "d": {"1": 2}}
    p.write_text('{"schema": "other"}')
    with pytest.raises(cio.FormatError):
        cio.read_report(p)


def test_montage(tmp_path, rng):
    cols = [rng.standard_normal((5, 8, 8)) for _ in range(4)]
    cols[1][:] = 3.0
    p = tmp_path / "m.png"
    cio.write_montage(cols, p, rows=3, pad=2)
    img = np.asarray(Image.open(p))
    assert img.shape == (3 * 10 + 2, 4 * 10 + 2) and img.dtype == np.uint8
    tile = img[2:10, 2:10]
    assert tile.min() == 0 and tile.max() == 255
    assert np.all(img[2:10, 12:20] == 0)


def test_config_file_and_environment(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("# settings\ncg-tol = 1e-6  # tighter\n\nlam=2\n")
    assert cio.read_config(p) == {"cg_tol": "1e-6", "lam": "2"}
    p.write_text("lam 2\n")
    with pytest.raises(cio.FormatError, match=":1:"):
        cio.read_config(p)
    monkeypatch.setenv("CWF_SNR", "1/40")
    assert cio.env_config()["snr"] == "1/40"
