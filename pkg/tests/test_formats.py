import json

import numpy as np
import pytest

from speckle_lab import formats
from speckle_lab.fields import DisplacementField, GrayImage, StrainField


def test_pgm_layout(tmp_path):
    img = GrayImage(np.array([[0.0, 0.5, 1.0], [0.2, 0.8, 0.002]]))
    p = tmp_path / "a.pgm"
    formats.write_pgm(p, img)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert list(raw[-6:]) == [0, 128, 255, 51, 204, 1]


def test_pgm_round_trip_bytes(tmp_path, speckle64):
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    formats.write_pgm(a, speckle64)
    formats.write_pgm(b, formats.read_pgm(a))
    assert a.read_bytes() == b.read_bytes()


def test_pgm_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made elsewhere\n2 1\n255\n" + bytes([0, 255]))
    assert np.array_equal(formats.read_pgm(p).data, [[0.0, 1.0]])


def test_pgm_truncated(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ValueError, match="data bytes"):
        formats.read_pgm(p)


def test_ppm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    formats.write_ppm(a, rgb, comment="two\nlines")
    assert np.array_equal(formats.read_ppm(a), rgb)
    formats.write_ppm(b, formats.read_ppm(a), comment="two\nlines")
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("cls", [DisplacementField, StrainField])
def test_field_round_trip(tmp_path, rng, cls):
    f = cls.from_array(rng.normal(size=(len(cls.channel_names), 6, 9)).astype(np.float32))
    a, b = tmp_path / "a.f32", tmp_path / "b.f32"
    formats.write_field(a, f)
    g = formats.read_field(a)
    assert type(g) is cls and g == f
    formats.write_field(b, g)
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_field_layout(tmp_path):
    f = DisplacementField(np.array([[1.0, 2.0]]), np.array([[3.0, -4.0]]))
    p = tmp_path / "f.f32"
    formats.write_field(p, f)
    assert np.array_equal(np.frombuffer(p.read_bytes(), "<f4"), [1, 2, 3, -4])
    meta = json.loads((tmp_path / "f.json").read_text())
    assert meta == {"height": 1, "width": 2, "channels": ["u", "v"],
                    "semantics": "displacement", "units": "pixel"}


def test_field_size_mismatch(tmp_path):
    p = tmp_path / "f.f32"
    formats.write_field(p, DisplacementField.zeros(3, 3))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="bytes"):
        formats.read_field(p)


def test_json_canonical(tmp_path):
    p = tmp_path / "x.json"
    formats.write_json(p, {"b": 1, "a": [1.5, None]})
    assert p.read_text() == '{\n  "a": [\n    1.5,\n    null\n  ],\n  "b": 1\n}\n'
    with pytest.raises(ValueError):
        formats.dumps({"x": float("nan")})
