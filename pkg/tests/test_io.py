import json

import numpy as np
import pytest

from stlayout import io as fio
from stlayout.layout import LayoutSet, Level, RegionSpec


def test_pgm_round_trip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    fio.write_pgm(tmp_path / "a.pgm", g)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert np.array_equal(fio.read_pgm(tmp_path / "a.pgm"), g)


def test_pgm_comment_header(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n" + bytes([0, 255]))
    assert fio.read_mask(tmp_path / "c.pgm").tolist() == [[False, True]]


def test_bad_pgm(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(fio.FormatError):
        fio.read_pgm(tmp_path / "b.pgm")


def test_tensor_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    fio.write_tensor(tmp_path / "t.f32", a, note="x")
    meta = json.loads((tmp_path / "t.f32.json").read_text())
    assert meta["shape"] == [2, 3, 4] and meta["order"] == "row-major"
    assert (tmp_path / "t.f32").stat().st_size == a.size * 4
    b, meta2 = fio.read_tensor(tmp_path / "t.f32")
    assert np.array_equal(a, b) and meta2["note"] == "x"


def test_tensor_size_mismatch(tmp_path):
    fio.write_tensor(tmp_path / "t.f32", np.zeros(4))
    (tmp_path / "t.f32").write_bytes(b"\0" * 12)
    with pytest.raises(fio.FormatError):
        fio.read_tensor(tmp_path / "t.f32")


def test_normalized_pgm():
    assert (fio.normalized_pgm(np.full((3, 3), 0.25)) == 128).all()
    one_hot = np.zeros((3, 3))
    one_hot[1, 2] = 1.0
    out = fio.normalized_pgm(one_hot)
    assert out[1, 2] == 255 and out.sum() == 255


def test_layout_round_trip(tmp_path):
    masks = np.zeros((2, 2, 4, 4), bool)
    masks[:, 0, :2] = True
    masks[:, 1, 3, 3] = True
    lay = LayoutSet([RegionSpec(1, ("red", "square")), RegionSpec(4, ("hat",), Level.PART, 2)],
                    masks, ("red", "square", "with", "hat"))
    fio.save_layout(tmp_path / "lay", lay)
    assert (tmp_path / "lay" / "mask_f001_r4.pgm").exists()
    back = fio.load_layout(tmp_path / "lay")
    assert back.regions == lay.regions and np.array_equal(back.masks, masks)
    assert back.global_prompt_tokens == lay.global_prompt_tokens


def test_staged_dir(tmp_path):
    target = tmp_path / "out"
    with fio.staged_dir(target) as d:
        (d / "a").write_text("1")
    assert (target / "a").read_text() == "1"
    with pytest.raises(RuntimeError):
        with fio.staged_dir(target) as d:
            (d / "b").write_text("2")
            raise RuntimeError("boom")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out"]
    assert not (target / "b").exists()
