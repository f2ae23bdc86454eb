import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rolo.data import (
    SyntheticSceneConfig,
    generate_synthetic_sequence,
    load_dataset,
    load_otb_sequence,
    parse_groundtruth,
    read_pnm,
    save_sequence,
    write_pgm_frame,
)


def _small(**kw):
    base = dict(frames=40, image_side=32, seed=3)
    base.update(kw)
    return SyntheticSceneConfig(**base)


def test_occlusion_band_exact():
    rec = generate_synthetic_sequence(_small(frames=60, occluder_start=30, occluder_frames=10))
    np.testing.assert_array_equal(np.flatnonzero(rec.occluded), np.arange(30, 40))


def test_no_target_detection_while_occluded():
    rec = generate_synthetic_sequence(_small(frames=60, occluder_start=30, distractors=0))
    for t in range(30, 40):
        assert rec.detections[t] == []


def test_straight_line_motion():
    # [DERIVED] constant velocity, no turns, far from borders: cx_t = 0.3 + 0.01 t
    rec = generate_synthetic_sequence(_small(frames=10, start_center=(0.3, 0.5), velocity=(0.01, 0.0),
                                             turn_sigma=0.0))
    np.testing.assert_allclose([b.cx for b in rec.gt], 0.3 + 0.01 * np.arange(10), atol=1e-12)


def test_bad_start_center():
    with pytest.raises(ValueError, match="off the image"):
        SyntheticSceneConfig(start_center=(0.01, 0.5))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_target_stays_inside(seed):
    rec = generate_synthetic_sequence(_small(seed=seed, speed=0.05))
    for b in rec.gt:
        x0, y0, x1, y1 = b.corners()
        assert x0 >= -1e-12 and y0 >= -1e-12 and x1 <= 1 + 1e-12 and y1 <= 1 + 1e-12


def test_generator_deterministic(tmp_path):
    a = save_sequence(generate_synthetic_sequence(_small()), tmp_path / "a")
    b = save_sequence(generate_synthetic_sequence(_small()), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_save_load_round_trip(tmp_path):
    rec = generate_synthetic_sequence(_small())
    back = load_otb_sequence(save_sequence(rec, tmp_path / "s"))
    assert back.name == rec.name and len(back) == len(rec)
    np.testing.assert_array_equal(back.frames, rec.frames)
    np.testing.assert_array_equal(back.occluded, rec.occluded)
    for g0, g1 in zip(rec.gt, back.gt):
        np.testing.assert_allclose(g0.as_array(), g1.as_array(), atol=1e-5)
    assert back.detections == rec.detections


def test_parse_groundtruth_formats(tmp_path):
    # [DERIVED] pixel box x=10,y=20,w=30,h=40 in 100x200: cx=0.25, cy=0.2, w=0.3, h=0.2
    p = tmp_path / "gt.txt"
    p.write_text("10,20,30,40\n10\t20\t30\t40\n")
    boxes = parse_groundtruth(p, 100, 200)
    for b in boxes:
        assert b.as_array() == pytest.approx([0.25, 0.2, 0.3, 0.2])


def test_parse_groundtruth_errors(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("1,2,3,4\n1,2,x,4\n")
    with pytest.raises(ValueError, match=":2:"):
        parse_groundtruth(p, 10, 10)
    p.write_text("")
    with pytest.raises(ValueError, match="empty"):
        parse_groundtruth(p, 10, 10)


def test_pnm_ascii_and_binary(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm_frame(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), img)
    (tmp_path / "b.pgm").write_text("P2\n# c\n4 3\n255\n" + " ".join(str(v) for v in img.ravel()) + "\n")
    np.testing.assert_array_equal(read_pnm(tmp_path / "b.pgm"), img)
    rgb = np.stack([img, img, img], axis=2)
    (tmp_path / "c.ppm").write_bytes(b"P6\n4 3\n255\n" + rgb.tobytes())
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), rgb)


def test_load_dataset_sorted(tmp_path):
    for s in (5, 2):
        save_sequence(generate_synthetic_sequence(_small(seed=s)), tmp_path / f"synth_{s:04d}")
    assert [r.name for r in load_dataset(tmp_path)] == ["synth_0002", "synth_0005"]
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "synth_0002" / "img")


def test_meta_records_config(tmp_path):
    out = save_sequence(generate_synthetic_sequence(_small()), tmp_path / "s")
    meta = json.loads((out / "meta.json").read_text())
    assert meta["config"]["seed"] == 3 and meta["frames"] == 40
