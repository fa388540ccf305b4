from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simdet.errors import InvalidInputError, ParseError
from simdet.geometry import BBox
from simdet.synthdata import (
    REAL,
    VIRTUAL,
    ClassRangeError,
    DomainProfile,
    Manifest,
    ManifestRow,
    Scene,
    generate_dataset,
    generate_scene,
    mosaic,
    read_annotations,
    read_ppm,
    sample_subset,
    split_half,
    write_annotations,
    write_ppm,
)
from simdet.synthdata.io import parse_annotations
from simdet.synthdata.mosaic import mosaic_layout

# ---------------------------------------------------------------------------
# scenes


def assert_valid_annotations(annotations):
    for _, box in annotations:
        assert box.w > 0 and box.h > 0
        x1, y1, x2, y2 = box.corners()
        assert 0.0 <= x1 and x2 <= 1.0 + 1e-12
        assert 0.0 <= y1 and y2 <= 1.0 + 1e-12


def test_scene_is_deterministic():
    a = generate_scene(123, VIRTUAL, K=7, max_objects=4)
    b = generate_scene(123, VIRTUAL, K=7, max_objects=4)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.annotations == b.annotations


def test_different_seeds_differ():
    a = generate_scene(1, REAL)
    b = generate_scene(2, REAL)
    assert a.image.tobytes() != b.image.tobytes()


def test_brightness_shift_moves_mean_by_offset():
    dark = DomainProfile("dark", brightness=-0.3)
    plain = DomainProfile("plain", brightness=0.0)
    diffs = [generate_scene(s, plain).image.mean() - generate_scene(s, dark).image.mean() for s in range(40)]
    assert np.mean(diffs) == pytest.approx(0.3, abs=0.02)


def test_max_objects_one_gives_single_annotation():
    for s in range(30):
        assert len(generate_scene(s, REAL, K=7, max_objects=1).annotations) == 1


def test_scene_image_range_and_shape():
    sc = generate_scene(5, REAL, size=32)
    assert sc.image.shape == (32, 32, 3)
    assert sc.image.dtype == np.float32
    assert sc.image.min() >= 0.0 and sc.image.max() <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 7), st.integers(1, 6))
def test_scene_annotations_valid(seed, K, max_objects):
    sc = generate_scene(seed, REAL, K=K, max_objects=max_objects)
    assert 1 <= len(sc.annotations) <= max_objects
    assert all(0 <= c < K for c, _ in sc.annotations)
    assert_valid_annotations(sc.annotations)


def test_profile_ranges_enforced():
    with pytest.raises(InvalidInputError):
        DomainProfile("x", brightness=0.6)
    with pytest.raises(InvalidInputError):
        DomainProfile("x", noise_sigma=0.3)


def test_bad_scene_arguments():
    with pytest.raises(InvalidInputError):
        generate_scene(0, REAL, K=0)
    with pytest.raises(InvalidInputError):
        generate_scene(0, REAL, max_objects=0)


# ---------------------------------------------------------------------------
# datasets


def test_generate_dataset_files_and_manifest(tmp_path):
    m = generate_dataset(9, 10, REAL, tmp_path / "d", K=7)
    assert len(m) == 10
    assert len(list((tmp_path / "d" / "images").glob("*.ppm"))) == 10
    assert len(list((tmp_path / "d" / "labels").glob("*.txt"))) == 10
    again = Manifest.read(tmp_path / "d" / "manifest.csv")
    assert again.rows == m.rows


def test_regeneration_identical(tmp_path):
    generate_dataset(9, 6, VIRTUAL, tmp_path / "a")
    generate_dataset(9, 6, VIRTUAL, tmp_path / "b")
    for rel in ["manifest.csv", *(f"images/scene_{i:05d}.ppm" for i in range(6)), *(f"labels/scene_{i:05d}.txt" for i in range(6))]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_counts_match_files(tmp_path):
    m = generate_dataset(4, 12, REAL, tmp_path, K=7)
    totals = np.zeros(7, dtype=int)
    for row in m.rows:
        anns = read_annotations(row.annotation, 7)
        assert len(anns) == row.num_objects
        for c, _ in anns:
            totals[c] += 1
    np.testing.assert_array_equal(totals, m.class_totals())


def test_scene_reproducible_in_isolation(tmp_path):
    from simdet.rng import derive
    from simdet.synthdata.io import to_uint8

    m = generate_dataset(77, 5, REAL, tmp_path)
    sc = generate_scene(derive(77, 3), REAL)
    np.testing.assert_array_equal(read_ppm(m.rows[3].image), to_uint8(sc.image))


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(0, 1, REAL, blocker / "sub")


def fake_manifest(counts):
    rows = [ManifestRow(Path(f"/x/{i}.ppm"), Path(f"/x/{i}.txt"), int(sum(c)), tuple(c)) for i, c in enumerate(counts)]
    return Manifest(rows)


def shares(m):
    t = m.class_totals()
    return t / t.sum()


def test_sample_full_size_is_identity():
    m = fake_manifest([(i % 3, 1) for i in range(30)])
    assert sample_subset(m, 30, seed=4).image_set() == m.image_set()


def test_sample_two_class_balance():
    # 50/50 parent; every image holds a single instance
    m = fake_manifest([(1, 0) if i % 2 else (0, 1) for i in range(100)])
    for seed in range(10):
        sub = sample_subset(m, 10, seed)
        assert len(sub) == 10
        assert abs(shares(sub)[0] - 0.5) <= 0.02


def test_sample_stratification_on_generated_counts():
    rng = np.random.default_rng(0)
    m = fake_manifest([tuple(rng.multinomial(rng.integers(1, 5), [0.2, 0.5, 0.3])) for _ in range(300)])
    sub = sample_subset(m, 60, seed=1)
    assert np.abs(shares(sub) - shares(m)).max() <= 0.02


def test_sample_seeds_differ():
    m = fake_manifest([(i % 4, 1, 2) for i in range(1000)])
    a = sample_subset(m, 100, seed=1)
    b = sample_subset(m, 100, seed=2)
    assert a.image_set() != b.image_set()
    assert sample_subset(m, 100, seed=1).image_set() == a.image_set()


def test_sample_too_large():
    with pytest.raises(InvalidInputError):
        sample_subset(fake_manifest([(1,)] * 5), 6, seed=0)


@pytest.mark.parametrize("n, sizes", [(220, (110, 110)), (5, (3, 2)), (2, (1, 1))])
def test_split_sizes(n, sizes):
    m = fake_manifest([(1,)] * n)
    tr, te = split_half(m, seed=3)
    assert (len(tr), len(te)) == sizes
    assert tr.image_set() | te.image_set() == m.image_set()
    assert not tr.image_set() & te.image_set()


def test_split_deterministic():
    m = fake_manifest([(1,)] * 20)
    assert split_half(m, 1)[0].image_set() == split_half(m, 1)[0].image_set()


def test_split_too_small():
    with pytest.raises(InvalidInputError):
        split_half(fake_manifest([(1,)]), 0)


# ---------------------------------------------------------------------------
# mosaic


def scene_with(box, size=64):
    return Scene(np.zeros((size, size, 3), np.float32), [(0, box)] if box else [])


@pytest.mark.parametrize("quadrant, expected", [(0, (0.25, 0.25, 0.1, 0.1)), (3, (0.75, 0.75, 0.1, 0.1))])
def test_mosaic_centre_pivot(quadrant, expected):
    scenes = [scene_with(None) for _ in range(4)]
    scenes[quadrant] = scene_with(BBox(0.5, 0.5, 0.2, 0.2))
    out = mosaic(scenes, seed=0, pivot=(0.5, 0.5))
    assert len(out.annotations) == 1
    np.testing.assert_allclose(out.annotations[0][1].as_array(), expected, atol=1e-12)


def test_mosaic_empty_scenes():
    out = mosaic([scene_with(None) for _ in range(4)], seed=3)
    assert out.annotations == []
    assert out.image.shape == (64, 64, 3)


def test_mosaic_small_fragment_dropped():
    # box straddling the crop edge of a TL quadrant with only a sliver inside
    scenes = [scene_with(None) for _ in range(4)]
    scenes[0] = scene_with(BBox(0.05, 0.5, 0.2, 0.2))
    maps = mosaic_layout((0.3, 0.5), [(64, 64)] * 4, (64, 64))
    out = mosaic(scenes, seed=0, pivot=(0.3, 0.5))
    src_x1 = maps[0].source_region()[0]
    kept_frac = (0.15 - src_x1) / 0.2
    assert (len(out.annotations) == 1) == (kept_frac >= 0.2)


def test_mosaic_pixels_come_from_sources():
    scenes = [Scene(np.full((64, 64, 3), v, np.float32), []) for v in (0.1, 0.3, 0.6, 0.9)]
    out = mosaic(scenes, seed=0, pivot=(0.5, 0.5))
    assert out.image[0, 0, 0] == np.float32(0.1)
    assert out.image[0, 63, 0] == np.float32(0.3)
    assert out.image[63, 0, 0] == np.float32(0.6)
    assert out.image[63, 63, 0] == np.float32(0.9)


def test_mosaic_needs_four():
    with pytest.raises(InvalidInputError):
        mosaic([scene_with(None)] * 3, seed=0)


def check_mosaic_consistency(seed):
    scenes = [generate_scene(seed * 4 + i, REAL, K=7, max_objects=6) for i in range(4)]
    out = mosaic(scenes, seed)
    px, py = out.meta["pivot"]
    assert 0.25 <= px <= 0.75 and 0.25 <= py <= 0.75
    assert_valid_annotations(out.annotations)
    for (cls, box), (q, j) in zip(out.annotations, out.meta["provenance"]):
        qmap = out.meta["maps"][q]
        src_cls, src = scenes[q].annotations[j]
        assert cls == src_cls
        sx1, sy1, sx2, sy2 = qmap.source_region()
        clipped = (max(src.corners()[0], sx1), max(src.corners()[1], sy1), min(src.corners()[2], sx2), min(src.corners()[3], sy2))
        x1, y1 = qmap.inverse(*box.corners()[:2])
        x2, y2 = qmap.inverse(*box.corners()[2:])
        np.testing.assert_allclose((x1, y1, x2, y2), clipped, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**40))
def test_mosaic_inverse_consistency(seed):
    check_mosaic_consistency(seed)


def test_mosaic_deterministic():
    scenes = [generate_scene(i, REAL) for i in range(4)]
    a, b = mosaic(scenes, 5), mosaic(scenes, 5)
    assert a.image.tobytes() == b.image.tobytes() and a.annotations == b.annotations


# ---------------------------------------------------------------------------
# file formats


def test_parse_example_line():
    assert parse_annotations("0 0.500000 0.500000 0.250000 0.250000\n") == [(0, BBox(0.5, 0.5, 0.25, 0.25))]


def test_empty_annotation_file(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    assert read_annotations(p) == []


def test_class_out_of_range():
    with pytest.raises(ClassRangeError):
        parse_annotations("7 0.5 0.5 0.1 0.1", num_classes=7)
    assert parse_annotations("6 0.5 0.5 0.1 0.1", num_classes=7)[0][0] == 6


@pytest.mark.parametrize("text, line", [("0 0.5 0.5 0.1\n", 1), ("0 0.5 0.5 0.1 0.1\nx 0.5 0.5 0.1 0.1\n", 2), ("0 0.5 0.5 -1 0.1", 1)])
def test_malformed_lines(text, line):
    with pytest.raises(ParseError) as info:
        parse_annotations(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_annotation_file_format(tmp_path):
    p = tmp_path / "a.txt"
    write_annotations(p, [(2, BBox(0.1, 0.2, 0.3, 0.4))])
    assert p.read_bytes() == b"2 0.100000 0.200000 0.300000 0.400000\n"


def random_annotations(rng, n):
    return [
        (int(rng.integers(0, 7)), BBox(*np.round(rng.uniform(0.01, 0.99, 4), 6)))
        for _ in range(n)
    ]


def test_annotation_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    for i in range(50):
        anns = random_annotations(rng, int(rng.integers(0, 6)))
        p = tmp_path / f"{i}.txt"
        write_annotations(p, anns)
        assert read_annotations(p, 7) == anns


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    data = (tmp_path / "x.ppm").read_bytes()
    assert data.startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)


def test_ppm_rejects_other_formats(tmp_path):
    from simdet.errors import FormatError

    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "bad.ppm")
