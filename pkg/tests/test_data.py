import numpy as np
import pytest

from keyregion import data
from keyregion.pnm import read_pnm, write_pgm, write_ppm, quantize


def test_real_and_fake_are_deterministic():
    a, b = data.generate_fake(7), data.generate_fake(7)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(data.generate_fake(7).pixels, data.generate_fake(8).pixels)


def test_pixels_in_unit_box_and_shape():
    for seed in range(20):
        for img in (data.generate_real(seed), data.generate_fake(seed)):
            assert img.pixels.shape == (3, 32, 32)
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_fakes_carry_more_high_frequency_energy():
    wins = sum(data.laplacian_energy(data.generate_fake(s).pixels)
               > data.laplacian_energy(data.generate_real(s).pixels) for s in range(200))
    assert wins >= 195


def test_manipulated_region_is_even_aligned_rectangle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        region = data.manipulated_region(rng, 32)
        rows, cols = np.where(region)
        top, bottom, left, right = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        assert region[top:bottom, left:right].all()
        assert region.sum() == (bottom - top) * (right - left)
        assert top % 2 == 0 and left % 2 == 0 and (bottom - top) % 2 == 0


def test_fake_differs_from_real_texture_only_inside_region():
    seed = 11
    real = data.generate_real(seed).pixels
    fake = data.generate_fake(seed).pixels
    changed = np.any(real != fake, axis=0)
    assert 0 < changed.mean() < 0.5


def test_split_seeds_disjoint_and_interleaved():
    m = data.DatasetManifest({"train": 5, "val": 3, "test": 2})
    seen = set()
    for split in data.SPLITS:
        pairs = m.split_seeds(split)
        assert [lab for lab, _ in pairs] == [0, 1] * m.counts[split]
        seeds = {s for _, s in pairs}
        assert not seeds & seen
        seen |= seeds


def test_manifest_round_trip_and_validation():
    m = data.DatasetManifest({"train": 4, "val": 2, "test": 1}, 32, 5)
    again = data.DatasetManifest.from_text(m.to_text())
    assert again == m
    with pytest.raises(ValueError):
        data.DatasetManifest({"train": 0, "val": 1, "test": 1})
    with pytest.raises(ValueError):
        data.DatasetManifest(size=20)
    with pytest.raises(ValueError):
        data.DatasetManifest.from_text(m.to_text().replace("version = 1", "version = 9"))
    with pytest.raises(ValueError):
        data.DatasetManifest.from_text("seed = 1\n")


def test_build_and_load_match_in_memory(tmp_path):
    m = data.DatasetManifest({"train": 2, "val": 1, "test": 1})
    assert data.build_dataset(m, tmp_path) == 8
    for split in data.SPLITS:
        disk = data.load_split(tmp_path, split)
        mem = data.make_split(m, split)
        np.testing.assert_array_equal(disk[0], mem[0])
        np.testing.assert_array_equal(disk[1], mem[1])
        assert disk[2] == mem[2]


def test_build_is_byte_identical(tmp_path):
    m = data.DatasetManifest({"train": 2, "val": 1, "test": 1}, seed=3)
    data.build_dataset(m, tmp_path / "a")
    data.build_dataset(m, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_manifest(tmp_path):
    with pytest.raises(OSError):
        data.load_split(tmp_path, "test")


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((3, 5, 7))
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), quantize(img))
    gray = rng.random((4, 6))
    write_pgm(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), quantize(gray))
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_pnm_rejects_garbage(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "bad.ppm")
