"""Synthetic cohort generator and its binary container."""

import dataclasses
import os

import numpy as np
import pytest

from slidegeom import cohort as ch
from slidegeom import nucfeat as nf


@pytest.fixture(scope="module")
def small_spec():
    return ch.default_spec(slides_per_class=3, patches_per_slide=(2, 4), nuclei_per_patch=(8, 20))


@pytest.fixture(scope="module")
def small_cohort(small_spec):
    return ch.gen_cohort(small_spec)


class TestSpec:
    def test_default_valid(self):
        ch.default_spec().validate()

    def test_bad_simplex_rejected(self):
        with pytest.raises(ch.SpecError, match="simplex"):
            ch.default_spec(simplices=((0.5, 0.5, 0.5, 0.5),) * 3)

    def test_empty_range_rejected(self):
        with pytest.raises(ch.SpecError):
            ch.default_spec(patches_per_slide=(5, 2))

    def test_label_out_of_range(self, small_spec):
        with pytest.raises(ch.SpecError, match="label"):
            ch.gen_slide(small_spec, 3, 0)

    def test_hash_changes_with_spec(self, small_spec):
        other = dataclasses.replace(small_spec, seed=small_spec.seed + 1)
        assert small_spec.hash() != other.hash()


class TestGenSlide:
    def test_deterministic_bytes(self, small_spec):
        a = ch.gen_slide(small_spec, 1, 5)
        b = ch.gen_slide(small_spec, 1, 5)
        assert ch.slides_equal(a, b)
        assert ch._slide_body(a, small_spec.d) == ch._slide_body(b, small_spec.d)

    def test_degenerate_simplex_all_tumor(self):
        spec = ch.default_spec(slides_per_class=1, necrosis_rate=0.0,
                               simplices=((1.0, 0.0, 0.0, 0.0),) * 3)
        slide = ch.gen_slide(spec, 0, 0)
        for p in slide.patches:
            assert all(n.class_label == "tumor" for n in p.nuclei)

    def test_nucleus_invariants(self, small_cohort):
        slides, _ = small_cohort
        for s in slides:
            for p in s.patches:
                for n in p.nuclei:
                    area = ch.polygon_area(n.contour) if hasattr(ch, "polygon_area") else nf.polygon_area(n.contour)
                    assert area > 0
                    x, y = n.centroid
                    assert 0 <= x <= ch.PATCH_EXTENT and 0 <= y <= ch.PATCH_EXTENT
                    lo = n.contour.min(axis=0)
                    hi = n.contour.max(axis=0)
                    assert lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1]
                    assert n.class_label in nf.CLASS_NAMES
                    assert n.intensity_tile.dtype == np.uint8

    def test_contours_simple(self, small_cohort):
        # star-shaped construction implies simplicity; verify no edge crossings
        def segments_cross(p1, p2, p3, p4):
            def orient(a, b, c):
                return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
            return (orient(p1, p2, p3) != orient(p1, p2, p4)
                    and orient(p3, p4, p1) != orient(p3, p4, p2))

        slides, _ = small_cohort
        n = slides[0].patches[0].nuclei[0]
        verts = n.contour
        m = len(verts)
        for i in range(m):
            a1, a2 = verts[i], verts[(i + 1) % m]
            for j in range(i + 2, m):
                if (j + 1) % m == i:
                    continue
                assert not segments_cross(a1, a2, verts[j], verts[(j + 1) % m])


class TestGenCohort:
    def test_balance_and_manifest(self, small_cohort, small_spec):
        slides, manifest = small_cohort
        assert len(slides) == 9
        assert manifest["class_counts"] == {"0": 3, "1": 3, "2": 3}
        assert manifest["seed"] == small_spec.seed
        assert manifest["spec_hash"] == small_spec.hash()

    def test_different_seeds_differ(self, small_spec):
        a, _ = ch.gen_cohort(small_spec)
        b, _ = ch.gen_cohort(dataclasses.replace(small_spec, seed=99))
        assert not ch.cohorts_equal(a, b)

    def test_composition_converges_to_simplices(self):
        spec = ch.default_spec(slides_per_class=8, patches_per_slide=(5, 7),
                               nuclei_per_patch=(55, 75), necrosis_rate=0.05)
        slides, _ = ch.gen_cohort(spec)
        for c in range(spec.classes):
            counts = np.zeros(4)
            for s in slides:
                if s.label != c:
                    continue
                for p in s.patches:
                    for n in p.nuclei:
                        if n.class_label != "necrosis":
                            counts[nf.ONEHOT_CLASSES.index(n.class_label)] += 1
            assert counts.sum() >= 2000
            frac = counts / counts.sum()
            np.testing.assert_allclose(frac, spec.simplices[c], atol=0.05)


class TestContainer:
    def test_round_trip(self, tmp_path, small_cohort, small_spec):
        slides, manifest = small_cohort
        path = tmp_path / "c.argc"
        ch.write_cohort(path, slides, small_spec, manifest)
        back, info = ch.read_cohort(path)
        assert ch.cohorts_equal(slides, back)
        assert info == {"version": 1, "d": small_spec.d, "classes": 3}
        assert (tmp_path / "c.argc.manifest.json").exists()

    def test_exact_size_accounting(self, tmp_path, small_cohort, small_spec):
        slides, _ = small_cohort
        path = tmp_path / "c.argc"
        ch.write_cohort(path, slides, small_spec)
        assert os.path.getsize(path) == ch.expected_file_size(slides, small_spec.d)

    def test_flipped_magic(self, tmp_path, small_cohort, small_spec):
        slides, _ = small_cohort
        path = tmp_path / "c.argc"
        ch.write_cohort(path, slides, small_spec)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        bad = tmp_path / "bad.argc"
        bad.write_bytes(bytes(data))
        with pytest.raises(ch.FormatError, match="offset 0"):
            ch.read_cohort(bad)

    def test_truncation_names_offset(self, tmp_path, small_cohort, small_spec):
        slides, _ = small_cohort
        path = tmp_path / "c.argc"
        ch.write_cohort(path, slides, small_spec)
        data = path.read_bytes()[:-10]
        bad = tmp_path / "trunc.argc"
        bad.write_bytes(data)
        with pytest.raises(ch.FormatError, match="offset"):
            ch.read_cohort(bad)

    def test_corrupted_body_fails_checksum(self, tmp_path, small_cohort, small_spec):
        slides, _ = small_cohort
        path = tmp_path / "c.argc"
        ch.write_cohort(path, slides, small_spec)
        data = bytearray(path.read_bytes())
        data[60] ^= 0x01  # inside the first slide body
        bad = tmp_path / "corrupt.argc"
        bad.write_bytes(bytes(data))
        with pytest.raises(ch.FormatError, match="checksum|label|unknown|truncated"):
            ch.read_cohort(bad)

    def test_version_mismatch(self, tmp_path, small_cohort, small_spec):
        slides, _ = small_cohort
        path = tmp_path / "c.argc"
        ch.write_cohort(path, slides, small_spec)
        data = bytearray(path.read_bytes())
        data[4] = 9
        bad = tmp_path / "ver.argc"
        bad.write_bytes(bytes(data))
        with pytest.raises(ch.FormatError, match="version 9 at offset 4"):
            ch.read_cohort(bad)


class TestNullSpec:
    def test_null_removes_class_dependence(self):
        base = ch.default_spec()
        null = ch.null_spec(base)
        assert len(set(null.simplices)) == 1
        assert all(s == 0.0 for s in null.embed_shift)
        assert null.cluster_class_mod == 0.0
