"""Nucleus feature families against independent oracles and invariants."""

import numpy as np
import pytest

from slidegeom import nucfeat as nf

UM = nf.MICRONS_PER_PIXEL


def make_nucleus(nid=0, center=(50.0, 50.0), cls="tumor", radius=5.0, tile=None, n_verts=12, jitter=None):
    ang = np.linspace(0, 2 * np.pi, n_verts, endpoint=False)
    r = radius * (1.0 + 0.2 * jitter.uniform(-1, 1, n_verts)) if jitter is not None else radius
    contour = np.stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1)
    if tile is None:
        tile = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 3).astype(np.uint8)
    return nf.Nucleus(id=nid, centroid=center, contour=contour, class_label=cls, intensity_tile=tile)


class TestMorphology:
    def test_unit_square(self):
        sq = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        area, perim, circ, ecc, solidity, extent, _, _ = nf.morphology_features(sq)
        assert area == pytest.approx(UM * UM, abs=1e-12)
        assert perim == pytest.approx(4 * UM, abs=1e-12)
        assert circ == pytest.approx(np.pi / 4, abs=1e-12)
        assert extent == pytest.approx(1.0, abs=1e-12)
        assert solidity == pytest.approx(1.0, abs=1e-12)
        assert ecc == pytest.approx(0.0, abs=1e-9)

    def test_disk_limit(self):
        ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        circle = np.stack([10 * np.cos(ang), 10 * np.sin(ang)], axis=1)
        m = nf.morphology_features(circle)
        assert m[2] >= 0.95       # circularity
        assert m[3] <= 0.1        # eccentricity
        assert 0.0 < m[2] <= 1.0

    def test_area_against_shoelace_oracle(self):
        poly = np.array([[0.0, 0.0], [4.0, -1.0], [6.0, 2.0], [4.0, 5.0], [1.0, 4.5], [-1.0, 2.0]])
        # independent shoelace accumulation
        acc = 0.0
        for i in range(len(poly)):
            x0, y0 = poly[i]
            x1, y1 = poly[(i + 1) % len(poly)]
            acc += x0 * y1 - x1 * y0
        expect_um2 = 0.5 * acc * UM * UM
        area = nf.morphology_features(poly)[0]
        assert area == pytest.approx(expect_um2, abs=1e-9)

    def test_degenerate_polygon_rejected(self):
        flat = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(nf.FeatureError, match="nucleus 7"):
            nf.morphology_features(flat, nucleus_id=7)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        ang = np.sort(rng.uniform(0, 2 * np.pi, 10))
        poly = np.stack([5 * np.cos(ang), 3 * np.sin(ang)], axis=1)
        base = nf.morphology_features(poly)
        for dx, dy in [(100.0, -40.0), (0.123, 987.0)]:
            shifted = nf.morphology_features(poly + np.array([dx, dy]))
            np.testing.assert_allclose(shifted, base, atol=1e-9, rtol=0)

    def test_rotation_90_invariants(self):
        rng = np.random.default_rng(4)
        ang = np.sort(rng.uniform(0, 2 * np.pi, 12))
        poly = np.stack([6 * np.cos(ang), 2.5 * np.sin(ang)], axis=1)
        rotated = np.stack([-poly[:, 1], poly[:, 0]], axis=1)  # exact 90 degrees
        a = nf.morphology_features(poly)
        b = nf.morphology_features(rotated)
        # area, perimeter, circularity, eccentricity, solidity; extent may change
        np.testing.assert_allclose(b[[0, 1, 2, 3, 4]], a[[0, 1, 2, 3, 4]], atol=1e-9, rtol=0)


class TestGlcm:
    def test_constant_tile(self):
        P = nf.glcm(np.full((6, 6), 123, np.uint8))
        assert P[0, 0] == 1.0 and P.sum() == 1.0
        stats = nf.glcm_stats(P)
        assert stats[0] == 0.0 and stats[1] == 1.0  # contrast, energy

    def test_two_by_two_hand_count(self):
        L = 8
        tile = np.array([[0, L - 1], [0, L - 1]], dtype=np.uint8)
        P = nf.glcm(tile, levels=L, offsets=((0, 1),))
        assert P[0, L - 1] == 0.5 and P[L - 1, 0] == 0.5
        stats = nf.glcm_stats(P)
        assert stats[0] == pytest.approx((L - 1) ** 2)  # contrast
        assert stats[1] == pytest.approx(0.5)           # energy

    def test_uniform_matrix_stats(self):
        L = 8
        P = np.full((L, L), 1.0 / (L * L))
        stats = nf.glcm_stats(P)
        assert stats[1] == pytest.approx(1.0 / L**2)
        assert stats[4] == pytest.approx(2.0 * np.log(L))

    def test_diagonal_matrix_stats(self):
        P = np.diag(np.full(8, 1.0 / 8))
        stats = nf.glcm_stats(P)
        assert stats[0] == 0.0 and stats[2] == pytest.approx(1.0)  # contrast, homogeneity

    def _brute_force(self, tile, levels, offsets):
        # exhaustive pair enumeration, independent of the sliced implementation
        t = tile.astype(np.int64)
        vmin, vmax = t.min(), t.max()
        span = vmax - vmin + 1
        q = ((t - vmin) * levels) // span
        P = np.zeros((levels, levels))
        rows, cols = t.shape
        for r in range(rows):
            for c in range(cols):
                for dr, dc in offsets:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        P[q[r, c], q[rr, cc]] += 1
                        P[q[rr, cc], q[r, c]] += 1
        return P / P.sum()

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            shape = (int(rng.integers(2, 12)), int(rng.integers(2, 12)))
            tile = rng.integers(0, 256, size=shape).astype(np.uint8)
            P = nf.glcm(tile)
            expect = self._brute_force(tile, 8, nf.DEFAULT_GLCM_OFFSETS)
            np.testing.assert_allclose(P, expect, atol=1e-12, rtol=0)
            np.testing.assert_allclose(P, P.T, atol=0, rtol=0)  # symmetric by construction
            assert abs(P.sum() - 1.0) < 1e-12

    def test_offset_reach_error(self):
        with pytest.raises(nf.FeatureError, match="offset"):
            nf.glcm(np.zeros((2, 2), np.uint8), offsets=((0, 3),))
        with pytest.raises(nf.FeatureError, match="at least 2x2"):
            nf.glcm(np.zeros((1, 5), np.uint8))


class TestTopology:
    def test_isolated(self):
        n = make_nucleus(0)
        out = nf.topology_features(n, [n], radius_um=54.9)
        np.testing.assert_allclose(out, [0.0, 54.9, 0.0])

    def test_pair_20um(self):
        a = make_nucleus(0, center=(0.0, 0.0))
        b = make_nucleus(1, center=(20.0 / UM, 0.0))
        for target, other in [(a, b), (b, a)]:
            count, mean_d, dens = nf.topology_features(target, [a, b])
            assert count == 1.0
            assert mean_d == pytest.approx(20.0, abs=1e-9)
            assert dens == pytest.approx(1e4 / (np.pi * 54.9**2))

    def test_counts_match_brute_force_on_many_configs(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            m = int(rng.integers(2, 30))
            pts = rng.uniform(0, 400, size=(m, 2))
            nuclei = [make_nucleus(i, center=tuple(pts[i]), tile=np.zeros((2, 2), np.uint8), n_verts=4)
                      for i in range(m)]
            i = int(rng.integers(m))
            count = nf.topology_features(nuclei[i], nuclei)[0]
            d = np.hypot(*(pts - pts[i]).T) * UM
            expect = int(np.sum(d < 54.9)) - 1  # exclude self
            assert count == expect


class TestFeatureVector:
    def test_length_and_onehot(self):
        n = make_nucleus(0, cls="stroma")
        vec = nf.nucleus_feature_vector(n, [n])
        assert vec.shape == (20,)
        assert vec[16:].sum() == 1.0 and vec[16 + nf.ONEHOT_CLASSES.index("stroma")] == 1.0

    def test_necrosis_rejected(self):
        n = make_nucleus(0, cls="necrosis")
        with pytest.raises(nf.FilteredClassError):
            nf.nucleus_feature_vector(n, [n])

    def test_one_nucleus_per_class_slide(self):
        patch = [make_nucleus(i, center=(30.0 * i + 10, 40.0), cls=c, radius=3.0 + i)
                 for i, c in enumerate(nf.ONEHOT_CLASSES)]
        mats = nf.slide_feature_matrices([patch])
        m = mats[0]
        assert m.shape == (4, 20)
        assert np.all(np.isfinite(m))
        assert len({tuple(row[16:]) for row in m}) == 4  # distinct one-hots

    def test_per_slide_columns_centered(self):
        rng = np.random.default_rng(13)
        patches = []
        for _ in range(4):
            patch = []
            for i in range(50):
                cls = nf.ONEHOT_CLASSES[int(rng.integers(4))]
                center = tuple(rng.uniform(20, 1000, size=2))
                tile = rng.integers(0, 256, size=(9, 9)).astype(np.uint8)
                patch.append(make_nucleus(i, center=center, cls=cls,
                                          radius=float(rng.uniform(3, 9)), tile=tile, jitter=rng))
            patches.append(patch)
        mats = nf.slide_feature_matrices(patches)
        stacked = np.vstack(mats)
        assert stacked.shape == (200, 20)
        np.testing.assert_allclose(stacked[:, :16].mean(axis=0), np.zeros(16), atol=1e-9)
        sd = stacked[:, :16].std(axis=0)
        assert np.all((np.abs(sd - 1.0) < 1e-9) | (sd == 0.0))

    def test_necrosis_filtered_in_slide_matrices(self):
        patch = [make_nucleus(0, cls="tumor"), make_nucleus(1, center=(80.0, 80.0), cls="necrosis")]
        mats = nf.slide_feature_matrices([patch])
        assert mats[0].shape == (1, 20)
