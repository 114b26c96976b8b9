import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plumescan.raster import (
    INVALID_SENTINEL, BinaryMask, GridGeometry, RasterError, SceneGrid, extract_patch,
    load_probability, load_scene, normalize, rle_decode, rle_encode, save_probability, save_scene,
)


def scalar_zscore(values, valid):
    """Pixel-by-pixel population z-score, written without numpy reductions."""
    vs = [v for v, ok in zip(values, valid) if ok]
    n = len(vs)
    mean = math.fsum(vs) / n
    var = math.fsum((v - mean) ** 2 for v in vs) / n
    std = var ** 0.5
    out = []
    for v, ok in zip(values, valid):
        if not ok:
            out.append(INVALID_SENTINEL)
        elif std < 1e-12:
            out.append(0.0)
        else:
            out.append((v - mean) / std)
    return out


def make_scene(h=10, w=10, seed=0, albedo=True):
    rng = np.random.default_rng(seed)
    xch4 = 1900 + 30 * rng.standard_normal((h, w))
    valid = np.ones((h, w), dtype=bool)
    alb = rng.uniform(0.05, 0.5, (h, w)) if albedo else None
    return SceneGrid(GridGeometry(w, h), xch4, valid, alb)


class TestNormalize:
    def test_two_values(self):
        out = normalize(np.array([[0.0, 2.0]]), np.array([[True, True]]))
        assert out.tolist() == [[-1.0, 1.0]]

    def test_constant(self):
        out = normalize(np.full((1, 3), 5.0), np.ones((1, 3), bool))
        assert out.tolist() == [[0.0, 0.0, 0.0]]

    def test_large_constant(self):
        # the float mean of ten copies is not exactly the value itself
        out = normalize(np.full((2, 5), 7282.44970966), np.ones((2, 5), bool))
        assert not out.any()

    def test_single_valid_pixel(self):
        vals, valid = [1.0, 3.0], [True, False]
        out = normalize(np.array([vals]), np.array([valid]))
        assert out.ravel().tolist() == scalar_zscore(vals, valid) == [0.0, -10.0]

    def test_empty_patch(self):
        with pytest.raises(RasterError, match="empty patch"):
            normalize(np.zeros((2, 2)), np.zeros((2, 2), bool))

    @given(arrays(np.float64, (6, 7), elements=st.floats(-1e4, 1e4)),
           arrays(np.bool_, (6, 7)))
    def test_matches_scalar_reference(self, vals, valid):
        if not valid.any():
            return
        v = vals[valid]
        spread = v.max() - v.min()
        if 0 < spread < 1e-6 * max(1.0, np.abs(v).max()):
            return  # ill-conditioned: both routes only see rounding noise
        out = normalize(vals, valid)
        ref = scalar_zscore(vals.ravel().tolist(), valid.ravel().tolist())
        assert np.allclose(out.ravel(), ref, atol=1e-6)
        assert np.all(out[~valid] == INVALID_SENTINEL)

    @given(arrays(np.float64, (8, 8), elements=st.floats(-1e3, 1e3)), arrays(np.bool_, (8, 8)))
    def test_moments_and_idempotence(self, vals, valid):
        if valid.sum() < 2:
            return
        z = normalize(vals, valid)
        v = z[valid]
        if np.all(v == 0):
            return
        assert abs(v.mean()) < 1e-6 and abs(v.std() - 1) < 1e-6
        again = normalize(z, valid)
        assert np.allclose(again[valid], z[valid], atol=1e-6)


class TestPatch:
    def test_full_scene_patch(self):
        scene = make_scene()
        p = extract_patch(scene, (0, 0), 10)
        assert p.origin == (0, 0) and p.values.shape == (10, 10)
        assert np.allclose(p.values, normalize(scene.xch4, scene.valid))

    def test_out_of_bounds(self):
        with pytest.raises(RasterError, match="out of bounds"):
            extract_patch(make_scene(), (5, 5), 10)

    def test_invalid_block_sentinel(self):
        scene = make_scene(12, 12)
        valid = np.ones((12, 12), bool)
        valid[3:6, 4:8] = False
        scene = scene.replace(valid=valid)
        p = extract_patch(scene, (2, 2), 8)
        assert np.all(p.values[1:4, 2:6] == -10.0)
        assert np.all(p.values[p.valid] != -10.0)

    @given(st.integers(-3, 12), st.integers(-3, 12), st.integers(1, 12))
    def test_never_reads_outside(self, r, c, size):
        scene = make_scene()
        inside = r >= 0 and c >= 0 and r + size <= 10 and c + size <= 10
        if inside:
            p = extract_patch(scene, (r, c), size)
            assert p.values.shape == (size, size)
        else:
            with pytest.raises(RasterError):
                extract_patch(scene, (r, c), size)


class TestRle:
    def test_all_false(self):
        assert rle_encode(np.zeros((2, 2), bool)) == [4]

    def test_all_true(self):
        assert rle_encode(np.ones((2, 2), bool)) == [0, 4]

    def test_row_major(self):
        m = np.array([[0, 1, 1], [1, 0, 0]], bool)
        assert rle_encode(m) == [1, 3, 2]

    def test_corrupt(self):
        with pytest.raises(RasterError, match="corrupt RLE"):
            rle_decode([1, 2], (2, 2))
        with pytest.raises(RasterError, match="corrupt RLE"):
            rle_decode([5, -1], (2, 2))

    @settings(max_examples=1000)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_roundtrip(self, h, w, seed, density):
        m = np.random.default_rng(seed).random((h, w)) < density
        runs = rle_encode(m)
        assert sum(runs) == h * w
        assert np.array_equal(rle_decode(runs, (h, w)), m)

    def test_random_64x64(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = rng.random((64, 64)) < rng.random()
            assert np.array_equal(rle_decode(rle_encode(m), m.shape), m)


class TestBinaryMask:
    def test_from_dense_is_tight(self):
        d = np.zeros((6, 6), bool)
        d[2:4, 1:5] = True
        m = BinaryMask.from_dense(d, (10, 20))
        assert m.bbox == (12, 21, 2, 4) and m.area == 8
        assert m.data[0].any() and m.data[-1].any() and m.data[:, 0].any() and m.data[:, -1].any()

    def test_empty_rejected(self):
        with pytest.raises(RasterError):
            BinaryMask.from_dense(np.zeros((3, 3), bool))

    def test_json_roundtrip(self):
        d = np.eye(4, dtype=bool)
        m = BinaryMask.from_dense(d, (3, 4))
        doc = json.loads(json.dumps(m.to_json()))
        assert BinaryMask.from_json(doc) == m

    def test_coords_row_major(self):
        m = BinaryMask.from_dense(np.array([[1, 0], [1, 1]], bool), (5, 5))
        assert m.coords().tolist() == [[5, 5], [6, 5], [6, 6]]


class TestSceneGrid:
    def test_validation(self):
        g = GridGeometry(3, 2)
        with pytest.raises(RasterError):
            SceneGrid(g, np.zeros((3, 2)), np.ones((3, 2), bool))
        x = np.zeros((2, 3))
        x[0, 0] = np.nan
        with pytest.raises(RasterError):
            SceneGrid(g, x, np.ones((2, 3), bool))
        SceneGrid(g, x, np.array([[0, 1, 1], [1, 1, 1]], bool))  # NaN allowed where invalid
        with pytest.raises(RasterError):
            SceneGrid(g, np.zeros((2, 3)), np.ones((2, 3), bool), np.full((2, 3), 1.5))

    def test_geometry_invariants(self):
        with pytest.raises(RasterError):
            GridGeometry(0, 3)
        with pytest.raises(RasterError):
            GridGeometry(3, 3, pixel_size=0)

    def test_immutable(self):
        s = make_scene()
        with pytest.raises(ValueError):
            s.xch4[0, 0] = 1.0


class TestFiles:
    def test_scene_roundtrip(self, tmp_path):
        s = make_scene(7, 9)
        s = s.replace(xch4=s.xch4.astype(np.float32).astype(np.float64),
                      albedo=s.albedo.astype(np.float32).astype(np.float64))
        save_scene(s, tmp_path / "s.sgrid")
        assert load_scene(tmp_path / "s.sgrid") == s

    def test_scene_without_albedo(self, tmp_path):
        s = make_scene(4, 5, albedo=False)
        s = s.replace(xch4=s.xch4.astype(np.float32))
        save_scene(s, tmp_path / "s.sgrid")
        back = load_scene(tmp_path / "s.sgrid")
        assert back.albedo is None and back == s

    def test_header_layout(self, tmp_path):
        save_scene(make_scene(2, 3), tmp_path / "s.sgrid")
        raw = (tmp_path / "s.sgrid").read_bytes()
        header = json.loads(raw[:raw.index(b"\n")])
        assert header == {"magic": "SGRID", "version": 1, "width": 3, "height": 2,
                          "pixel_size_m": 45.0, "channels": ["xch4", "valid", "albedo"]}
        assert len(raw) - raw.index(b"\n") - 1 == 6 * 4 + 6 + 6 * 4

    def test_truncated(self, tmp_path):
        p = tmp_path / "s.sgrid"
        save_scene(make_scene(), p)
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(RasterError, match="truncated payload"):
            load_scene(p)

    def test_dims_disagree_with_payload(self, tmp_path):
        p = tmp_path / "s.sgrid"
        header = {"magic": "SGRID", "version": 1, "width": 2, "height": 3,
                  "pixel_size_m": 45.0, "channels": ["xch4"]}
        p.write_bytes(json.dumps(header).encode() + b"\n" + np.zeros(5, "<f4").tobytes())
        with pytest.raises(RasterError):
            load_scene(p)

    def test_magic_and_overflow(self, tmp_path):
        p = tmp_path / "s.sgrid"
        save_scene(make_scene(), p)
        with pytest.raises(RasterError, match="magic"):
            load_probability(p)
        header = {"magic": "SGRID", "version": 1, "width": 2**40, "height": 3,
                  "pixel_size_m": 45.0, "channels": ["xch4", "valid"]}
        p.write_bytes(json.dumps(header).encode() + b"\n")
        with pytest.raises(RasterError, match="overflow"):
            load_scene(p)

    def test_probability_roundtrip(self, tmp_path):
        g = GridGeometry(5, 4)
        prob = np.random.default_rng(0).random((4, 5)).astype(np.float32).astype(np.float64)
        save_probability(prob, g, tmp_path / "p.pgrid")
        g2, back = load_probability(tmp_path / "p.pgrid")
        assert g2.shape == g.shape and np.array_equal(back, prob)
