import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumescan.detector import oracle_detect
from plumescan.raster import GridGeometry, SceneGrid, extract_patch
from plumescan.synthgen import (
    CALIBRATION_K, ArtifactSpec, PlacementError, PlumeSpec, SynthConfig, artifact_footprint,
    gaussian_plume_field, generate_scene, inject_artifact, inject_plume, label_floor,
)

GEOM = GridGeometry(128, 128)


def flat_scene(shape=(128, 128), valid=None):
    h, w = shape
    v = np.ones(shape, bool) if valid is None else valid
    return SceneGrid(GridGeometry(w, h), np.where(v, 1900.0, 0.0), v, np.full(shape, 0.2))


def centerline_point(spec, x_m, y_m=0.0):
    """Unaveraged plume formula at downwind distance x, crosswind offset y."""
    sigma = spec.spread_a * x_m ** spec.spread_b
    return (CALIBRATION_K * spec.emission_rate / (math.sqrt(2 * math.pi) * sigma * spec.wind_speed)
            * math.exp(-y_m ** 2 / (2 * sigma ** 2)))


class TestPlumeField:
    def test_calibration(self):
        spec = PlumeSpec((0, 0), 1.0, wind_speed=3.0)
        assert centerline_point(spec, 200.0) == pytest.approx(100.0, rel=1e-12)

    def test_zero_emission(self):
        f = gaussian_plume_field(PlumeSpec((64, 64), 0.0), GEOM)
        assert not f.any()

    def test_linearity_exact(self):
        a = gaussian_plume_field(PlumeSpec((64, 64), 1.3, 45.0), GEOM)
        b = gaussian_plume_field(PlumeSpec((64, 64), 2.6, 45.0), GEOM)
        normal = a > 1e-300  # subnormal tails round differently
        assert np.array_equal(b[normal], 2 * a[normal])
        assert np.all(np.abs(b - 2 * a) <= 1e-300)

    def test_rotation_equivariance(self):
        odd = GridGeometry(129, 129)  # source at the exact center
        north = gaussian_plume_field(PlumeSpec((64, 64), 2.0, 0.0), odd)
        east = gaussian_plume_field(PlumeSpec((64, 64), 2.0, 90.0), odd)
        # rotating the north-pointing field clockwise by 90 degrees about the source
        rotated = np.rot90(north, k=-1)
        scale = north.max()
        assert np.max(np.abs(rotated - east)) <= 1e-3 * scale

    def test_upwind_zero_and_nonnegative(self):
        f = gaussian_plume_field(PlumeSpec((64, 64), 2.0, 0.0), GEOM)
        assert f.min() >= 0
        # wind toward north: the plume lies at rows above the source
        assert not f[66:, :].any()

    def test_pixel_average_matches_formula_far_downwind(self):
        spec = PlumeSpec((100, 64), 2.0, 0.0)
        f = gaussian_plume_field(spec, GEOM)
        x = 40 * GEOM.pixel_size
        assert f[60, 64] == pytest.approx(centerline_point(spec, x), rel=0.02)

    def test_source_outside_and_bad_wind(self):
        with pytest.raises(ValueError):
            gaussian_plume_field(PlumeSpec((200, 0), 1.0), GEOM)
        with pytest.raises(ValueError):
            PlumeSpec((0, 0), 1.0, wind_speed=0.0)

    @settings(max_examples=20)
    @given(st.floats(0.5, 4.0), st.floats(0.01, 2.0))
    def test_mass_monotone(self, q, dq):
        lo = gaussian_plume_field(PlumeSpec((64, 64), q, 30.0), GEOM).sum()
        hi = gaussian_plume_field(PlumeSpec((64, 64), q + dq, 30.0), GEOM).sum()
        assert hi > lo


class TestInjectPlume:
    def test_exact_increase(self):
        scene = flat_scene()
        spec = PlumeSpec((64, 64), 2.0, 135.0)
        out, lab = inject_plume(scene, spec, floor=1.0)
        assert np.allclose(out.xch4 - scene.xch4, gaussian_plume_field(spec, GEOM), rtol=0, atol=1e-9)
        r, c, h, w = lab.mask.bbox
        assert r <= 64 < r + h and c <= 64 < c + w

    def test_label_soundness(self):
        spec = PlumeSpec((64, 64), 2.0, 200.0)
        field = gaussian_plume_field(spec, GEOM)
        floor = label_floor(35.0)
        _, lab = inject_plume(flat_scene(), spec, floor=floor)
        dense = np.zeros(GEOM.shape, bool)
        r, c, h, w = lab.mask.bbox
        dense[r:r + h, c:c + w] = lab.mask.data
        assert field[dense].min() >= floor
        assert dense[field >= 2 * floor].all()

    def test_bad_pixel_rejection(self):
        spec = PlumeSpec((64, 64), 2.0, 90.0)
        fp = gaussian_plume_field(spec, GEOM) >= 1.0
        idx = np.argwhere(fp)
        valid = np.ones(GEOM.shape, bool)
        bad = idx[: int(math.ceil(0.3 * len(idx)))]
        valid[bad[:, 0], bad[:, 1]] = False
        with pytest.raises(PlacementError):
            inject_plume(flat_scene(valid=valid), spec, floor=1.0)

    def test_overlap_rejection(self):
        scene, lab = inject_plume(flat_scene(), PlumeSpec((64, 40), 2.0, 90.0), floor=1.0)
        with pytest.raises(PlacementError):
            inject_plume(scene, PlumeSpec((64, 50), 2.0, 90.0), floor=1.0, existing=[lab])

    def test_noise_free_floor(self):
        assert label_floor(0.0) == 1.0 and label_floor(35.0) == 35.0


class TestArtifacts:
    def test_stripe_rows(self):
        scene = flat_scene()
        out = inject_artifact(scene, ArtifactSpec("stripe", 50.0, (10, 0), 1))
        diff = out.xch4 - scene.xch4
        assert np.all(diff[10] == 50.0)
        assert not np.delete(diff, 10, axis=0).any()

    def test_cloud_reduces_valid(self):
        scene = flat_scene()
        out = inject_artifact(scene, ArtifactSpec("cloud_patch", 50.0, (60, 60), 8))
        assert out.valid.sum() < scene.valid.sum()

    def test_small_enhancement_fires_oracle(self):
        cfg = SynthConfig(geometry=GEOM, noise_std=35.0, seed=3)
        scene, _, _ = generate_scene(cfg)
        out = inject_artifact(scene, ArtifactSpec("small_enhancement", 5 * 35.0, (64, 64), 6))
        dets = oracle_detect(extract_patch(out, (0, 0), 128), k=3.0)
        hits = [d for d in dets if d.bbox[0] <= 64 < d.bbox[0] + d.bbox[2]
                and d.bbox[1] <= 64 < d.bbox[1] + d.bbox[3]]
        assert hits

    def test_dispersed_has_no_strong_peak(self):
        scene = flat_scene()
        out = inject_artifact(scene, ArtifactSpec("dispersed_enhancement", 500.0, (64, 64), 15),
                              noise_std=10.0)
        assert (out.xch4 - scene.xch4).max() <= 1.5 * 10.0 + 1e-9

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ArtifactSpec("smudge", 1.0, (0, 0), 1)

    def test_footprint_contains_perturbation(self):
        scene = flat_scene()
        for kind in ("cloud_patch", "small_enhancement"):
            spec = ArtifactSpec(kind, 100.0, (64, 64), 6)
            out = inject_artifact(scene, spec)
            changed = (np.abs(out.xch4 - scene.xch4) > 1.0) | (out.valid != scene.valid)
            assert not (changed & ~artifact_footprint(spec, GEOM.shape)).any()


class TestGenerateScene:
    def test_deterministic(self):
        cfg = SynthConfig(geometry=GEOM, n_random_plumes=1,
                          random_artifacts=("stripe", "small_enhancement"), seed=42)
        a, la, aa = generate_scene(cfg)
        b, lb, ab = generate_scene(cfg)
        assert a == b and aa == ab and [l.to_json() for l in la] == [l.to_json() for l in lb]

    def test_pure_noise(self):
        scene, labels, arts = generate_scene(SynthConfig(geometry=GEOM, seed=1))
        assert labels == [] and arts == []
        z = scene.xch4 - 1900.0
        assert abs(z.std() - 35.0) < 2.0

    def test_three_disjoint_plumes(self):
        cfg = SynthConfig(geometry=GridGeometry(600, 600), n_random_plumes=3, seed=5)
        _, labels, _ = generate_scene(cfg)
        assert len(labels) == 3
        dense = np.zeros((600, 600), np.int32)
        for lab in labels:
            r, c, h, w = lab.mask.bbox
            dense[r:r + h, c:c + w] += lab.mask.data
        assert dense.max() == 1

    def test_placement_exhausted(self):
        # an almost fully invalid scene can never host a plume
        cfg = SynthConfig(geometry=GridGeometry(64, 64), n_random_plumes=1, invalid_fraction=0.95,
                          seed=0)
        with pytest.raises(PlacementError, match="placement exhausted"):
            generate_scene(cfg)

    def test_float32_quantized(self):
        scene, _, _ = generate_scene(SynthConfig(geometry=GEOM, seed=2))
        assert np.array_equal(scene.xch4, scene.xch4.astype(np.float32))
