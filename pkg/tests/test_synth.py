"""Phantom generation, view rendering with seeded noise, direction sets."""

import json

import numpy as np
import pytest

from sonotensor.model import project_volume
from sonotensor.synth import (
    PhantomSpec,
    Region,
    RegionTensor,
    direction_condition,
    make_phantom,
    render_views,
    spanning_directions,
)


def box_spec(**kwargs):
    defaults = dict(
        dims=(6, 6, 6),
        background=RegionTensor((0.5, 0.5, 0.5)),
        regions=(Region("box", RegionTensor((2.0, 1.0, 0.7), (0, 0, 30.0)),
                        min_voxel=(1, 1, 1), max_voxel=(4, 4, 4)),),
    )
    defaults.update(kwargs)
    return PhantomSpec(**defaults)


class TestPhantom:
    def test_identity_background_gives_zero_field(self):
        spec = PhantomSpec(dims=(4, 4, 4), background=RegionTensor((1.0, 1.0, 1.0)))
        truth = make_phantom(spec)
        np.testing.assert_array_equal(truth.params, 0.0)

    def test_regions_store_their_exact_tensors(self):
        spec = box_spec()
        truth = make_phantom(spec)
        inside = truth.params[2, 2, 2]
        outside = truth.params[0, 0, 0]
        np.testing.assert_allclose(inside, spec.regions[0].tensor.log_params(), atol=1e-15)
        np.testing.assert_allclose(outside, spec.background.log_params(), atol=1e-15)

    def test_generation_is_deterministic(self):
        a = make_phantom(box_spec())
        b = make_phantom(box_spec())
        assert np.array_equal(a.params, b.params)

    def test_indefinite_region_rejected(self):
        with pytest.raises(ValueError, match="positive-definite"):
            RegionTensor((1.0, -0.5, 0.2))

    def test_spec_json_roundtrip(self, tmp_path):
        doc = {
            "dims": [5, 5, 5],
            "background": {"eigenvalues": [0.5, 0.6, 0.7], "rotation_deg": [5, 0, 0]},
            "regions": [{"shape": "ellipsoid", "center": [2, 2, 2], "radii": [1.5, 1.5, 1.5],
                         "tensor": {"eigenvalues": [1.0, 2.0, 3.0]}}],
            "noise_sigma": 0.05,
            "seed": 42,
            "n_views": 9,
        }
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(doc))
        spec = PhantomSpec.from_json(path)
        assert spec.dims == (5, 5, 5)
        assert spec.seed == 42
        assert spec.regions[0].shape == "ellipsoid"

    def test_noise_requires_seed(self):
        with pytest.raises(ValueError, match="seed is mandatory"):
            PhantomSpec(dims=(2, 2, 2), noise_sigma=0.1)


class TestRenderViews:
    def test_zero_field_renders_constant_one(self):
        truth = make_phantom(PhantomSpec(dims=(3, 3, 3)))
        views = render_views(truth, spanning_directions(6), 0.0)
        for vol, _ in views:
            np.testing.assert_allclose(vol.values, 1.0, rtol=1e-14)

    def test_noiseless_views_match_projection(self):
        truth = make_phantom(box_spec())
        dirs = spanning_directions(7)
        views = render_views(truth, dirs, 0.0)
        for (vol, geom) in views:
            proj = project_volume(truth, geom.direction)
            np.testing.assert_allclose(vol.values, proj.values, rtol=1e-12)

    def test_noise_statistics(self):
        truth = make_phantom(PhantomSpec(dims=(48, 48, 48),
                                         background=RegionTensor((0.8, 0.9, 1.1))))
        sigma = 0.05
        noiseless = render_views(truth, [[0.0, 0.0, 1.0]], 0.0)[0][0]
        noisy = render_views(truth, [[0.0, 0.0, 1.0]], sigma, seed=123)[0][0]
        noise = noisy.values - noiseless.values
        assert noise.size >= 10 ** 5
        assert abs(noise.std() - sigma) / sigma < 0.05

    def test_noise_clamped_nonnegative(self):
        truth = make_phantom(PhantomSpec(dims=(16, 16, 16),
                                         background=RegionTensor((0.01, 0.01, 0.01))))
        noisy = render_views(truth, [[0.0, 0.0, 1.0]], 0.5, seed=1)[0][0]
        assert noisy.values.min() == 0.0

    def test_same_seed_bit_identical(self):
        truth = make_phantom(box_spec())
        dirs = spanning_directions(6)
        a = render_views(truth, dirs, 0.05, seed=9)
        b = render_views(truth, dirs, 0.05, seed=9)
        for (va, _), (vb, _) in zip(a, b):
            assert np.array_equal(va.values, vb.values)

    def test_views_get_independent_noise_streams(self):
        truth = make_phantom(PhantomSpec(dims=(4, 4, 4)))
        views = render_views(truth, [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]], 0.05, seed=9)
        assert not np.array_equal(views[0][0].values, views[1][0].values)

    def test_rejects_nonunit_direction(self):
        truth = make_phantom(PhantomSpec(dims=(2, 2, 2)))
        with pytest.raises(ValueError, match="unit"):
            render_views(truth, [[0.0, 0.0, 0.5]], 0.0)

    def test_sigma_without_seed_rejected(self):
        truth = make_phantom(PhantomSpec(dims=(2, 2, 2)))
        with pytest.raises(ValueError, match="seed"):
            render_views(truth, [[0.0, 0.0, 1.0]], 0.1)

    def test_rigid_perturbation_round_trips_through_resampling(self):
        from sonotensor.volume import RigidTransform, resample
        truth = make_phantom(box_spec(dims=(10, 10, 10)))
        dirs = spanning_directions(6)[:1]
        shift = RigidTransform(np.eye(3), np.array([2.0, 0.0, 0.0]))
        aligned = render_views(truth, dirs, 0.0)[0][0]
        vol, geom = render_views(truth, dirs, 0.0, transforms=[shift])[0]
        assert not geom.transform.is_identity()
        back = resample(vol, shift, vol.grid)
        joint = back.valid_mask() & aligned.valid_mask()
        assert joint.sum() > 0
        np.testing.assert_allclose(back.values[joint], aligned.values[joint], atol=1e-10)


class TestSpanningDirections:
    def test_minimum_count_enforced(self):
        with pytest.raises(ValueError, match="at least 6"):
            spanning_directions(5)

    def test_six_directions_span(self):
        dirs = spanning_directions(6)
        assert dirs.shape == (6, 3)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        assert direction_condition(dirs) < 100

    def test_nine_directions_well_conditioned(self):
        assert direction_condition(spanning_directions(9)) < 100

    def test_coordinate_axes_are_insufficient(self):
        # Axis-aligned probes only see the tensor diagonal: rank 3 of 6.
        assert direction_condition(np.eye(3)) == np.inf

    def test_larger_sets_stay_conditioned(self):
        for n in (7, 12, 16):
            assert direction_condition(spanning_directions(n)) < 100
