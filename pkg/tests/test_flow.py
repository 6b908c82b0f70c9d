import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowebm import autodiff as ad
from flowebm.datasets import make_target
from flowebm.diagnostics import grid_points
from flowebm.flow import FLOW_PRESETS, FlowModel, FlowTrainConfig, TrainingDivergence, train_flow_mle

from .helpers import numeric_jacobian, perturbed_flow


class TestInvertibility:
    @pytest.mark.parametrize("dim", [1, 2, 3, 4, 7])
    def test_round_trip(self, dim):
        flow = perturbed_flow(dim, depth=4, seed=dim)
        z = np.random.default_rng(0).standard_normal((50, dim)) * 2
        x, ld_fwd = flow.forward(z)
        z_back, ld_inv = flow.inverse(x.data)
        assert np.max(np.abs(z_back.data - z)) <= 1e-9
        np.testing.assert_allclose(ld_fwd.data, -ld_inv.data, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)))
    def test_round_trip_property(self, z):
        flow = perturbed_flow(2, depth=3, seed=4)
        x = flow.push(z)
        assert np.max(np.abs(flow.inverse(x)[0].data - z)) <= 1e-9

    @pytest.mark.parametrize("dim", [1, 2, 3, 4])
    def test_logdet_matches_numeric_jacobian(self, dim):
        flow = perturbed_flow(dim, depth=3, seed=10 + dim)
        for z in np.random.default_rng(dim).standard_normal((5, dim)):
            jac = numeric_jacobian(lambda v: flow.push(v[None])[0], z)
            _, logdet = flow.forward(z[None])
            expected = math.log(abs(np.linalg.det(jac)))
            assert abs(logdet.data[0] - expected) <= 1e-5

    def test_fresh_flow_is_identity_up_to_actnorm(self):
        flow = FlowModel(2, depth=3, width=8, seed=0)
        z = np.random.default_rng(1).standard_normal((10, 2))
        np.testing.assert_allclose(flow.push(z), z[:, ::-1] if flow.depth % 2 else z, atol=0)

    def test_inverse_rejects_bad_shapes(self):
        flow = FlowModel(3, depth=1, width=4)
        with pytest.raises(ad.ShapeError):
            flow.inverse(np.zeros((4, 2)))
        with pytest.raises(ad.ShapeError):
            flow.forward(np.zeros(3))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflowing_inverse_raises(self):
        flow = FlowModel(2, depth=1, width=4)
        flow.layers[0].log_scale.data[...] = -800.0
        with pytest.raises(FloatingPointError):
            flow.inverse(np.ones((1, 2)))


class TestDensity:
    def test_pure_scaling(self):
        # one actnorm with scale 2 and identity coupling: x = 2 z
        flow = FlowModel(2, depth=1, width=4)
        flow.layers[0].log_scale.data[...] = math.log(2.0)
        x = np.random.default_rng(0).standard_normal((20, 2)) * 3
        z = x / 2
        expected = -0.5 * np.sum(z * z, axis=1) - math.log(2 * math.pi) - 2 * math.log(2.0)
        np.testing.assert_allclose(flow.log_prob_np(x), expected, rtol=1e-13)

    def test_depth_zero_is_standard_normal(self):
        flow = FlowModel(2, depth=0)
        x = np.random.default_rng(0).standard_normal((8, 2))
        expected = -0.5 * np.sum(x * x, axis=1) - math.log(2 * math.pi)
        np.testing.assert_allclose(flow.log_prob_np(x), expected, rtol=1e-14)
        assert flow.parameters() == []

    def test_density_integrates_to_one_on_grid(self):
        flow = perturbed_flow(2, depth=3, seed=3, scale=0.15)
        pts, area, _ = grid_points(-12.0, 12.0, 400)
        mass = np.sum(np.exp(flow.log_prob_np(pts))) * area
        assert mass == pytest.approx(1.0, abs=0.01)

    def test_box_mass_matches_sample_frequency(self):
        flow = perturbed_flow(2, depth=3, seed=5, scale=0.15)
        pts, area, ticks = grid_points(-1.0, 1.0, 200)
        quad = np.sum(np.exp(flow.log_prob_np(pts))) * area
        _, x = flow.sample(100_000, np.random.default_rng(0))
        freq = np.mean(np.all(np.abs(x) <= 1.0, axis=1))
        se = math.sqrt(freq * (1 - freq) / len(x))
        assert abs(quad - freq) <= 5 * se + 1e-4


class TestDataInit:
    def test_first_actnorm_standardises(self):
        rng = np.random.default_rng(0)
        x = rng.normal([3.0, -1.0], [0.5, 4.0], size=(500, 2))
        flow = FlowModel(2, depth=2, width=8)
        assert not flow.initialized
        flow.data_init(x)
        assert flow.initialized
        h, _ = flow.layers[0].to_latent(ad.as_tensor(x))
        np.testing.assert_allclose(h.data.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(h.data.std(axis=0), 1, rtol=1e-12)

    def test_constant_coordinate_keeps_unit_scale(self):
        x = np.column_stack([np.arange(10.0), np.full(10, 2.0)])
        flow = FlowModel(2, depth=1, width=4)
        flow.data_init(x)
        assert flow.layers[0].log_scale.data[1] == 0.0


class TestTraining:
    def test_learns_shifted_gaussian(self):
        rng = np.random.default_rng(0)
        data = rng.normal([2.0, -1.0], [0.5, 1.5], size=(4000, 2))
        flow = FlowModel(2, depth=2, width=16)
        trace = train_flow_mle(flow, data, FlowTrainConfig(iterations=400, batch_size=256, lr=5e-3))
        # exact Gaussian entropy
        entropy = math.log(2 * math.pi * math.e) + math.log(0.5) + math.log(1.5)
        nll = -np.mean(flow.log_prob_np(data))
        assert nll == pytest.approx(entropy, abs=0.05)
        assert trace.smoothed(50)[-1] < trace.nll[0]

    def test_depth_zero_nll_equals_cross_entropy(self):
        data = make_target("gaussian-ring").sample(2000, np.random.default_rng(0))
        flow = FlowModel(2, depth=0)
        trace = train_flow_mle(flow, data, FlowTrainConfig(iterations=20, batch_size=len(data)))
        assert len(trace.nll) == 20
        full = 0.5 * 2 * math.log(2 * math.pi) + 0.5 * np.mean(np.sum(data**2, axis=1))
        assert -np.mean(flow.log_prob_np(data)) == pytest.approx(full, rel=1e-12)

    def test_same_seed_is_bitwise_reproducible(self):
        data = np.random.default_rng(0).standard_normal((500, 2))

        def run():
            flow = FlowModel(2, depth=2, width=8, seed=3)
            trace = train_flow_mle(flow, data, FlowTrainConfig(iterations=30, batch_size=64, seed=3))
            return trace.nll, [p.data.copy() for p in flow.parameters()]

        (n1, p1), (n2, p2) = run(), run()
        assert n1 == n2
        assert all(a.tobytes() == b.tobytes() for a, b in zip(p1, p2))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        data = np.random.default_rng(0).standard_normal((100, 2))
        flow = FlowModel(2, depth=1, width=4)
        flow.data_init(data)
        flow.layers[0].log_scale.data[...] = -800.0
        with pytest.raises((TrainingDivergence, FloatingPointError)):
            train_flow_mle(flow, data, FlowTrainConfig(iterations=5, batch_size=10))

    def test_shape_checked(self):
        with pytest.raises(ad.ShapeError):
            train_flow_mle(FlowModel(3, 1, 4), np.zeros((10, 2)), FlowTrainConfig(iterations=1))


@pytest.mark.parametrize("size,depth,width", [("small", 4, 128), ("medium", 8, 128), ("large", 16, 256)])
def test_size_presets(size, depth, width):
    assert FLOW_PRESETS[size] == (depth, width)
    flow = FlowModel.from_preset(2, size)
    assert (flow.depth, flow.width) == (depth, width)
    assert len(flow.layers) == 3 * depth
