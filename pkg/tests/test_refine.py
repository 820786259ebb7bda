import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import bilinear_oracle
from leafmask.errors import ConfigError, ShapeError
from leafmask.params import flatten, unflatten
from leafmask.refine import (
    RANDOM,
    UNCERTAIN,
    PointSet,
    RefineConfig,
    binarize,
    draw_candidates,
    init_point_predictor,
    point_predict,
    refine_mask,
    refine_mask_trace,
    sample_points_train,
    select_points_inference,
    uncertainty,
)
from leafmask.tensor import resize_bilinear, sample_points_bilinear


def u_scalar(l):
    return -abs(1 / (1 + math.exp(-l)) - 0.5)


def candidate_uncertainty(logits, seed, cfg):
    cand = draw_candidates(logits.shape, cfg.n_candidates, np.random.default_rng(seed))
    u = sample_points_bilinear(uncertainty(logits.astype(np.float64))[None, None], cand)[0, 0]
    return cand, u


class TestUncertainty:
    def test_maximum_at_zero(self):
        assert uncertainty(np.array([0.0]))[0] == 0.0

    def test_saturated(self):
        np.testing.assert_allclose(uncertainty(np.array([20.0, -20.0])), -0.5, atol=1e-8)

    def test_ordering(self):
        l = np.array([0.0, 1.0, -2.0])
        u = uncertainty(l)
        assert u[0] > u[1] > u[2]
        np.testing.assert_allclose(u, [u_scalar(v) for v in l], atol=1e-15)


class TestTrainSampling:
    def test_table_defaults_small_n(self, rng):
        cfg = RefineConfig(beta=3, alpha=0.75, n_points=8)
        assert cfg.n_candidates == 24 and cfg.n_important == 6
        ps = sample_points_train(rng.standard_normal((7, 7)), cfg, seed=3)
        assert len(ps) == 8
        assert ps.kinds.count(UNCERTAIN) == 6 and ps.kinds.count(RANDOM) == 2

    def test_alpha_one_is_top_n(self, rng):
        cfg = RefineConfig(alpha=1.0, n_points=10)
        logits = rng.standard_normal((6, 6)) * 3
        ps = sample_points_train(logits, cfg, seed=11)
        assert set(ps.kinds) == {UNCERTAIN}
        cand, u = candidate_uncertainty(logits, 11, cfg)
        top = cand[np.argsort(-u, kind="stable")[:10]]
        np.testing.assert_array_equal(ps.coords, top)

    def test_selected_dominate_unselected(self, rng):
        cfg = RefineConfig(n_points=16)
        logits = rng.standard_normal((9, 9)) * 4
        ps = sample_points_train(logits, cfg, seed=5)
        cand, u = candidate_uncertainty(logits, 5, cfg)
        key = {tuple(c): v for c, v in zip(cand, u)}
        chosen = [key[tuple(c)] for c in ps.subset(UNCERTAIN)]
        chosen_set = {tuple(c) for c in ps.subset(UNCERTAIN)}
        others = [v for c, v in key.items() if c not in chosen_set]
        assert min(chosen) >= max(others)

    def test_constant_map_ties(self):
        cfg = RefineConfig(n_points=5)
        ps = sample_points_train(np.zeros((4, 4)), cfg, seed=2)
        cand, _ = candidate_uncertainty(np.zeros((4, 4)), 2, cfg)
        np.testing.assert_array_equal(ps.subset(UNCERTAIN), cand[:cfg.n_important])

    def test_reproducible_and_distinct(self, rng):
        cfg = RefineConfig(n_points=30)
        logits = rng.standard_normal((5, 8))
        a = sample_points_train(logits, cfg, seed=9)
        b = sample_points_train(logits, cfg, seed=9)
        assert a.coords.tobytes() == b.coords.tobytes() and a.kinds == b.kinds
        assert len(np.unique(a.coords, axis=0)) == 30
        assert np.all(a.coords >= -0.5) and np.all(a.coords[:, 0] <= 7.5) and np.all(a.coords[:, 1] <= 4.5)

    def test_oversampling_beyond_grid(self):
        ps = sample_points_train(np.zeros((2, 2)), RefineConfig(n_points=50), seed=0)
        assert len(ps) == 50


class TestInferenceSelection:
    def test_all_points(self, rng):
        ps = select_points_inference(rng.standard_normal((3, 4)), 12)
        assert sorted(map(tuple, ps.coords)) == [(x, y) for x in range(4) for y in range(3)]

    def test_single_uncertain_pixel_first(self):
        logits = np.full((5, 5), 30.0)
        logits[3, 1] = 0.0
        ps = select_points_inference(logits, 1)
        np.testing.assert_array_equal(ps.coords, [[1, 3]])

    def test_two_by_two_example(self):
        ps = select_points_inference(np.array([[0.1, -0.1], [3.0, -3.0]]), 2)
        assert {tuple(c) for c in ps.coords} == {(0.0, 0.0), (1.0, 0.0)}

    def test_too_many(self):
        with pytest.raises(ConfigError):
            select_points_inference(np.zeros((2, 2)), 5)

    def test_tie_break_by_flat_index(self, rng):
        logits = rng.choice([-1.0, 0.5, 1.0, 2.0], size=(6, 6))
        ps = select_points_inference(logits, 10)
        flat = logits.ravel()
        ranked = sorted(range(36), key=lambda i: (-u_scalar(flat[i]), i))[:10]
        want = [(i % 6, i // 6) for i in ranked]
        assert [tuple(c) for c in ps.coords.astype(int)] == want


class TestPointPredictor:
    def test_zero_network(self, rng):
        p = init_point_predictor(3, hidden=8, n_layers=3, zero=True)
        pts = PointSet(rng.uniform(0, 4, (6, 2)), (UNCERTAIN,) * 6)
        out = point_predict(rng.standard_normal((3, 8, 8)).astype(np.float32),
                            rng.standard_normal((5, 5)).astype(np.float32), pts, p)
        assert out.shape == (6,) and np.all(out == 0)

    def test_matches_oracle(self, rng):
        p = init_point_predictor(2, hidden=4, n_layers=3, rng=rng, dtype=np.float64)
        p = unflatten(p, {k: rng.standard_normal(v.shape) for k, v in flatten(p).items()})
        fine = rng.standard_normal((2, 10, 10))
        coarse = rng.standard_normal((5, 5))
        coords = rng.uniform(-0.5, 4.5, (4, 2))
        got = point_predict(fine, coarse, PointSet(coords, (RANDOM,) * 4), p)
        for k, (x, y) in enumerate(coords):
            fx, fy = (x + 0.5) * 2 - 0.5, (y + 0.5) * 2 - 0.5
            c = bilinear_oracle(coarse, x, y)
            h = np.array([bilinear_oracle(fine[ch], fx, fy) for ch in range(2)])
            for i, layer in enumerate(p.layers):
                h = layer.weight[:, :, 0, 0] @ np.append(h, c) + layer.bias
                if i < len(p.layers) - 1:
                    h = np.maximum(h, 0)
            assert got[k] == pytest.approx(h[0], abs=1e-12)

    def test_identical_inputs_identical_outputs(self, rng):
        p = init_point_predictor(3, hidden=8, rng=rng)
        fine = rng.standard_normal((3, 6, 6)).astype(np.float32)
        coarse = rng.standard_normal((3, 3)).astype(np.float32)
        coords = np.repeat(rng.uniform(0, 2, (1, 2)), 5, axis=0)
        out = point_predict(fine, coarse, PointSet(coords, (RANDOM,) * 5), p)
        assert np.all(out == out[0])

    def test_order_invariant(self, rng):
        p = init_point_predictor(3, hidden=8, rng=rng)
        fine = rng.standard_normal((3, 6, 6)).astype(np.float32)
        coarse = rng.standard_normal((3, 3)).astype(np.float32)
        coords = rng.uniform(0, 2, (7, 2))
        perm = rng.permutation(7)
        a = point_predict(fine, coarse, PointSet(coords, (RANDOM,) * 7), p)
        b = point_predict(fine, coarse, PointSet(coords[perm], (RANDOM,) * 7), p)
        np.testing.assert_array_equal(a[perm], b)

    def test_channel_mismatch(self, rng):
        p = init_point_predictor(3, hidden=4)
        with pytest.raises(ShapeError):
            point_predict(np.zeros((2, 4, 4), np.float32), np.zeros((2, 2), np.float32),
                          PointSet(np.zeros((1, 2)), (RANDOM,)), p)


class TestRefineMask:
    def test_zero_steps(self, rng):
        cfg = RefineConfig(steps=0, hidden=4)
        coarse = rng.standard_normal((5, 5)).astype(np.float32)
        out = refine_mask(coarse, np.zeros((2, 4, 4), np.float32), cfg, init_point_predictor(2, 4))
        np.testing.assert_array_equal(out, coarse)

    def test_default_resolution(self, rng):
        cfg = RefineConfig(hidden=8)
        assert (cfg.n_points, cfg.steps) == (784, 3)
        p = init_point_predictor(4, hidden=8, rng=rng)
        out = refine_mask(rng.standard_normal((56, 56)).astype(np.float32),
                          rng.standard_normal((4, 28, 28)).astype(np.float32), cfg, p)
        assert out.shape == (448, 448)

    @pytest.mark.parametrize("steps", [1, 2, 3])
    def test_zero_predictor_substitution(self, rng, steps):
        cfg = RefineConfig(n_points=20, steps=steps, hidden=4)
        p = init_point_predictor(2, 4, zero=True)
        coarse = rng.standard_normal((6, 6)).astype(np.float32)
        out, trace = refine_mask_trace(coarse, np.zeros((2, 5, 5), np.float32), cfg, p)
        m = coarse
        for ps in trace:
            m = resize_bilinear(m[None, None], 2 * m.shape[0], 2 * m.shape[1])[0, 0]
            assert len(ps) == 20
            xs, ys = ps.coords[:, 0].astype(int), ps.coords[:, 1].astype(int)
            m[ys, xs] = 0.0
        np.testing.assert_array_equal(out, m)
        assert out.shape == (6 * 2**steps,) * 2


class TestBinarize:
    def test_boundary_is_background(self):
        assert not binarize(np.array([0.0]))[0]

    def test_all_positive(self):
        assert binarize(np.full((3, 3), 1e-6)).all()

    def test_mixed(self, rng):
        l = rng.standard_normal((5, 5))
        want = [[1 / (1 + math.exp(-v)) > 0.5 for v in row] for row in l]
        np.testing.assert_array_equal(binarize(l), want)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(beta=1.0), dict(alpha=0.0), dict(alpha=1.5),
                                    dict(n_points=0), dict(steps=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RefineConfig(**kw)

    def test_defaults(self):
        cfg = RefineConfig()
        assert (cfg.beta, cfg.alpha, cfg.n_layers, cfg.hidden) == (3.0, 0.75, 3, 256)

    def test_from_dict(self):
        assert RefineConfig.from_dict({"beta": 2, "steps": 1}).steps == 1
        with pytest.raises(ConfigError):
            RefineConfig.from_dict({"gamma": 1})


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40),
       beta=st.floats(1.01, 4.0), alpha=st.floats(0.01, 1.0))
def test_train_sampling_contract(seed, n, beta, alpha):
    cfg = RefineConfig(beta=beta, alpha=alpha, n_points=n)
    logits = np.random.default_rng(seed).standard_normal((5, 6)) * 3
    ps = sample_points_train(logits, cfg, seed)
    assert len(ps) == n == len(ps.coords)
    assert len(np.unique(ps.coords, axis=0)) == n
    assert ps.kinds.count(UNCERTAIN) == math.floor(alpha * n + 1e-9)


@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 6), w=st.integers(1, 6))
def test_inference_selection_permutation_stable(seed, h, w):
    r = np.random.default_rng(seed)
    logits = r.choice([-2.0, -0.5, 0.0, 0.5, 3.0], size=(h, w))
    n = int(r.integers(1, h * w + 1))
    a = select_points_inference(logits, n)
    b = select_points_inference(logits.copy(), n)
    np.testing.assert_array_equal(a.coords, b.coords)
    ranked = sorted(range(h * w), key=lambda i: (-u_scalar(logits.ravel()[i]), i))[:n]
    assert [int(y) * w + int(x) for x, y in a.coords] == ranked
