from __future__ import annotations

import numpy as np
import pytest

from fusedet import cdmp
from fusedet import numerics as nx
from fusedet.cdmp import FeatureGraph, PropagationParams
from fusedet.numerics import ContractError, DimensionError


def integer_graph(rng, n, c, c_img, size=(6, 7)):
    """Point nodes at distinct integer pixels of an H x W image with one level."""
    H, W = size
    cells = rng.choice(H * W, size=n, replace=False)
    pos = np.column_stack([cells % W, cells // W]).astype(float)
    points = FeatureGraph(rng.uniform(0, 1, (n, c)), pos)
    image = FeatureGraph.from_image([rng.standard_normal((H, W, c_img))])
    return points, image


def test_base_offsets():
    assert cdmp.base_offsets(1).tolist() == [[0.0, 0.0]]
    nine = cdmp.base_offsets(9)
    assert sorted(map(tuple, nine)) == [(du, dv) for du in (-1, 0, 1) for dv in (-1, 0, 1)]
    with pytest.raises(ContractError):
        cdmp.base_offsets(0)


def test_predict_walks_examples():
    h = np.random.default_rng(0).standard_normal((5, 3))
    zero = cdmp.predict_walks(h, np.zeros((3, 4)), np.zeros(4)).numpy()
    assert zero.shape == (5, 2, 2) and not zero.any()
    const = cdmp.predict_walks(h, np.zeros((3, 4)), [0.5, -1.0, 2.0, 0.0]).numpy()
    assert np.array_equal(const, np.broadcast_to([[0.5, -1.0], [2.0, 0.0]], (5, 2, 2)))
    with pytest.raises(DimensionError):
        cdmp.predict_walks(h, np.zeros((4, 4)), np.zeros(4))


def test_predict_walks_matches_affine_oracle():
    rng = np.random.default_rng(1)
    h, W, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 6)), rng.standard_normal(6)
    out = cdmp.predict_walks(h, W, b, k=3).numpy()
    for i in range(4):
        for j in range(3):
            for d in range(2):
                assert out[i, j, d] == pytest.approx(h[i] @ W[:, 2 * j + d] + b[2 * j + d], abs=1e-14)


def test_sample_nodes_examples():
    rng = np.random.default_rng(2)
    fmap = rng.standard_normal((4, 5, 3))
    image = FeatureGraph.from_image([fmap])
    zero = np.zeros((1, 1, 2))
    origin = np.zeros((1, 2))
    own = cdmp.sample_nodes(image, 0, [[3.0, 2.0]], zero, origin).numpy()
    assert np.array_equal(own[0, 0], fmap[2, 3])
    outside = cdmp.sample_nodes(image, 0, [[-2.5, 1.0]], zero, origin).numpy()
    assert not outside.any()
    mid = cdmp.sample_nodes(image, 0, [[1.5, 0.5]], zero, origin).numpy()
    assert np.allclose(mid[0, 0], fmap[0:2, 1:3].reshape(4, 3).mean(axis=0), atol=1e-15)


def test_point_graph_sampling_uses_scattered_latents():
    h = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    points = FeatureGraph(h, [[0.0, 0.0], [2.0, 1.0], [2.0, 1.0]])
    out = cdmp.sample_nodes(points, 0, [[2.0, 1.0]], np.zeros((1, 1, 2)), np.zeros((1, 2)),
                            grid_shape=(3, 3), stride=1.0).numpy()
    assert np.array_equal(out[0, 0], [4.0, 5.0])  # collision averaged
    with pytest.raises(ContractError):
        cdmp.sample_nodes(points, 0, [[0.0, 0.0]], np.zeros((1, 1, 2)), np.zeros((1, 2)))


def test_affinity_filters_match_affine_oracle():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((2, 3, 4))
    W, b = rng.standard_normal((4, 1 + 4)), rng.standard_normal(5)
    A, w = cdmp.predict_affinity_filters(v, W, b)
    assert np.allclose(A.numpy(), v @ W[:, 0] + b[0], atol=1e-14)
    assert np.allclose(w.numpy(), v @ W[:, 1:] + b[1:], atol=1e-14)
    Wd, bd = rng.standard_normal((4, 1 + 4 * 2)), rng.standard_normal(9)
    _, wd = cdmp.predict_affinity_filters(v, Wd, bd, "dense", channels=4)
    assert wd.shape == (2, 3, 4, 2)
    with pytest.raises(DimensionError):
        cdmp.predict_affinity_filters(v, rng.standard_normal((3, 5)), b)


def test_zero_affinity_gives_zero_message():
    rng = np.random.default_rng(4)
    points, image = integer_graph(rng, 10, 3, 2)
    params = PropagationParams.build(3, [2], k=9, rng=rng, beta=[1.0])
    params.affinity_W[0] = nx.const(np.zeros((2, 4)))
    params.affinity_b[0] = nx.const(np.array([0.0, 1.0, 1.0, 1.0]))
    assert not cdmp.calculate_message(points, image, params).numpy().any()


def test_single_neighbour_identity_returns_own_latent():
    rng = np.random.default_rng(5)
    points, image = integer_graph(rng, 5, 3, 2)
    params = PropagationParams.build(3, [2], k=1, beta=[1.0])
    assert np.array_equal(cdmp.calculate_message(points, image, params).numpy(), points.latents.numpy())


def test_identity_configuration_is_plain_neighbour_sum():
    rng = np.random.default_rng(6)
    for _ in range(5):
        points, image = integer_graph(rng, 12, 3, 2)
        params = PropagationParams.build(3, [2], k=9, beta=[1.0])
        m = cdmp.calculate_message(points, image, params).numpy()
        pos, h = points.positions, points.latents.numpy()
        for i in range(points.num_nodes):
            near = np.all(np.abs(pos - pos[i]) <= 1, axis=1)
            assert np.allclose(m[i], h[near].sum(axis=0), rtol=0, atol=1e-12)


def test_two_neighbours_match_explicit_double_sum():
    rng = np.random.default_rng(7)
    H, W = 3, 3
    fmap = rng.standard_normal((H, W, 2))
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    h = rng.uniform(0, 1, (4, 2))
    points, image = FeatureGraph(h, pos), FeatureGraph.from_image([fmap])
    params = PropagationParams.build(2, [2], k=2, beta=[0.7])
    aW, ab = rng.standard_normal((2, 3)), rng.standard_normal(3)
    params.affinity_W[0], params.affinity_b[0] = nx.const(aW), nx.const(ab)
    m = cdmp.calculate_message(points, image, params).numpy()

    offsets = [(0, 0), (0, -1)]
    grid = np.zeros((H, W, 2))
    for (u, v), row in zip(pos.astype(int), h):
        grid[v, u] = row
    expected = np.zeros((4, 2))
    for i, (u, v) in enumerate(pos.astype(int)):
        for du, dv in offsets:
            uu, vv = u + du, v + dv
            if not (0 <= uu < W and 0 <= vv < H):
                continue
            out = fmap[vv, uu] @ aW + ab
            expected[i] += 0.7 * out[0] * grid[vv, uu] * out[1:]
    assert np.allclose(cdmp.base_offsets(2), offsets)
    assert np.allclose(m, expected, rtol=0, atol=1e-12)


def test_update_examples():
    out = cdmp.update_latents([[1.0, -2.0]], [[1.0, 1.0]], [1.0]).numpy()
    assert out.tolist() == [[2.0, 0.0]]
    h = np.abs(np.random.default_rng(8).standard_normal((4, 3)))
    assert np.array_equal(cdmp.update_latents(h, np.ones((4, 3)), [0.0]).numpy(), h)
    assert cdmp.update_latents(h, np.ones((4, 5)), [1.0], "concat").shape == (4, 8)
    with pytest.raises(DimensionError):
        cdmp.update_latents(h, np.ones((4, 5)), [1.0])
    with pytest.raises(DimensionError):
        cdmp.update_latents(h, np.ones((4, 3)), [1.0, 1.0])


def _random_setup(seed, n=10, steps=1, k=9):
    rng = np.random.default_rng(seed)
    points, image = integer_graph(rng, n, 3, 2)
    points = FeatureGraph(points.latents, points.positions + rng.uniform(-0.3, 0.3, (n, 2)))
    params = PropagationParams.build(3, [2], k=k, rng=rng, weight_scale=0.2, steps=steps,
                                     alpha=rng.uniform(0, 1, n), beta=[1.0])
    return points, image, params


def test_one_step_equals_manual_call():
    points, image, params = _random_setup(9)
    manual = cdmp.update_latents(points.latents, cdmp.calculate_message(points, image, params), params.alpha)
    assert np.array_equal(cdmp.propagate(points, image, params).numpy(), manual.numpy())


def test_two_steps_equal_chained_steps():
    points, image, params = _random_setup(10, n=4, steps=2, k=4)
    h = points.latents
    graph = points
    for _ in range(2):
        h = cdmp.update_latents(h, cdmp.calculate_message(graph, image, params), params.alpha)
        graph = graph.with_latents(h)
    assert np.array_equal(cdmp.propagate(points, image, params).numpy(), h.numpy())


def test_identity_configuration_is_a_fixed_point():
    rng = np.random.default_rng(11)
    points, image = integer_graph(rng, 10, 3, 2)
    for steps in (1, 3):
        params = PropagationParams.build(3, [2], k=9, alpha=0.0, steps=steps)
        assert np.array_equal(cdmp.propagate(points, image, params).numpy(), points.latents.numpy())


def test_concat_rejects_multiple_steps():
    points, image, _ = _random_setup(12)
    params = PropagationParams.build(3, [2], k=9, update_mode="concat", steps=2)
    with pytest.raises(DimensionError):
        cdmp.propagate(points, image, params)


def test_permutation_equivariance():
    points, image, params = _random_setup(13, n=10)
    params.alpha = nx.const([0.6])
    perm = np.random.default_rng(14).permutation(10)
    out = cdmp.propagate(points, image, params).numpy()
    permuted = FeatureGraph(nx.const(points.latents.numpy()[perm]), points.positions[perm])
    assert np.allclose(cdmp.propagate(permuted, image, params).numpy(), out[perm], rtol=0, atol=1e-12)


def test_locality_bound():
    rng = np.random.default_rng(15)
    H, W = 12, 12
    fmap = rng.standard_normal((H, W, 2))
    pos = rng.uniform(2, 9, (10, 2))
    points = FeatureGraph(rng.uniform(0, 1, (10, 3)), pos)
    params = PropagationParams.build(3, [2], k=9, rng=rng, weight_scale=0.3, beta=[1.0])
    for lst in (params.image_walk_W, params.image_walk_b):
        lst[0] = nx.const(np.zeros(lst[0].shape))
    params.walk_W = nx.const(np.zeros(params.walk_W.shape))
    params.walk_b = nx.const(np.zeros(params.walk_b.shape))
    base = cdmp.propagate(points, FeatureGraph.from_image([fmap]), params).numpy()
    vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for i in range(10):
        far = np.maximum(np.abs(uu - pos[i, 0]), np.abs(vv - pos[i, 1])) > 2.0
        changed = fmap.copy()
        changed[far] += rng.standard_normal((far.sum(), 2))
        out = cdmp.propagate(points, FeatureGraph.from_image([changed]), params).numpy()
        assert np.array_equal(out[i], base[i])


def test_four_level_output_shape_and_contracts():
    rng = np.random.default_rng(16)
    maps = [rng.standard_normal((24 // 2**lvl, 32 // 2**lvl, c)) for lvl, c in enumerate((2, 3, 4, 5))]
    image = FeatureGraph.from_image(maps)
    for n in (9, 15):
        points = FeatureGraph(rng.uniform(0, 1, (n, 4)), rng.uniform(0, 30, (n, 2)))
        params = PropagationParams.build(4, [2, 3, 4, 5], k=9, rng=rng, update_mode="concat", mix_channels=6)
        assert cdmp.propagate(points, image, params, "cdmp_1x4").shape == (n, 10)
    with pytest.raises(ContractError):
        cdmp.propagate(points, image, params, "cdmp_1x1")
    single = PropagationParams.build(4, [2], k=9)
    with pytest.raises(ContractError):
        cdmp.calculate_message(points, image, single)
    with pytest.raises(ContractError):
        PropagationParams.build(4, [2], k=9, steps=0)
