import numpy as np
import pytest

from pointshell import autodiff as ad
from pointshell.autodiff import Tensor
from pointshell.errors import SizeError
from pointshell.geometry import NeighborSet, PointCloud, knn_query
from pointshell.shellconv import (
    ShellConvParams,
    init_shell_conv,
    pool_shells,
    segment_maxpool,
    shell_conv,
    shell_conv_layer,
)


def params_from_arrays(lift, kernel, bias, shell_size, num_shells, c_prev=0,
                       dtype=np.float64):
    lift_t = [(Tensor(w, requires_grad=True, dtype=dtype),
               Tensor(b, requires_grad=True, dtype=dtype)) for w, b in lift]
    return ShellConvParams(
        lift_t,
        Tensor(kernel, requires_grad=True, dtype=dtype),
        Tensor(bias, requires_grad=True, dtype=dtype),
        shell_size,
        num_shells,
        c_prev,
    )


class TestManualTrace:
    """Fixture sized 2 shells x 2 points with one lifted channel.

    Expected values were worked out by hand before the operator was built:
    lift = relu(x + y + z + 0.5) gives per-neighbor features
    (1.5, 2.5, 3.5, 4.5); shell maxes are (2.5, 4.5); a shell kernel of
    (2, -1) with bias 0.25 yields relu(2*2.5 - 4.5 + 0.25) = 0.75, and the
    flipped kernel (-2, 1) with zero bias yields relu(-0.5) = 0.
    """

    def fixture(self):
        cloud = PointCloud(
            [(0, 0, 0), (1, 0, 0), (0, 2, 0), (0, 0, 3), (4, 0, 0)]
        )
        neighbors = NeighborSet(
            0,
            np.array([1, 2, 3, 4], dtype=np.int64),
            np.array([1.0, 2.0, 3.0, 4.0]),
        )
        lift = [(np.ones((3, 1)), np.array([0.5]))]
        return cloud, neighbors, lift

    def test_positive_branch(self):
        cloud, neighbors, lift = self.fixture()
        params = params_from_arrays(
            lift, np.array([[[2.0]], [[-1.0]]]), np.array([0.25]), 2, 2
        )
        out = shell_conv(cloud.points[0], neighbors, cloud, params)
        np.testing.assert_allclose(out.data, [0.75], atol=1e-12)

    def test_negative_branch_clamps(self):
        cloud, neighbors, lift = self.fixture()
        params = params_from_arrays(
            lift, np.array([[[-2.0]], [[1.0]]]), np.array([0.0]), 2, 2
        )
        out = shell_conv(cloud.points[0], neighbors, cloud, params)
        np.testing.assert_allclose(out.data, [0.0], atol=1e-12)

    def test_translation_leaves_trace_unchanged(self):
        cloud, neighbors, lift = self.fixture()
        shifted = PointCloud(cloud.points + np.float32(1.0))
        params = params_from_arrays(
            lift, np.array([[[2.0]], [[-1.0]]]), np.array([0.25]), 2, 2
        )
        out = shell_conv(shifted.points[0], neighbors, shifted, params)
        np.testing.assert_allclose(out.data, [0.75], atol=1e-12)


class TestCollapsedConfigurations:
    def test_single_shell_identity_params_is_channel_max(self, rng):
        # positive localized offsets keep both relu stages transparent
        center = np.zeros(3, dtype=np.float32)
        offsets = rng.uniform(0.1, 1.0, (6, 3)).astype(np.float32)
        cloud = PointCloud(np.vstack([center, offsets]))
        neighbors = knn_query(cloud, 0, 7)
        lift = [(np.eye(3), np.zeros(3))]
        kernel = np.eye(3).reshape(1, 3, 3)
        params = params_from_arrays(lift, kernel, np.zeros(3), 7, 1)
        out = shell_conv(cloud.points[0], neighbors, cloud, params)
        localized = cloud.points[neighbors.neighbor_indices] - cloud.points[0]
        np.testing.assert_allclose(out.data, localized.max(axis=0), rtol=1e-6)

    def test_layer0_without_prev_features(self, rng):
        cloud = PointCloud(rng.uniform(-1, 1, (16, 3)).astype(np.float32))
        params = init_shell_conv(0, [4], 4, 2, 5, rng)
        out = shell_conv_layer(cloud, None, np.arange(4), params)
        assert out.features.shape == (4, 5)

    def test_misaligned_prev_features(self, rng):
        cloud = PointCloud(rng.uniform(-1, 1, (12, 3)).astype(np.float32))
        neighbors = knn_query(cloud, 0, 8)
        params = init_shell_conv(2, [4], 4, 2, 3, rng)
        with pytest.raises(SizeError):
            shell_conv(
                cloud.points[0], neighbors, cloud, params,
                prev_features=np.ones((5, 2), dtype=np.float32),
            )


def straight_line_layer(points, prev, reps, lift, kernel, bias, shell_size,
                        num_shells, mode="fixed"):
    """Loop-per-representative reimplementation with no batching or graph."""
    n = len(points)
    k = shell_size * num_shells
    outs = []
    for r in reps:
        d2 = ((points.astype(np.float64) - points[r].astype(np.float64)) ** 2).sum(1)
        order = sorted(range(n), key=lambda i: (d2[i], i))[:k]
        h = (points[order] - points[r]).astype(np.float64)
        for w, b in lift:
            h = np.maximum(h @ w + b, 0)
        if prev is not None:
            h = np.concatenate([prev[order].astype(np.float64), h], axis=1)
        dists = np.sqrt(d2[order])
        c = h.shape[1]
        if mode == "fixed":
            pooled = h.reshape(num_shells, shell_size, c).max(axis=1)
        else:
            dmax = dists.max()
            pooled = np.zeros((num_shells, c))
            groups = [[] for _ in range(num_shells)]
            for j, d in enumerate(dists):
                if dmax == 0 or d == 0:
                    shell = 0
                else:
                    shell = min(int(np.ceil(d / (dmax / num_shells))), num_shells) - 1
                groups[shell].append(j)
            for s, members in enumerate(groups):
                if members:
                    pooled[s] = h[members].max(axis=0)
        out = np.zeros(kernel.shape[2])
        for s in range(num_shells):
            out += pooled[s] @ kernel[s]
        outs.append(np.maximum(out + bias, 0))
    return np.array(outs)


class TestLayerAgainstStraightLineOracle:
    def test_fixed_partition_16_points(self):
        rng = np.random.default_rng(21)
        points = rng.uniform(-1, 1, (16, 3)).astype(np.float32)
        cloud = PointCloud(points)
        prev = rng.uniform(-1, 1, (16, 2)).astype(np.float32)
        lift = [(rng.standard_normal((3, 4)), rng.standard_normal(4) * 0.1),
                (rng.standard_normal((4, 5)), rng.standard_normal(5) * 0.1)]
        kernel = rng.standard_normal((3, 7, 6))
        bias = rng.standard_normal(6) * 0.1
        params = params_from_arrays(lift, kernel, bias, 4, 3, c_prev=2)
        reps = np.array([0, 3, 9, 15])
        got = shell_conv_layer(cloud, prev, reps, params)
        want = straight_line_layer(points, prev, reps, lift, kernel, bias, 4, 3)
        np.testing.assert_allclose(got.features.data, want, atol=1e-6)
        np.testing.assert_array_equal(got.cloud.points, points[reps])

    def test_equidistant_partition(self):
        rng = np.random.default_rng(5)
        points = rng.uniform(-1, 1, (20, 3)).astype(np.float32)
        cloud = PointCloud(points)
        lift = [(rng.standard_normal((3, 4)), rng.standard_normal(4) * 0.1)]
        kernel = rng.standard_normal((4, 4, 3))
        bias = np.zeros(3)
        params = params_from_arrays(lift, kernel, bias, 3, 4)
        reps = np.array([1, 8])
        got = shell_conv_layer(cloud, None, reps, params, partition_mode="equidistant")
        want = straight_line_layer(
            points, None, reps, lift, kernel, bias, 3, 4, mode="equidistant"
        )
        np.testing.assert_allclose(got.features.data, want, atol=1e-6)


class TestSegmentMaxpool:
    def test_against_naive_loops(self, rng):
        x = rng.standard_normal((3, 8, 4))
        bounds = np.array(
            [[0, 3, 3, 8], [0, 0, 5, 8], [0, 8, 8, 8]], dtype=np.int64
        )
        out = segment_maxpool(Tensor(x, dtype=np.float64), bounds)
        for r in range(3):
            for s in range(3):
                lo, hi = bounds[r, s], bounds[r, s + 1]
                want = x[r, lo:hi].max(axis=0) if hi > lo else np.zeros(4)
                np.testing.assert_allclose(out.data[r, s], want)

    def test_empty_segments_get_no_gradient(self):
        x = Tensor(np.arange(12.0).reshape(1, 6, 2), requires_grad=True,
                   dtype=np.float64)
        bounds = np.array([[0, 2, 2, 6]], dtype=np.int64)
        out = segment_maxpool(x, bounds)
        np.testing.assert_array_equal(out.data[0, 1], [0.0, 0.0])
        loss = ad.reshape(
            ad.matmul(ad.reshape(out, (1, -1)),
                      Tensor(np.ones((out.data.size, 1)), dtype=np.float64)), ()
        )
        loss.backward()
        # rows 2..5 win their segment maxes; rows 0,1 lose to row 1 except argmax
        assert x.grad[0, :2].sum() == 2.0  # one winner per channel in segment 0


class TestPoolShells:
    def test_within_shell_permutation_invariance(self, rng):
        feats = rng.standard_normal((1, 8, 5)).astype(np.float32)
        dists = np.sort(rng.uniform(0.1, 1.0, (1, 8)))
        pooled = pool_shells(Tensor(feats), dists, 4, 2, "fixed")
        shuffled = feats.copy()
        shuffled[0, :4] = shuffled[0, [2, 0, 3, 1]]
        shuffled[0, 4:] = shuffled[0, [7, 6, 5, 4]]
        pooled2 = pool_shells(Tensor(shuffled), dists, 4, 2, "fixed")
        np.testing.assert_array_equal(pooled.data, pooled2.data)

    def test_equidistant_empty_shells_pool_to_zero(self):
        feats = Tensor(np.ones((1, 4, 3), dtype=np.float32))
        dists = np.array([[0.0, 0.1, 0.15, 1.0]])
        pooled = pool_shells(feats, dists, 1, 4, "equidistant")
        np.testing.assert_array_equal(pooled.data[0, 1], np.zeros(3))
        np.testing.assert_array_equal(pooled.data[0, 2], np.zeros(3))
        assert pooled.shape == (1, 4, 3)


class TestLayerInvariants:
    def test_storage_permutation_invariance(self):
        rng = np.random.default_rng(17)
        points = rng.uniform(-1, 1, (24, 3)).astype(np.float32)
        prev = rng.uniform(-1, 1, (24, 4)).astype(np.float32)
        params = init_shell_conv(4, [8, 8], 4, 2, 6, rng)
        reps = np.array([2, 6, 11])
        base = shell_conv_layer(PointCloud(points), prev, reps, params)
        perm = rng.permutation(24)
        inv = np.argsort(perm)
        permuted = shell_conv_layer(
            PointCloud(points[perm]), prev[perm], inv[reps], params
        )
        np.testing.assert_allclose(
            base.features.data, permuted.features.data, atol=1e-5
        )

    def test_translation_covariance_bitwise(self):
        # dyadic coordinates plus an integer shift stay exact in float32
        rng = np.random.default_rng(4)
        points = (rng.integers(-64, 64, (20, 3)) / 64).astype(np.float32)
        params = init_shell_conv(0, [8], 4, 2, 5, rng)
        reps = np.array([0, 5, 9])
        base = shell_conv_layer(PointCloud(points), None, reps, params)
        shifted = shell_conv_layer(
            PointCloud(points + np.array([3.0, -7.0, 11.0], dtype=np.float32)),
            None, reps, params,
        )
        np.testing.assert_array_equal(base.features.data, shifted.features.data)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_reaches_every_parameter(self, seed):
        rng = np.random.default_rng(seed)
        points = rng.uniform(-1, 1, (18, 3)).astype(np.float32)
        params = init_shell_conv(0, [6, 7], 3, 2, 4, rng)
        out = shell_conv_layer(PointCloud(points), None, np.arange(6), params)
        flat = ad.reshape(out.features, (1, -1))
        w = Tensor(rng.standard_normal((flat.shape[1], 1)).astype(np.float32))
        ad.reshape(ad.matmul(flat, w), ()).backward()
        for name, t in params.named_params("layer"):
            assert t.grad is not None and np.any(t.grad), name

    def test_output_width_fixed_by_plan(self, rng):
        cloud = PointCloud(rng.uniform(-1, 1, (30, 3)).astype(np.float32))
        params = init_shell_conv(0, [4], 5, 3, 9, rng)
        for mode in ("fixed", "equidistant"):
            out = shell_conv_layer(
                cloud, None, np.arange(7), params, partition_mode=mode
            )
            assert out.features.shape == (7, 9)
