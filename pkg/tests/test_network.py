import numpy as np
import pytest

from pointshell import autodiff as ad
from pointshell import network as nm
from pointshell.autodiff import Tensor
from pointshell.errors import ConfigError, SizeError
from pointshell.geometry import PointCloud


def small_config(**kw):
    base = dict(
        layers=[(32, 4, 16), (16, 2, 32), (8, 1, 64)],
        shell_size=4,
        head_widths=[32, 16],
        k_out=5,
    )
    base.update(kw)
    return nm.NetworkConfig(**base)


class TestConfigValidation:
    def test_defaults_are_the_reference_plan(self):
        cfg = nm.NetworkConfig()
        assert cfg.layers == [(512, 4, 128), (128, 2, 256), (32, 1, 512)]
        assert cfg.shell_size == 16

    def test_rejects_nondecreasing_points(self):
        with pytest.raises(ConfigError):
            small_config(layers=[(16, 2, 8), (16, 1, 16)])

    def test_rejects_nonincreasing_channels(self):
        with pytest.raises(ConfigError):
            small_config(layers=[(32, 2, 16), (16, 1, 16)])

    def test_rejects_starved_neighbors(self):
        with pytest.raises(ConfigError):
            small_config(layers=[(8, 4, 16), (4, 4, 32)])  # 16 neighbors from 8 pts

    def test_rejects_empty_decoder(self):
        with pytest.raises(ConfigError):
            cfg = small_config(task="segmentation", decoder=[])
            nm.build_segmenter(cfg)


class TestBuildClassifier:
    def test_reference_config_forward_width(self):
        cfg = nm.NetworkConfig()  # 512/128/32, 4/2/1, 128/256/512, ss=16, k=40
        net = nm.build_classifier(cfg)
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((1, 1024, 3)).astype(np.float32)
        with ad.no_grad():
            logits = nm.forward(net, pts, seed=1)
        assert logits.shape == (1, 40)

    def test_single_class_head(self, rng):
        net = nm.build_classifier(small_config(k_out=1))
        pts = rng.standard_normal((2, 64, 3)).astype(np.float32)
        with ad.no_grad():
            logits = nm.forward(net, pts, seed=0)
        assert logits.shape == (2, 1)

    def test_reference_parameter_count(self):
        net = nm.build_classifier(nm.NetworkConfig())
        count = nm.count_parameters(net)
        # frozen from the documented defaults; the published reference is 0.48M
        assert count == 471_912
        assert 200_000 <= count <= 1_000_000


class TestCountParameters:
    def test_single_linear_layer(self):
        cfg = small_config()
        w = ad.parameter(np.zeros((2, 3)))
        b = ad.parameter(np.zeros(3))
        net = nm.Network(cfg, [], None, [(w, b)])
        assert nm.count_parameters(net) == 9

    def test_doubling_channels_matches_closed_form(self):
        def analytic(cfg):
            total = 0
            c_prev = 0
            for n, s, c in cfg.layers:
                width = 3
                for w in cfg.lift_widths:
                    total += width * w + w
                    width = w
                total += s * (width + c_prev) * c + c
                c_prev = c
            widths = [cfg.layers[-1][2], *cfg.head_widths, cfg.k_out]
            for a, b in zip(widths, widths[1:]):
                total += a * b + b
            return total

        base = small_config()
        doubled = small_config(
            layers=[(n, s, 2 * c) for n, s, c in base.layers]
        )
        for cfg in (base, doubled):
            net = nm.build_classifier(cfg)
            assert nm.count_parameters(net) == analytic(cfg)

    def test_invariant_to_input_point_count(self, rng):
        net = nm.build_classifier(small_config())
        before = nm.count_parameters(net)
        for n in (40, 64, 100):
            pts = rng.standard_normal((1, n, 3)).astype(np.float32)
            with ad.no_grad():
                nm.forward(net, pts, seed=0)
            assert nm.count_parameters(net) == before


class TestCountFlops:
    def test_matmul_convention(self):
        for k in (2, 5, 16):
            assert nm.matmul_flops(k, k, k) == 2 * k**3 - k**2

    def test_conv1d_formula_matches_loop_count(self):
        s, s_k, c_in, c_out, stride = 7, 3, 4, 5, 2

        def loop_count():
            mults = adds = 0
            s_out = (s - s_k) // stride + 1
            for _ in range(s_out):
                for _ in range(c_out):
                    for _ in range(s_k):
                        for _ in range(c_in):
                            mults += 1
                            adds += 1  # accumulate into the running sum
                    # the first accumulate replaces the init, the bias restores it
            return mults + adds

        assert nm.conv1d_flops(s, s_k, c_in, c_out, stride) == loop_count()

    def test_linear_in_input_size(self):
        net = nm.build_classifier(small_config())
        f = [nm.count_flops(net, n, batch_size=2).inference for n in (64, 128, 192)]
        assert f[1] - f[0] == f[2] - f[1] > 0
        t = [nm.count_flops(net, n, batch_size=2).training for n in (64, 128, 192)]
        assert t[1] - t[0] == t[2] - t[1] > 0

    def test_training_exceeds_inference(self):
        net = nm.build_classifier(nm.NetworkConfig())
        rep = nm.count_flops(net, 1024, batch_size=16)
        assert rep.training > rep.inference > 0
        assert len(rep.table().splitlines()) >= 4

    def test_segmentation_accounting_runs(self):
        cfg = small_config(task="segmentation", k_out=4)
        net = nm.build_segmenter(cfg)
        rep = nm.count_flops(net, 64, batch_size=2)
        assert rep.training > rep.inference > 0


class TestForward:
    def test_identical_clouds_identical_rows(self, rng):
        net = nm.build_classifier(small_config())
        cloud = rng.standard_normal((64, 3)).astype(np.float32)
        pts = np.stack([cloud, cloud, cloud])
        reps = [np.tile(r, (3, 1)) for r in _fixed_reps(rng, small_config(), 64)]
        with ad.no_grad():
            logits = nm.forward(net, pts, representatives=reps)
        np.testing.assert_array_equal(logits.data[0], logits.data[1])
        np.testing.assert_array_equal(logits.data[0], logits.data[2])

    def test_permuted_cloud_equal_logits(self, rng):
        cfg = small_config()
        net = nm.build_classifier(cfg)
        cloud = rng.standard_normal((64, 3)).astype(np.float32)
        reps = _fixed_reps(rng, cfg, 64)
        perm = rng.permutation(64)
        inv = np.argsort(perm)
        reps_perm = [inv[reps[0]]] + reps[1:]
        with ad.no_grad():
            a = nm.forward(net, cloud[None], representatives=[r[None] for r in reps])
            b = nm.forward(
                net, cloud[perm][None], representatives=[r[None] for r in reps_perm]
            )
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_single_cloud_batch_matches_unbatched_path(self, rng):
        cfg = small_config()
        net = nm.build_classifier(cfg)
        cloud = PointCloud(rng.standard_normal((64, 3)).astype(np.float32))
        reps = _fixed_reps(rng, cfg, 64)
        with ad.no_grad():
            batched = nm.forward(
                net, cloud.points[None], representatives=[r[None] for r in reps]
            )
            single = nm.forward_single(net, cloud, representatives=reps)
        np.testing.assert_array_equal(batched.data[0], single.data)

    def test_ragged_batch_rejected(self, rng):
        net = nm.build_classifier(small_config())
        with pytest.raises(SizeError):
            nm.forward(net, rng.standard_normal((2, 64)))  # not (B, N, 3)

    def test_input_too_small_rejected(self, rng):
        net = nm.build_classifier(small_config())
        pts = rng.standard_normal((1, 8, 3)).astype(np.float32)
        with pytest.raises(SizeError):
            nm.forward(net, pts, seed=0)

    def test_shape_contract_over_random_valid_configs(self):
        rng = np.random.default_rng(8)
        for trial in range(12):
            depth = int(rng.integers(1, 4))
            pts_counts = sorted(
                rng.choice(np.arange(6, 80), depth, replace=False).tolist(),
                reverse=True,
            )
            chans = sorted(rng.choice(np.arange(4, 40), depth, replace=False).tolist())
            ss = int(rng.integers(1, 4))
            layers = []
            prev_n = 96
            ok = True
            for i in range(depth):
                max_s = max(1, min(3, prev_n // ss))
                s = int(rng.integers(1, max_s + 1))
                layers.append((pts_counts[i], s, chans[i]))
                prev_n = pts_counts[i]
                if s * ss > (96 if i == 0 else layers[i - 1][0]):
                    ok = False
            if not ok:
                continue
            task = "classification" if trial % 2 == 0 else "segmentation"
            try:
                cfg = nm.NetworkConfig(
                    task=task, layers=layers, shell_size=ss,
                    head_widths=[16], k_out=3, lift_widths=[6],
                )
            except ConfigError:
                continue
            net = nm.build(cfg)
            pts = rng.standard_normal((2, 96, 3)).astype(np.float32)
            with ad.no_grad():
                logits = nm.forward(net, pts, seed=int(trial))
            if task == "classification":
                assert logits.shape == (2, 3)
            else:
                assert logits.shape == (2, 96, 3)


class TestSegmenter:
    def test_per_point_logit_shape(self, rng):
        cfg = small_config(task="segmentation", k_out=4)
        net = nm.build_segmenter(cfg)
        pts = rng.standard_normal((2, 64, 3)).astype(np.float32)
        with ad.no_grad():
            logits = nm.forward(net, pts, seed=0)
        assert logits.shape == (2, 64, 4)
        assert np.isfinite(logits.data).all()

    def test_severed_skips_still_finite(self, rng):
        cfg = small_config(task="segmentation", k_out=4)
        net = nm.build_segmenter(cfg)
        pts = rng.standard_normal((1, 64, 3)).astype(np.float32)
        with ad.no_grad():
            logits = nm.forward(net, pts, seed=0, sever_skips=True)
        assert np.isfinite(logits.data).all()

    def test_last_decoder_width_default_64(self):
        cfg = nm.NetworkConfig(task="segmentation", k_out=10, shell_size=8)
        assert cfg.decoder_plan()[-1][1] == 64

    def test_gradients_reach_decoder(self, rng):
        cfg = small_config(task="segmentation", k_out=4)
        net = nm.build_segmenter(cfg)
        pts = rng.standard_normal((1, 64, 3)).astype(np.float32)
        logits = nm.forward(net, pts, seed=0)
        labels = rng.integers(0, 4, 64)
        loss = ad.softmax_cross_entropy(ad.reshape(logits, (-1, 4)), labels)
        loss.backward()
        for name, t in net.named_parameters():
            assert t.grad is not None and np.any(t.grad), name


def _fixed_reps(rng, cfg, n_input):
    reps = []
    cur = n_input
    for n, _, _ in cfg.layers:
        reps.append(np.sort(rng.choice(cur, n, replace=False)).astype(np.int64))
        cur = n
    return reps
