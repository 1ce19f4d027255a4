import numpy as np
import pytest

from gsloc.errors import EmptySamples
from gsloc.field import DescriptorDecoder, DescriptorField, HashEncoding
from gsloc.volume import SurfaceSamples


def small_field(dtype=np.float32, seed=0, table_log2=12, dim=16,
                finest=0.06, levels=4):
    return DescriptorField.create(bounds_min=np.zeros(3), bounds_max=np.ones(3),
                                  descriptor_dim=dim, levels=levels,
                                  features_per_level=2,
                                  table_size_log2=table_log2,
                                  finest_resolution=finest, seed=seed,
                                  dtype=dtype)


class TestEncoding:
    def test_resolutions_strictly_decreasing(self):
        enc = small_field().encoding
        assert np.all(np.diff(enc.resolutions) < 0)
        assert enc.resolutions[-1] == pytest.approx(0.06)

    def test_deterministic(self):
        enc = small_field().encoding
        p = np.array([[0.3, 0.7, 0.2]])
        a = enc.encode(p)
        b = enc.encode(p)
        assert np.array_equal(a, b)

    def test_grid_vertex_equals_table_entry(self):
        enc = small_field().encoding
        # choose an interior vertex of the coarsest level
        level = 0
        res = enc.resolutions[level]
        cell = np.array([1, 2, 1], dtype=np.int64)
        p = enc.bounds_min + cell * res
        out = enc.encode(p[None, :])[0]
        h = enc._hash(cell[None, :])[0]
        expected = enc.tables[level][h]
        got = out[level * enc.features_per_level:(level + 1) * enc.features_per_level]
        assert np.allclose(got, expected, atol=1e-7)

    def test_continuity(self):
        enc = small_field().encoding
        p = np.array([0.431, 0.377, 0.618])
        base = enc.encode(p[None, :])[0]
        for eps in (1e-3, 1e-5, 1e-7):
            moved = enc.encode((p + eps)[None, :])[0]
            # trilinear slope is bounded by entry magnitude / finest resolution
            bound = 10 * eps * np.abs(enc.tables).max() / enc.resolutions[-1] \
                * enc.levels * 8 + 1e-12
            assert np.abs(moved - base).max() < bound

    def test_clamps_outside_bounds(self):
        enc = small_field().encoding
        inside = enc.encode(np.array([[1.0, 1.0, 1.0]]))
        outside = enc.encode(np.array([[2.0, 3.0, 4.0]]))
        assert np.allclose(inside, outside)

    def test_table_gradient_scatter(self):
        # encode_backward must be the exact adjoint of encode
        enc = small_field(dtype=np.float64).encoding
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1, size=(5, 3))
        cache = []
        out = enc.encode(pts, cache=cache)
        d_out = rng.normal(size=out.shape)
        d_tab = enc.encode_backward(cache, d_out)
        # directional derivative check against a random table perturbation
        dire = rng.normal(size=enc.tables.shape)
        h = 1e-6
        enc.tables = enc.tables + h * dire
        out_p = enc.encode(pts)
        enc.tables = enc.tables - 2 * h * dire
        out_m = enc.encode(pts)
        fd = np.sum((out_p - out_m) / (2 * h) * d_out)
        analytic = np.sum(d_tab * dire)
        assert fd == pytest.approx(analytic, rel=1e-6)


class TestDecoder:
    def test_output_unit_norm(self):
        field = small_field()
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 1, size=(1000, 3))
        out = field.batch_decode(pts)
        norms = np.linalg.norm(out, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_constant_network(self):
        field = small_field()
        field.decoder.weights[-1][:] = 0.0
        b = np.zeros(field.decoder.out_dim, dtype=np.float32)
        b[0] = 2.0
        b[3] = -1.0
        field.decoder.biases[-1][:] = b
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 1, size=(20, 3))
        out = field.batch_decode(pts)
        expected = b / np.linalg.norm(b)
        assert np.abs(out - expected[None, :]).max() < 1e-6

    def test_batch_matches_single(self):
        field = small_field()
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 1, size=(7, 3))
        batch = field.batch_decode(pts)
        for i in range(7):
            assert np.allclose(batch[i], field.decode(pts[i]), atol=1e-9)

    def test_permutation_equivariance(self):
        field = small_field()
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 1, size=(11, 3))
        perm = rng.permutation(11)
        assert np.allclose(field.batch_decode(pts)[perm],
                           field.batch_decode(pts[perm]), atol=1e-12)

    def test_mlp_gradients_finite_difference(self):
        # cosine-loss gradients w.r.t. every MLP weight/bias, float64 path;
        # tables and biases get trained-scale magnitudes so pre-activations
        # sit far from the ReLU kinks relative to the probe step
        field = small_field(dtype=np.float64, dim=8, table_log2=8, levels=3)
        rng = np.random.default_rng(5)
        field.encoding.tables = rng.uniform(-0.5, 0.5,
                                            size=field.encoding.tables.shape)
        for b in field.decoder.biases:
            b += rng.normal(0, 0.05, size=b.shape)
        pts = rng.uniform(0, 1, size=(16, 3))
        targets = rng.normal(size=(16, 8))
        targets /= np.linalg.norm(targets, axis=1, keepdims=True)

        def loss_fn():
            return field.loss_and_grads(pts, targets)[0]

        _, _, _, d_w, d_b = field.loss_and_grads(pts, targets)
        h = 1e-4
        errs = []
        for li, (W, dW) in enumerate(zip(field.decoder.weights, d_w)):
            idx = (rng.integers(W.shape[0], size=8), rng.integers(W.shape[1], size=8))
            for r, c in zip(*idx):
                orig = W[r, c]
                W[r, c] = orig + h
                lp = loss_fn()
                W[r, c] = orig - h
                lm = loss_fn()
                W[r, c] = orig
                fd = (lp - lm) / (2 * h)
                errs.append(abs(fd - dW[r, c]) / max(abs(fd), abs(dW[r, c]), 1e-8))
        for li, (b, db) in enumerate(zip(field.decoder.biases, d_b)):
            for c in rng.integers(b.shape[0], size=6):
                orig = b[c]
                b[c] = orig + h
                lp = loss_fn()
                b[c] = orig - h
                lm = loss_fn()
                b[c] = orig
                fd = (lp - lm) / (2 * h)
                errs.append(abs(fd - db[c]) / max(abs(fd), abs(db[c]), 1e-8))
        errs = np.array(errs)
        assert np.median(errs) < 1e-3
        assert np.quantile(errs, 0.9) < 1e-3


class TestDistill:
    def test_zero_steps_no_change(self):
        field = small_field()
        tables = field.encoding.tables.copy()
        weights = [w.copy() for w in field.decoder.weights]
        samples = SurfaceSamples(points=np.random.default_rng(0).uniform(0, 1, (10, 3)),
                                 features=np.tile([1.0, 0, 0, 0] + [0] * 12, (10, 1)))
        log = field.distill(samples, steps=0)
        assert np.array_equal(field.encoding.tables, tables)
        for w, w0 in zip(field.decoder.weights, weights):
            assert np.array_equal(w, w0)
        assert log.losses == []

    def test_empty_samples_raises(self):
        field = small_field()
        with pytest.raises(EmptySamples):
            field.distill(SurfaceSamples(points=np.zeros((0, 3)),
                                         features=np.zeros((0, 16))), steps=10)

    def test_constant_target_fit(self):
        # a constant target everywhere is fit to near-zero loss quickly
        field = small_field(dim=16)
        rng = np.random.default_rng(6)
        pts = rng.uniform(0, 1, size=(2000, 3))
        target = np.zeros(16)
        target[2] = 1.0
        samples = SurfaceSamples(points=pts, features=np.tile(target, (2000, 1)))
        log = field.distill(samples, steps=500, lr=1e-3, batch=512,
                            rng=np.random.default_rng(0))
        assert log.losses[-1] < 0.01
        assert log.final_mean_cosine > 0.99

    def test_two_cluster_orthogonal_fit(self):
        # two clusters 6 cm apart with orthogonal targets, finest res 6 cm
        field = small_field(dim=16, finest=0.06, levels=6, table_log2=14)
        rng = np.random.default_rng(7)
        n = 1500
        c1 = np.array([0.40, 0.50, 0.50])
        c2 = c1 + np.array([0.06, 0.0, 0.0])
        pts1 = c1 + rng.normal(0, 0.01, size=(n, 3))
        pts2 = c2 + rng.normal(0, 0.01, size=(n, 3))
        t1 = np.zeros(16)
        t1[0] = 1.0
        t2 = np.zeros(16)
        t2[1] = 1.0
        samples = SurfaceSamples(
            points=np.concatenate([pts1, pts2]),
            features=np.concatenate([np.tile(t1, (n, 1)), np.tile(t2, (n, 1))]))
        field.distill(samples, steps=2000, lr=1e-3, batch=1024,
                      rng=np.random.default_rng(1))
        cos1 = field.batch_decode(pts1) @ t1
        cos2 = field.batch_decode(pts2) @ t2
        assert cos1.mean() >= 0.95
        assert cos2.mean() >= 0.95

    def test_loss_nonincreasing_window(self):
        field = small_field(dim=16)
        rng = np.random.default_rng(8)
        pts = rng.uniform(0, 1, size=(3000, 3))
        target = np.zeros(16)
        target[5] = 1.0
        samples = SurfaceSamples(points=pts, features=np.tile(target, (3000, 1)))
        log = field.distill(samples, steps=400, lr=1e-3, batch=512,
                            rng=np.random.default_rng(2))
        sm = np.array([np.mean(log.losses[max(0, i - 50):i + 1])
                       for i in range(len(log.losses))])
        # 50-step moving average never increases appreciably
        assert np.all(np.diff(sm[50:]) < 1e-3)

    def test_small_table_degrades_gracefully(self):
        field = small_field(dim=16, table_log2=6)
        rng = np.random.default_rng(9)
        pts = rng.uniform(0, 1, size=(500, 3))
        target = np.zeros(16)
        target[0] = 1.0
        samples = SurfaceSamples(points=pts, features=np.tile(target, (500, 1)))
        log = field.distill(samples, steps=100, lr=1e-3, batch=256,
                            rng=np.random.default_rng(3))
        assert np.isfinite(log.losses).all()
