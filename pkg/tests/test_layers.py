import numpy as np
import pytest

from rmae.errors import DegenerateBatch, ShapeError
from rmae.occupancy_net.layers import (
    OFFSETS3,
    BatchNorm,
    DenseConv,
    DenseDeconv,
    SparseDownConv,
    SparseFeatureMap,
    SubmanifoldConv,
    densify,
    densify_backward,
    relu,
    relu_backward,
    residual_add,
)


def random_sparse(dims, n, cin, rng) -> SparseFeatureMap:
    total = int(np.prod(dims))
    lin = rng.choice(total, size=min(n, total), replace=False)
    coords = np.column_stack(
        [
            lin // (dims[1] * dims[2]),
            (lin // dims[2]) % dims[1],
            lin % dims[2],
        ]
    ).astype(np.int64)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    return SparseFeatureMap(dims, coords, rng.normal(0, 1, (len(coords), cin)))


def dense_of(x: SparseFeatureMap) -> np.ndarray:
    return densify(x)


def shift_dense(dense, off):
    """shifted[v] = dense[v + off], zero padded."""
    out = np.zeros_like(dense)
    src = []
    dst = []
    for o, dim in zip(off, dense.shape[1:]):
        src.append(slice(max(0, o), dim + min(0, o)))
        dst.append(slice(max(0, -o), dim + min(0, -o)))
    out[:, dst[0], dst[1], dst[2]] = dense[:, src[0], src[1], src[2]]
    return out


def dense_conv_at_sites(dense_in, sites, weight, bias):
    """Stride-1 3x3x3 convolution evaluated at the given sites via dense
    shifts.  Taps accumulate in the same canonical order and through the
    same (rows, cin) @ (cin, cout) contraction the sparse path uses, so a
    correct implementation must match bit for bit."""
    out = np.tile(bias, (len(sites), 1))
    for t, off in enumerate(OFFSETS3):
        shifted = shift_dense(dense_in, off)
        rows = shifted[:, sites[:, 0], sites[:, 1], sites[:, 2]].T
        out += rows @ weight[t]
    return out


class TestSubmanifoldConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = random_sparse((6, 6, 6), 30, 3, rng)
        layer = SubmanifoldConv(3, 3, rng)
        layer.weight[:] = 0.0
        center = OFFSETS3.index((0, 0, 0))
        layer.weight[center] = np.eye(3)
        layer.bias[:] = 0.0
        out, _ = layer.forward(x)
        assert np.array_equal(out.feats, x.feats)
        assert np.array_equal(out.coords, x.coords)

    def test_dense_oracle_exact(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            x = random_sparse((8, 8, 8), 60, 4, rng)
            layer = SubmanifoldConv(4, 5, rng)
            layer.bias[:] = rng.normal(0, 1, 5)
            out, _ = layer.forward(x)
            ref = dense_conv_at_sites(
                dense_of(x), x.coords, layer.weight, layer.bias
            )
            assert np.array_equal(out.feats, ref)

    def test_single_voxel(self):
        rng = np.random.default_rng(2)
        coords = np.array([[3, 3, 3]], dtype=np.int64)
        x = SparseFeatureMap((8, 8, 8), coords, rng.normal(0, 1, (1, 2)))
        layer = SubmanifoldConv(2, 3, rng)
        out, _ = layer.forward(x)
        center = OFFSETS3.index((0, 0, 0))
        expect = layer.bias + x.feats[0] @ layer.weight[center]
        np.testing.assert_allclose(out.feats[0], expect, rtol=1e-15)

    def test_empty_input(self):
        rng = np.random.default_rng(3)
        x = SparseFeatureMap(
            (4, 4, 4), np.empty((0, 3), np.int64), np.empty((0, 2))
        )
        out, _ = layer_forward_empty = SubmanifoldConv(2, 3, rng).forward(x)
        assert len(out) == 0
        assert out.feats.shape == (0, 3)

    def test_width_mismatch(self):
        rng = np.random.default_rng(4)
        x = random_sparse((4, 4, 4), 5, 3, rng)
        with pytest.raises(ShapeError):
            SubmanifoldConv(2, 3, rng).forward(x)


class TestSparseDownConv:
    def test_support_rule(self):
        rng = np.random.default_rng(5)
        x = random_sparse((8, 8, 8), 40, 3, rng)
        layer = SparseDownConv(3, 4, rng)
        out, _ = layer.forward(x)
        assert out.dims == (4, 4, 4)
        occupied = dense_of(x).any(axis=0)
        expect = set()
        for u in np.ndindex(4, 4, 4):
            for k in np.ndindex(3, 3, 3):
                v = tuple(2 * np.asarray(u) - 1 + np.asarray(k))
                if all(0 <= v[a] < 8 for a in range(3)) and occupied[v]:
                    expect.add(u)
                    break
        assert set(map(tuple, out.coords)) == expect

    def test_dense_oracle_exact(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            x = random_sparse((8, 8, 6), 50, 3, rng)
            layer = SparseDownConv(3, 4, rng)
            layer.bias[:] = rng.normal(0, 1, 4)
            out, _ = layer.forward(x)
            dense = dense_of(x)
            # oracle: out[u] = bias + sum_k W[k] . in[2u - 1 + k], with the
            # per-tap neighbor rows gathered brute-force from the dense grid
            ref = np.tile(layer.bias, (len(out.coords), 1))
            for t, off in enumerate(OFFSETS3):
                k = np.asarray(off) + 1
                rows = np.zeros((len(out.coords), 3))
                for i, u in enumerate(out.coords):
                    v = 2 * np.asarray(u) - 1 + k
                    if all(0 <= v[a] < x.dims[a] for a in range(3)):
                        rows[i] = dense[:, v[0], v[1], v[2]]
                ref += rows @ layer.weight[t]
            assert np.array_equal(out.feats, ref)

    def test_odd_dims_round_up(self):
        rng = np.random.default_rng(7)
        x = random_sparse((7, 5, 3), 20, 2, rng)
        out, _ = SparseDownConv(2, 2, rng).forward(x)
        assert out.dims == (4, 3, 2)


class TestBatchNorm:
    def test_already_normalized_passthrough(self):
        rng = np.random.default_rng(8)
        x = rng.normal(0, 1, (4000, 3))
        x = (x - x.mean(0)) / x.std(0)
        bn = BatchNorm(3)
        out, _ = bn.forward(x, training=True)
        # eps=1e-5 inside the sqrt shrinks values by ~5e-7 per unit
        np.testing.assert_allclose(out, x, atol=1e-5, rtol=1e-5)

    def test_constant_input_gives_beta(self):
        bn = BatchNorm(2)
        bn.beta[:] = [1.5, -2.0]
        x = np.full((10, 2), 7.0)
        out, _ = bn.forward(x, training=True)
        np.testing.assert_allclose(out, np.tile(bn.beta, (10, 1)), atol=1e-12)

    def test_moment_oracle(self):
        rng = np.random.default_rng(9)
        bn = BatchNorm(4)
        bn.gamma[:] = rng.uniform(0.5, 2.0, 4)
        bn.beta[:] = rng.normal(0, 1, 4)
        x = rng.normal(3.0, 2.0, (5000, 4))
        out, _ = bn.forward(x, training=True)
        np.testing.assert_allclose(out.mean(0), bn.beta, atol=1e-4)
        np.testing.assert_allclose(out.var(0), bn.gamma**2, rtol=1e-4)

    def test_running_stats_update_and_eval(self):
        rng = np.random.default_rng(10)
        bn = BatchNorm(2, momentum=0.1)
        x = rng.normal(5.0, 3.0, (1000, 2))
        bn.forward(x, training=True)
        np.testing.assert_allclose(
            bn.running_mean, 0.9 * 0.0 + 0.1 * x.mean(0), rtol=1e-12
        )
        np.testing.assert_allclose(
            bn.running_var, 0.9 * 1.0 + 0.1 * x.var(0), rtol=1e-12
        )
        y, _ = bn.forward(x[:3], training=False)
        expect = (x[:3] - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(y, expect, rtol=1e-12)

    def test_degenerate_batch(self):
        bn = BatchNorm(2)
        with pytest.raises(DegenerateBatch):
            bn.forward(np.empty((0, 2)), training=True)
        out, _ = bn.forward(np.empty((0, 2)), training=False)
        assert out.shape == (0, 2)


class TestReluResidual:
    def test_relu_values(self):
        out, _ = relu(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(out, [0.0, 0.0, 2.0])

    def test_residual_identity(self):
        rng = np.random.default_rng(11)
        x = random_sparse((4, 4, 4), 10, 3, rng)
        zero = SparseFeatureMap(x.dims, x.coords, np.zeros_like(x.feats))
        out = residual_add(x, zero)
        assert np.array_equal(out.feats, x.feats)

    def test_relu_residual_scalar_oracle(self):
        rng = np.random.default_rng(12)
        x = random_sparse((4, 4, 4), 12, 2, rng)
        y = SparseFeatureMap(x.dims, x.coords, rng.normal(0, 1, x.feats.shape))
        out, _ = relu(residual_add(x, y).feats)
        expect = np.array(
            [
                [max(0.0, a + b) for a, b in zip(ra, rb)]
                for ra, rb in zip(x.feats, y.feats)
            ]
        )
        np.testing.assert_allclose(out, expect, rtol=0, atol=0)

    def test_support_mismatch(self):
        rng = np.random.default_rng(13)
        x = random_sparse((4, 4, 4), 10, 3, rng)
        y = random_sparse((4, 4, 4), 9, 3, rng)
        with pytest.raises(ShapeError):
            residual_add(x, y)


def dense_strided_conv_adjoint(y, weight):
    """Independent adjoint of DenseDeconv: stride-2 kernel-4 pad-1 dense
    convolution, out[p] = sum_k W[k]^T . y[2p + k - 1]."""
    cin = weight.shape[3]
    _, qx, qy, qz = y.shape
    px, py, pz = qx // 2, qy // 2, qz // 2
    out = np.zeros((cin, px, py, pz))
    for kx, ky, kz in np.ndindex(4, 4, 4):
        for p in np.ndindex(px, py, pz):
            q = (
                2 * p[0] + kx - 1,
                2 * p[1] + ky - 1,
                2 * p[2] + kz - 1,
            )
            if all(0 <= q[a] < y.shape[1 + a] for a in range(3)):
                out[(slice(None),) + p] += (
                    weight[kx, ky, kz] @ y[:, q[0], q[1], q[2]]
                )
    return out


class TestDenseDeconv:
    def test_kernel_stamp(self):
        rng = np.random.default_rng(14)
        layer = DenseDeconv(1, 1, rng)
        layer.bias[:] = 0.0
        x = np.zeros((1, 3, 3, 3))
        x[0, 1, 1, 1] = 1.0
        out, _ = layer.forward(x)
        assert out.shape == (1, 6, 6, 6)
        # input p=1 writes W[k] at q = 2 + k - 1 = k + 1
        for kx, ky, kz in np.ndindex(4, 4, 4):
            assert out[0, kx + 1, ky + 1, kz + 1] == pytest.approx(
                layer.weight[kx, ky, kz, 0, 0], rel=1e-15
            )

    def test_output_doubles_dims(self):
        rng = np.random.default_rng(15)
        layer = DenseDeconv(2, 3, rng)
        out, _ = layer.forward(rng.normal(0, 1, (2, 5, 4, 3)))
        assert out.shape == (3, 10, 8, 6)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(16)
        for _ in range(5):
            layer = DenseDeconv(3, 2, rng)
            layer.bias[:] = 0.0
            x = rng.normal(0, 1, (3, 4, 3, 2))
            y = rng.normal(0, 1, (2, 8, 6, 4))
            lhs = float((layer.forward(x)[0] * y).sum())
            rhs = float((x * dense_strided_conv_adjoint(y, layer.weight)).sum())
            assert lhs == pytest.approx(rhs, abs=1e-8)


class TestDenseConv:
    def test_shape_and_identity(self):
        rng = np.random.default_rng(17)
        layer = DenseConv(2, 1, rng)
        out, _ = layer.forward(rng.normal(0, 1, (2, 5, 4, 3)))
        assert out.shape == (1, 5, 4, 3)

    def test_dense_oracle(self):
        rng = np.random.default_rng(18)
        layer = DenseConv(3, 2, rng)
        layer.bias[:] = rng.normal(0, 1, 2)
        x = rng.normal(0, 1, (3, 6, 5, 4))
        out, _ = layer.forward(x)
        # brute force via zero-padded gather
        ref = np.zeros_like(out)
        for p in np.ndindex(6, 5, 4):
            acc = layer.bias.copy()
            for kx, ky, kz in np.ndindex(3, 3, 3):
                q = (p[0] + kx - 1, p[1] + ky - 1, p[2] + kz - 1)
                if all(0 <= q[a] < x.shape[1 + a] for a in range(3)):
                    acc = acc + x[:, q[0], q[1], q[2]] @ layer.weight[kx, ky, kz]
            ref[(slice(None),) + p] = acc
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)


class TestDensify:
    def test_round_trip(self):
        rng = np.random.default_rng(19)
        x = random_sparse((5, 4, 3), 15, 4, rng)
        dense = densify(x)
        assert dense.shape == (4, 5, 4, 3)
        back = densify_backward(x, dense)
        assert np.array_equal(back, x.feats)

    def test_absent_sites_zero(self):
        rng = np.random.default_rng(20)
        x = random_sparse((5, 4, 3), 5, 2, rng)
        dense = densify(x)
        mask = np.zeros((5, 4, 3), dtype=bool)
        mask[x.coords[:, 0], x.coords[:, 1], x.coords[:, 2]] = True
        assert (dense[:, ~mask] == 0).all()


# --- finite-difference checks, one layer kind at a time ---------------------


def fd_param_check(loss_fn, arr, grad, rng, n=6, h=1e-4, tol=1e-4):
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in rng.choice(arr.size, size=min(n, arr.size), replace=False):
        old = flat[idx]
        flat[idx] = old + h
        lp = loss_fn()
        flat[idx] = old - h
        lm = loss_fn()
        flat[idx] = old
        fd = (lp - lm) / (2 * h)
        an = gflat[idx]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < tol, (
            f"fd={fd} analytic={an} at {idx}"
        )


class TestFiniteDifferences:
    def test_submanifold_conv(self):
        rng = np.random.default_rng(21)
        x = random_sparse((6, 6, 4), 30, 3, rng)
        layer = SubmanifoldConv(3, 4, rng)
        probe = rng.normal(0, 1, (30, 4))

        def loss():
            out, _ = layer.forward(x)
            return float((out.feats * probe).sum())

        out, ctx = layer.forward(x)
        grad_in, grads = layer.backward(ctx, probe)
        fd_param_check(loss, layer.weight, grads["weight"], rng)
        fd_param_check(loss, layer.bias, grads["bias"], rng)

        def loss_x():
            out, _ = layer.forward(x)
            return float((out.feats * probe).sum())

        fd_param_check(loss_x, x.feats, grad_in, rng)

    def test_down_conv(self):
        rng = np.random.default_rng(22)
        x = random_sparse((6, 6, 4), 35, 3, rng)
        layer = SparseDownConv(3, 4, rng)
        out, ctx = layer.forward(x)
        probe = rng.normal(0, 1, out.feats.shape)

        def loss():
            o, _ = layer.forward(x)
            return float((o.feats * probe).sum())

        grad_in, grads = layer.backward(ctx, probe)
        fd_param_check(loss, layer.weight, grads["weight"], rng)
        fd_param_check(loss, layer.bias, grads["bias"], rng)
        fd_param_check(loss, x.feats, grad_in, rng)

    def test_batch_norm_training(self):
        rng = np.random.default_rng(23)
        bn = BatchNorm(3)
        bn.gamma[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta[:] = rng.normal(0, 1, 3)
        x = rng.normal(1.0, 2.0, (40, 3))
        probe = rng.normal(0, 1, (40, 3))

        def loss():
            out, _ = bn.forward(x, training=True)
            return float((out * probe).sum())

        out, ctx = bn.forward(x, training=True)
        grad_in, grads = bn.backward(ctx, probe)
        fd_param_check(loss, bn.gamma, grads["gamma"], rng)
        fd_param_check(loss, bn.beta, grads["beta"], rng)
        fd_param_check(loss, x, grad_in, rng)

    def test_dense_deconv(self):
        rng = np.random.default_rng(24)
        layer = DenseDeconv(2, 3, rng)
        x = rng.normal(0, 1, (2, 4, 3, 2))
        out, ctx = layer.forward(x)
        probe = rng.normal(0, 1, out.shape)

        def loss():
            o, _ = layer.forward(x)
            return float((o * probe).sum())

        grad_in, grads = layer.backward(ctx, probe)
        fd_param_check(loss, layer.weight, grads["weight"], rng)
        fd_param_check(loss, layer.bias, grads["bias"], rng)
        fd_param_check(loss, x, grad_in, rng)

    def test_dense_conv(self):
        rng = np.random.default_rng(25)
        layer = DenseConv(3, 1, rng)
        x = rng.normal(0, 1, (3, 4, 4, 3))
        out, ctx = layer.forward(x)
        probe = rng.normal(0, 1, out.shape)

        def loss():
            o, _ = layer.forward(x)
            return float((o * probe).sum())

        grad_in, grads = layer.backward(ctx, probe)
        fd_param_check(loss, layer.weight, grads["weight"], rng)
        fd_param_check(loss, layer.bias, grads["bias"], rng)
        fd_param_check(loss, x, grad_in, rng)

    def test_relu_backward(self):
        rng = np.random.default_rng(26)
        x = rng.normal(0, 1, (20, 3))
        probe = rng.normal(0, 1, (20, 3))
        out, ctx = relu(x)
        grad_in = relu_backward(ctx, probe)

        def loss():
            o, _ = relu(x)
            return float((o * probe).sum())

        fd_param_check(loss, x, grad_in, rng, tol=2e-4)
