import numpy as np
import pytest

from conftest import random_grid
from rmae.errors import MalformedFile, ShapeError, StaleCache
from rmae.occupancy_net import (
    NetConfig,
    OccupancyNet,
    QueryConfig,
    build_query_set,
    load_checkpoint,
    occupancy_loss,
    save_checkpoint,
    visible_features,
)
from rmae.occupancy_net.layers import SparseFeatureMap
from rmae.voxelizer import GridGeometry, occupancy_of


def toy_net(seed=0, in_ch=2, stages=(2, 4)):
    return OccupancyNet(NetConfig(in_channels=in_ch, stage_channels=stages, seed=seed))


def sparse_input(dims, n, cin, rng):
    total = int(np.prod(dims))
    lin = np.sort(rng.choice(total, size=min(n, total), replace=False))
    coords = np.column_stack(
        [
            lin // (dims[1] * dims[2]),
            (lin // dims[2]) % dims[1],
            lin % dims[2],
        ]
    ).astype(np.int64)
    return SparseFeatureMap(dims, coords, rng.normal(0, 1, (len(coords), cin)))


class TestForward:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        net = toy_net()
        x = sparse_input((8, 8, 4), 25, 2, rng)
        pred, _ = net.forward(x)
        assert pred.logits.shape == (8, 8, 4)
        assert ((pred.probabilities > 0) & (pred.probabilities < 1)).all()

    def test_deterministic_logits(self):
        rng = np.random.default_rng(1)
        net = toy_net(seed=3)
        x = sparse_input((8, 8, 4), 25, 2, rng)
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        assert np.array_equal(a.logits, b.logits)
        again = toy_net(seed=3)
        c, _ = again.forward(x)
        assert np.array_equal(a.logits, c.logits)

    def test_empty_visible_set(self):
        net = toy_net()
        x = SparseFeatureMap(
            (8, 8, 4), np.empty((0, 3), np.int64), np.empty((0, 2))
        )
        pred, tape = net.forward(x, training=True)
        assert pred.logits.shape == (8, 8, 4)
        assert np.isfinite(pred.logits).all()
        grads = net.backward(tape, np.ones((8, 8, 4)))
        # nothing reached the encoder
        assert not grads["stem.weight"].any()
        assert grads["head.bias"].any()

    def test_indivisible_dims_rejected(self):
        rng = np.random.default_rng(2)
        net = toy_net()
        x = sparse_input((7, 8, 4), 10, 2, rng)
        with pytest.raises(ShapeError):
            net.forward(x)

    def test_wrong_channels_rejected(self):
        rng = np.random.default_rng(3)
        net = toy_net()
        x = sparse_input((8, 8, 4), 10, 3, rng)
        with pytest.raises(ShapeError):
            net.forward(x)

    def test_stale_cache(self):
        net = toy_net()
        with pytest.raises(StaleCache):
            net.backward({}, np.zeros((8, 8, 4)))

    def test_default_config_downsamples_4x(self):
        cfg = NetConfig()
        assert cfg.downsample_factor == 4
        assert cfg.latent_width == 64


class TestComposedGradients:
    def test_finite_differences_small(self):
        """Composed net on an 8x8x4 grid vs central differences."""
        rng = np.random.default_rng(4)
        net = toy_net(seed=5)
        x = sparse_input((8, 8, 4), 30, 2, rng)
        geom = GridGeometry((0, 0, 0), (1, 1, 1), (8, 8, 4))
        truth_grid = random_grid(geom, 40, rng)
        truth = occupancy_of(truth_grid)
        query = build_query_set(truth, x.coords, QueryConfig())

        def loss_value():
            pred, _ = net.forward(x, training=True)
            return occupancy_loss(pred.logits, truth, query)[0]

        pred, tape = net.forward(x, training=True)
        loss, grad_logits = occupancy_loss(pred.logits, truth, query)
        grads = net.backward(tape, grad_logits)

        params = net.parameters()
        checked = 0
        for pi in rng.choice(len(params), size=8, replace=False):
            path, arr = params[pi]
            flat = arr.reshape(-1)
            for idx in rng.choice(arr.size, size=min(3, arr.size), replace=False):
                old = flat[idx]
                h = 1e-4
                flat[idx] = old + h
                lp = loss_value()
                flat[idx] = old - h
                lm = loss_value()
                flat[idx] = old
                fd = (lp - lm) / (2 * h)
                an = grads[path].reshape(-1)[idx]
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
                assert rel < 1e-4, f"{path}[{idx}]: fd={fd} analytic={an}"
                checked += 1
        assert checked >= 20

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(5)
        net = toy_net()
        x = sparse_input((8, 8, 4), 20, 2, rng)
        _, tape = net.forward(x, training=True)
        grads = net.backward(tape, np.zeros((8, 8, 4)))
        for path, g in grads.items():
            assert not g.any(), path


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(6)
        net = toy_net(seed=7)
        # perturb state so it is not just the seeded init
        for _, arr in net.parameters():
            arr += rng.normal(0, 0.1, arr.shape)
        p = tmp_path / "ck.rmae"
        save_checkpoint(net, p)
        back = load_checkpoint(p)
        for (pa, a), (pb, b) in zip(net.parameters(), back.parameters()):
            assert pa == pb
            assert a.tobytes() == b.tobytes()
        for (pa, a), (pb, b) in zip(net.buffers(), back.buffers()):
            assert pa == pb
            assert a.tobytes() == b.tobytes()

    def test_same_net_same_bytes(self, tmp_path):
        net = toy_net(seed=8)
        p1 = tmp_path / "a.rmae"
        p2 = tmp_path / "b.rmae"
        save_checkpoint(net, p1)
        save_checkpoint(net, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_sidecar(self, tmp_path):
        net = toy_net()
        p = tmp_path / "ck.rmae"
        save_checkpoint(net, p)
        manifest = (tmp_path / "ck.rmae.manifest.txt").read_text()
        assert "stem kind=sparse_conv tensor=weight" in manifest
        assert "head kind=dense_conv" in manifest

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.rmae"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(MalformedFile):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        net = toy_net()
        p = tmp_path / "ck.rmae"
        save_checkpoint(net, p)
        (tmp_path / "trunc.rmae").write_bytes(p.read_bytes()[:100])
        with pytest.raises(MalformedFile):
            load_checkpoint(tmp_path / "trunc.rmae")


def test_visible_features_sorted(small_geom):
    rng = np.random.default_rng(9)
    grid = random_grid(small_geom, 50, rng)
    mask = rng.uniform(0, 1, 50) < 0.5
    vis = visible_features(grid, mask)
    assert len(vis) == mask.sum()
    assert np.array_equal(vis.coords, grid.coords[mask])
    assert vis.channel_width == 4
