"""Network primitives with explicit forward/backward passes.

Everything is float64 numpy.  Each layer's forward returns (output, ctx)
where ctx carries exactly what backward needs; backward returns the input
gradient and a dict of parameter gradients.  Sparse maps keep their rows in
canonical (ix, iy, iz) order throughout, and every accumulation loops
kernel taps in one fixed order, so results are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateBatch, ShapeError

OFFSETS3 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
]


@dataclass
class SparseFeatureMap:
    """Sparse voxel features at some (possibly strided) resolution."""

    dims: tuple[int, int, int]
    coords: np.ndarray  # (N, 3) int64, canonical order
    feats: np.ndarray  # (N, C) float64

    @property
    def channel_width(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return self.coords.shape[0]


def _index_volume(dims, coords) -> np.ndarray:
    vol = np.full(dims, -1, dtype=np.int64)
    if len(coords):
        vol[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(
            len(coords), dtype=np.int64
        )
    return vol


def _check_width(feats: np.ndarray, expected: int, what: str) -> None:
    if feats.shape[1] != expected:
        raise ShapeError(
            f"{what}: expected {expected} channels, got {feats.shape[1]}"
        )


class SubmanifoldConv:
    """3x3x3 stride-1 sparse convolution; output support = input support."""

    kind = "sparse_conv"

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (27.0 * in_ch))
        self.weight = rng.normal(0.0, std, size=(27, in_ch, out_ch))
        self.bias = np.zeros(out_ch)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: SparseFeatureMap):
        _check_width(x.feats, self.in_ch, "submanifold conv")
        n = len(x)
        out = np.tile(self.bias, (n, 1))
        gathers = []
        if n:
            vol = _index_volume(x.dims, x.coords)
            dims = np.asarray(x.dims)
            for t, off in enumerate(OFFSETS3):
                nb = x.coords + np.asarray(off)
                inside = ((nb >= 0) & (nb < dims)).all(axis=1)
                out_rows = np.flatnonzero(inside)
                in_rows = vol[nb[inside, 0], nb[inside, 1], nb[inside, 2]]
                present = in_rows >= 0
                out_rows = out_rows[present]
                in_rows = in_rows[present]
                # full-height neighbor matrix (zeros where absent) keeps the
                # gemm shape fixed, so results are independent of sparsity
                rows = np.zeros((n, self.in_ch))
                rows[out_rows] = x.feats[in_rows]
                out += rows @ self.weight[t]
                gathers.append((in_rows, out_rows))
        ctx = (x, gathers)
        return SparseFeatureMap(x.dims, x.coords, out), ctx

    def backward(self, ctx, grad_out: np.ndarray):
        x, gathers = ctx
        grad_in = np.zeros_like(x.feats)
        grad_w = np.zeros_like(self.weight)
        for t, (in_rows, out_rows) in enumerate(gathers):
            if len(out_rows):
                g = grad_out[out_rows]
                grad_in[in_rows] += g @ self.weight[t].T
                grad_w[t] = x.feats[in_rows].T @ g
        grad_b = grad_out.sum(axis=0)
        return grad_in, {"weight": grad_w, "bias": grad_b}


class SparseDownConv:
    """3x3x3 stride-2 sparse convolution onto the half-resolution lattice;
    an output site exists iff any input voxel falls in its receptive
    field."""

    kind = "sparse_conv"

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (27.0 * in_ch))
        self.weight = rng.normal(0.0, std, size=(27, in_ch, out_ch))
        self.bias = np.zeros(out_ch)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    @staticmethod
    def out_dims(dims) -> tuple[int, int, int]:
        return tuple((d + 1) // 2 for d in dims)

    def forward(self, x: SparseFeatureMap):
        _check_width(x.feats, self.in_ch, "stride-2 sparse conv")
        odims = self.out_dims(x.dims)
        odims_arr = np.asarray(odims)
        # input x contributes to output u via tap k when x = 2u - 1 + k
        taps = []
        targets = []
        for t, off in enumerate(OFFSETS3):
            k = np.asarray(off) + 1  # kernel index 0..2 per axis
            num = x.coords - k + 1
            even = (num % 2 == 0).all(axis=1)
            u = num // 2
            ok = even & ((u >= 0) & (u < odims_arr)).all(axis=1)
            taps.append((np.flatnonzero(ok), u[ok]))
            if ok.any():
                targets.append(u[ok])
        if targets:
            allu = np.concatenate(targets, axis=0)
            lin = (allu[:, 0] * odims[1] + allu[:, 1]) * odims[2] + allu[:, 2]
            ulin = np.unique(lin)
            out_coords = np.column_stack(
                [
                    ulin // (odims[1] * odims[2]),
                    (ulin // odims[2]) % odims[1],
                    ulin % odims[2],
                ]
            ).astype(np.int64)
        else:
            out_coords = np.empty((0, 3), dtype=np.int64)
        m = len(out_coords)
        out = np.tile(self.bias, (m, 1))
        ovol = _index_volume(odims, out_coords)
        gathers = []
        for t, (in_rows, u) in enumerate(taps):
            out_rows = (
                ovol[u[:, 0], u[:, 1], u[:, 2]]
                if len(in_rows)
                else np.empty(0, dtype=np.int64)
            )
            if m:
                rows = np.zeros((m, self.in_ch))
                rows[out_rows] = x.feats[in_rows]
                out += rows @ self.weight[t]
            gathers.append((in_rows, out_rows))
        ctx = (x, gathers, len(out_coords))
        return SparseFeatureMap(odims, out_coords, out), ctx

    def backward(self, ctx, grad_out: np.ndarray):
        x, gathers, _ = ctx
        grad_in = np.zeros_like(x.feats)
        grad_w = np.zeros_like(self.weight)
        for t, (in_rows, out_rows) in enumerate(gathers):
            if len(in_rows):
                g = grad_out[out_rows]
                grad_in[in_rows] += g @ self.weight[t].T
                grad_w[t] = x.feats[in_rows].T @ g
        grad_b = grad_out.sum(axis=0)
        return grad_in, {"weight": grad_w, "bias": grad_b}


class BatchNorm:
    """Per-channel batch normalization over an (N, C) matrix.

    Training mode normalizes with the batch's biased variance and updates
    the running statistics with the same; eval mode uses the running
    statistics only.
    """

    kind = "batch_norm"

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = np.ones(ch)
        self.beta = np.zeros(ch)
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.eps = eps
        self.momentum = momentum
        self.ch = ch

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def forward(self, x: np.ndarray, training: bool):
        _check_width(x, self.ch, "batch norm")
        if training:
            if x.shape[0] == 0:
                raise DegenerateBatch(
                    "batch norm saw zero elements in training mode"
                )
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean += self.momentum * (mu - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mu = self.running_mean
            var = self.running_var
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * ivar
        out = self.gamma * xhat + self.beta
        return out, (xhat, ivar, x.shape[0], training)

    def backward(self, ctx, grad_out: np.ndarray):
        xhat, ivar, n, training = ctx
        grad_gamma = (grad_out * xhat).sum(axis=0)
        grad_beta = grad_out.sum(axis=0)
        dxhat = grad_out * self.gamma
        if training:
            grad_in = (
                ivar
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=0)
                    - xhat * (dxhat * xhat).sum(axis=0)
                )
            )
        else:
            grad_in = dxhat * ivar
        return grad_in, {"gamma": grad_gamma, "beta": grad_beta}


def relu(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, (x > 0.0)


def relu_backward(ctx, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * ctx


def residual_add(a: SparseFeatureMap, b: SparseFeatureMap) -> SparseFeatureMap:
    """Elementwise sum of two maps sharing support and width."""
    if a.dims != b.dims or a.feats.shape != b.feats.shape:
        raise ShapeError("residual operands must share support and width")
    if not np.array_equal(a.coords, b.coords):
        raise ShapeError("residual operands must share support")
    return SparseFeatureMap(a.dims, a.coords, a.feats + b.feats)


def _deconv_slices(o: int, size: int) -> tuple[slice, slice]:
    """(input, output) slices along one axis for transposed-conv tap
    offset o = kernel_index - pad, kernel 4, stride 2, pad 1."""
    p0 = 1 if o < 0 else 0
    p1 = size - 1 if o == 2 else size
    q0 = 2 * p0 + o
    n = p1 - p0
    return slice(p0, p1), slice(q0, q0 + 2 * n, 2)


def _conv_slices(o: int, size: int) -> tuple[slice, slice]:
    """(output, input) slices along one axis for stride-1 pad-1 kernel-3
    tap offset o in {-1, 0, 1}."""
    x0 = max(0, -o)
    x1 = size - max(0, o)
    return slice(x0, x1), slice(x0 + o, x1 + o)


class DenseDeconv:
    """4x4x4 stride-2 transposed convolution; doubles every spatial dim."""

    kind = "dense_deconv"

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (64.0 * in_ch))
        self.weight = rng.normal(0.0, std, size=(4, 4, 4, in_ch, out_ch))
        self.bias = np.zeros(out_ch)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[0] != self.in_ch:
            raise ShapeError(
                f"deconv expects ({self.in_ch}, X, Y, Z), got {x.shape}"
            )
        _, sx, sy, sz = x.shape
        out = np.zeros((self.out_ch, 2 * sx, 2 * sy, 2 * sz))
        for kx, ky, kz in np.ndindex(4, 4, 4):
            px, qx = _deconv_slices(kx - 1, sx)
            py, qy = _deconv_slices(ky - 1, sy)
            pz, qz = _deconv_slices(kz - 1, sz)
            slab = x[:, px, py, pz]
            out[:, qx, qy, qz] += np.tensordot(
                self.weight[kx, ky, kz], slab, axes=([0], [0])
            )
        out += self.bias[:, None, None, None]
        return out, x

    def backward(self, ctx, grad_out: np.ndarray):
        x = ctx
        _, sx, sy, sz = x.shape
        grad_in = np.zeros_like(x)
        grad_w = np.zeros_like(self.weight)
        for kx, ky, kz in np.ndindex(4, 4, 4):
            px, qx = _deconv_slices(kx - 1, sx)
            py, qy = _deconv_slices(ky - 1, sy)
            pz, qz = _deconv_slices(kz - 1, sz)
            gslab = grad_out[:, qx, qy, qz]
            grad_in[:, px, py, pz] += np.tensordot(
                self.weight[kx, ky, kz], gslab, axes=([1], [0])
            )
            grad_w[kx, ky, kz] = np.tensordot(
                x[:, px, py, pz], gslab, axes=([1, 2, 3], [1, 2, 3])
            )
        grad_b = grad_out.sum(axis=(1, 2, 3))
        return grad_in, {"weight": grad_w, "bias": grad_b}


class DenseConv:
    """3x3x3 stride-1 pad-1 dense convolution (the 1-channel logit head)."""

    kind = "dense_conv"

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        std = np.sqrt(1.0 / (27.0 * in_ch))
        self.weight = rng.normal(0.0, std, size=(3, 3, 3, in_ch, out_ch))
        self.bias = np.zeros(out_ch)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[0] != self.in_ch:
            raise ShapeError(
                f"conv expects ({self.in_ch}, X, Y, Z), got {x.shape}"
            )
        _, sx, sy, sz = x.shape
        out = np.zeros((self.out_ch, sx, sy, sz))
        for kx, ky, kz in np.ndindex(3, 3, 3):
            ox, ix_ = _conv_slices(kx - 1, sx)
            oy, iy_ = _conv_slices(ky - 1, sy)
            oz, iz_ = _conv_slices(kz - 1, sz)
            out[:, ox, oy, oz] += np.tensordot(
                self.weight[kx, ky, kz], x[:, ix_, iy_, iz_], axes=([0], [0])
            )
        out += self.bias[:, None, None, None]
        return out, x

    def backward(self, ctx, grad_out: np.ndarray):
        x = ctx
        _, sx, sy, sz = x.shape
        grad_in = np.zeros_like(x)
        grad_w = np.zeros_like(self.weight)
        for kx, ky, kz in np.ndindex(3, 3, 3):
            ox, ix_ = _conv_slices(kx - 1, sx)
            oy, iy_ = _conv_slices(ky - 1, sy)
            oz, iz_ = _conv_slices(kz - 1, sz)
            gslab = grad_out[:, ox, oy, oz]
            grad_in[:, ix_, iy_, iz_] += np.tensordot(
                self.weight[kx, ky, kz], gslab, axes=([1], [0])
            )
            grad_w[kx, ky, kz] = np.tensordot(
                x[:, ix_, iy_, iz_], gslab, axes=([1, 2, 3], [1, 2, 3])
            )
        grad_b = grad_out.sum(axis=(1, 2, 3))
        return grad_in, {"weight": grad_w, "bias": grad_b}


def densify(x: SparseFeatureMap) -> np.ndarray:
    """Sparse map to a dense (C, X, Y, Z) tensor, zeros at absent sites."""
    c = x.channel_width
    dense = np.zeros((c,) + tuple(x.dims))
    if len(x):
        dense[:, x.coords[:, 0], x.coords[:, 1], x.coords[:, 2]] = x.feats.T
    return dense


def densify_backward(x: SparseFeatureMap, grad_dense: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return np.zeros_like(x.feats)
    return grad_dense[:, x.coords[:, 0], x.coords[:, 1], x.coords[:, 2]].T
