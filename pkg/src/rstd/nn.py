"""Layers and backprop for the compression experiments' convolutional network.

Everything is plain numpy.  Convolution is cross-correlation (no kernel
flip) over NCHW features with an (in_channels, kh, kw, out_channels) kernel;
internally the engine works in NHWC so the im2col gather is a handful of
contiguous slice copies feeding one GEMM.  Layers keep persistent workspaces
keyed by shape, because on this allocator repeatedly faulting fresh 100MB+
buffers costs more than the math.  Arrays returned by layer forward/backward
are owned by the layer and stay valid until its next call.

The factorized convolution layer stores latent cores instead of a kernel.
Each forward pass reconstructs the kernel from the cores, optionally relocates
its entries through a fixed random permutation, and convolves; the backward
pass routes the kernel gradient through the inverse permutation and the
multilinear reconstruction gradient down to the cores.  With the identity
permutation this is exactly the conventional decomposed layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tdmodel
from .shuffle import (
    Permutation,
    apply_inverse_shuffle,
    apply_shuffle,
    layer_permutation_seed,
    mix_seed,
    permutation_from_seed,
)
from .tensor import DenseTensor

TABLE1_STRIDES = (1, 1, 2, 1, 1, 2, 1)


def conv_output_size(size_in: int, kernel: int, stride: int, padding: int) -> int:
    return (size_in + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Convolution engine
# ---------------------------------------------------------------------------

class BufferPool:
    """Shape-keyed persistent scratch arrays (fresh faults are expensive here)."""

    def __init__(self):
        self._bufs: dict = {}

    def get(self, name, shape, dtype):
        key = (name, shape, np.dtype(dtype))
        arr = self._bufs.get(key)
        if arr is None:
            arr = np.zeros(shape, dtype)
            self._bufs[key] = arr
        return arr


class Conv2dEngine:
    """im2col + GEMM cross-correlation with reusable NHWC workspaces."""

    def __init__(self, stride: int = 1, padding: int = 0):
        if stride < 1 or padding < 0:
            raise ValueError(f"invalid stride {stride} / padding {padding}")
        self.stride = int(stride)
        self.padding = int(padding)
        self._pool = BufferPool()
        self._cache = None

    def _buf(self, name, shape, dtype):
        return self._pool.get(name, shape, dtype)

    def prepare(self, x: DenseTensor, kernel: DenseTensor):
        """Validate geometry and build the column matrix for x."""
        if x.ndim != 4 or kernel.ndim != 4:
            raise ValueError("features must be (batch, channels, h, w) and the "
                             "kernel (in_channels, kh, kw, out_channels)")
        b, cin, h, w = x.shape
        kin, kh, kw, cout = kernel.shape
        if cin != kin:
            raise ValueError(
                f"input has {cin} channels but the kernel expects {kin}"
            )
        s, p = self.stride, self.padding
        ho = conv_output_size(h, kh, s, p)
        wo = conv_output_size(w, kw, s, p)
        if ho < 1 or wo < 1:
            raise ValueError(
                f"kernel {kh}x{kw} with stride {s}, padding {p} yields empty "
                f"output for {h}x{w} input"
            )
        dt = x.dtype
        xh = self._buf("xh", (b, h, w, cin), dt)
        np.copyto(xh, x.transpose(0, 2, 3, 1))
        if p > 0:
            xp = self._buf("xp", (b, h + 2 * p, w + 2 * p, cin), dt)
            xp[:, p:p + h, p:p + w, :] = xh  # border stays zero across reuses
        else:
            xp = xh
        cols = self._buf("cols", (b, ho, wo, kh, kw, cin), dt)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + ho * s:s, j:j + wo * s:s, :]
        kmat = np.ascontiguousarray(kernel.transpose(1, 2, 0, 3)).reshape(kh * kw * kin, cout)
        self._cache = dict(shape_x=x.shape, shape_k=kernel.shape, ho=ho, wo=wo,
                           cols=cols, kmat=kmat.astype(dt, copy=False), dtype=dt)
        return self._cache

    def forward(self, x: DenseTensor, kernel: DenseTensor,
                bias: DenseTensor | None) -> DenseTensor:
        c = self.prepare(x, kernel)
        b = x.shape[0]
        ho, wo = c["ho"], c["wo"]
        cout = kernel.shape[3]
        cols2d = c["cols"].reshape(b * ho * wo, -1)
        ymat = self._buf("ymat", (b * ho * wo, cout), c["dtype"])
        np.matmul(cols2d, c["kmat"], out=ymat)
        if bias is not None:
            if bias.shape != (cout,):
                raise ValueError(f"bias shape {bias.shape} != ({cout},)")
            ymat += bias
        y = self._buf("y_nchw", (b, cout, ho, wo), c["dtype"])
        np.copyto(y, ymat.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
        return y

    def backward(self, dy: DenseTensor, with_bias: bool = True,
                 need_dx: bool = True):
        """Gradients for the most recently prepared input/kernel pair.

        ``need_dx=False`` skips the input-gradient GEMM and scatter (the first
        layer of a network never consumes dx).
        """
        c = self._cache
        if c is None:
            raise RuntimeError("backward called before forward/prepare")
        b, cin, h, w = c["shape_x"]
        kin, kh, kw, cout = c["shape_k"]
        ho, wo, s, p = c["ho"], c["wo"], self.stride, self.padding
        if dy.shape != (b, cout, ho, wo):
            raise ValueError(f"dy shape {dy.shape} != {(b, cout, ho, wo)}")
        dt = c["dtype"]

        dymat = self._buf("dymat", (b * ho * wo, cout), dt)
        np.copyto(dymat.reshape(b, ho, wo, cout), dy.transpose(0, 2, 3, 1))
        dbias = dymat.sum(axis=0) if with_bias else None

        cols2d = c["cols"].reshape(b * ho * wo, -1)
        dkmat = self._buf("dkmat", (kh * kw * kin, cout), dt)
        np.matmul(cols2d.T, dymat, out=dkmat)
        dkernel = np.ascontiguousarray(
            dkmat.reshape(kh, kw, kin, cout).transpose(2, 0, 1, 3)
        )

        dx = None
        if need_dx:
            # dcols overwrites the column buffer; dkmat above already used it.
            np.matmul(dymat, c["kmat"].T, out=cols2d)
            dcols = c["cols"]
            dxp = self._buf("dxp", (b, h + 2 * p, w + 2 * p, cin), dt)
            dxp[...] = 0
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + ho * s:s, j:j + wo * s:s, :] += dcols[:, :, :, i, j, :]
            dx = self._buf("dx_nchw", (b, cin, h, w), dt)
            np.copyto(dx, dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2))
        self._cache = None
        return dx, dkernel, dbias


def conv2d_forward(x: DenseTensor, kernel: DenseTensor,
                   bias: DenseTensor | None = None,
                   stride: int = 1, padding: int = 0) -> DenseTensor:
    """Cross-correlation with zero padding plus optional per-channel bias."""
    return Conv2dEngine(stride, padding).forward(x, kernel, bias).copy()


def conv2d_backward(x: DenseTensor, kernel: DenseTensor, dy: DenseTensor,
                    stride: int = 1, padding: int = 0):
    """Exact gradients (dx, dkernel, dbias) of :func:`conv2d_forward`."""
    eng = Conv2dEngine(stride, padding)
    eng.prepare(x, kernel)
    dx, dkernel, dbias = eng.backward(dy)
    return dx.copy(), dkernel, dbias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      train: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization of NCHW features.

    Train mode normalizes by batch statistics and folds them into the running
    estimates as ``running = (1 - momentum) * running + momentum * batch``
    (variance stored unbiased); eval mode normalizes by the running stats.
    Returns (y, cache, new_running_mean, new_running_var).
    """
    if x.shape[1] != gamma.shape[0] or x.shape[1] != beta.shape[0]:
        raise ValueError("scale/shift length must match the channel count")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if train:
        if x.shape[0] == 0:
            raise ValueError("batch size 0 in train mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    cache = dict(xhat=xhat, inv_std=inv_std, gamma=gamma, train=train)
    return y, cache, new_rm, new_rv


def batchnorm_backward(cache, dy):
    """Gradients (dx, dgamma, dbeta) matching :func:`batchnorm_forward`."""
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    axes = (0, 2, 3)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    if cache["train"]:
        # Batch statistics depend on x, so the normalization itself is
        # differentiated: dx = inv_std * (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)).
        m1 = dxhat.mean(axis=axes).reshape(1, -1, 1, 1)
        m2 = (dxhat * xhat).mean(axis=axes).reshape(1, -1, 1, 1)
        dx = inv_std.reshape(1, -1, 1, 1) * (dxhat - m1 - xhat * m2)
    else:
        dx = inv_std.reshape(1, -1, 1, 1) * dxhat
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Pointwise and head operations
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return dy * (x > 0)


def global_average_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    return x.mean(axis=(2, 3))


def global_average_pool_backward(dy, spatial_shape):
    h, w = spatial_shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w),
                           dy.shape + (h, w)).copy()


def fully_connected(x, weights, bias):
    return x @ weights + bias


def fully_connected_backward(x, weights, dy):
    return dy @ weights.T, x.T @ dy, dy.sum(axis=0)


def softmax_cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(labels.size), labels].mean())


def softmax_cross_entropy_backward(logits, labels):
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(labels.size), labels] -= 1.0
    return (p / labels.size).astype(logits.dtype)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2d:
    """Dense convolution layer with a trainable kernel and per-channel bias."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=1, seed=0, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        rng = np.random.default_rng(seed)
        self.kernel = rng.normal(
            0.0, np.sqrt(2.0 / fan_in),
            size=(in_channels, kernel_size, kernel_size, out_channels),
        ).astype(dtype)
        self.bias = np.zeros(out_channels, dtype)
        self.stride, self.padding = stride, padding
        self.input_grad_needed = True
        self._engine = Conv2dEngine(stride, padding)
        self._grads = {}

    def forward(self, x, train=False):
        return self._engine.forward(x, self.kernel, self.bias)

    def backward(self, dy):
        dx, dkernel, dbias = self._engine.backward(
            dy, need_dx=self.input_grad_needed)
        self._grads = {"kernel": dkernel, "bias": dbias}
        return dx

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return self._grads

    def ratio_param_counts(self):
        n = self.kernel.size + self.bias.size
        return n, n


class FactorizedConv2d:
    """Convolution whose kernel is reconstructed from latent cores (optionally
    relocated through a fixed random permutation before convolving)."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=1, kind=tdmodel.KIND_TT, ranks=(1, 1, 1),
                 shuffled=False, permutation_seed=None, seed=0,
                 dtype=np.float32, topology=None):
        kernel_shape = (in_channels, kernel_size, kernel_size, out_channels)
        if topology is None:
            topology = tdmodel.build_topology(kind, kernel_shape, ranks)
        if topology.kernel_shape != kernel_shape:
            raise ValueError(
                f"topology reconstructs {topology.kernel_shape}, layer "
                f"declares {kernel_shape}"
            )
        self.topology = topology
        fan_in = in_channels * kernel_size * kernel_size
        self.cores = tdmodel.init_cores(topology, seed=seed, dtype=dtype,
                                        kernel_variance=2.0 / fan_in)
        self.permutation: Permutation | None = None
        if shuffled:
            if permutation_seed is None:
                raise ValueError("a shuffled layer needs a permutation seed")
            self.permutation = permutation_from_seed(
                int(np.prod(kernel_shape)), permutation_seed
            )
        self.bias = np.zeros(out_channels, dtype)
        self.stride, self.padding = stride, padding
        self.input_grad_needed = True
        self._engine = Conv2dEngine(stride, padding)
        self._grads = {}

    def reconstruct_kernel(self):
        kernel = tdmodel.reconstruct(self.topology, self.cores)
        if self.permutation is not None:
            kernel = apply_shuffle(self.permutation, kernel)
        return kernel

    def forward(self, x, train=False):
        return self._engine.forward(x, self.reconstruct_kernel(), self.bias)

    def backward(self, dy):
        dx, dkernel, dbias = self._engine.backward(
            dy, need_dx=self.input_grad_needed)
        if self.permutation is not None:
            dkernel = apply_inverse_shuffle(self.permutation, dkernel)
        dcores = tdmodel.reconstruct_gradient(self.topology, self.cores, dkernel)
        self._grads = {f"core{i}": g for i, g in enumerate(dcores)}
        self._grads["bias"] = dbias
        return dx

    def params(self):
        out = {f"core{i}": c for i, c in enumerate(self.cores)}
        out["bias"] = self.bias
        return out

    def grads(self):
        return self._grads

    def ratio_param_counts(self):
        stored = tdmodel.param_count(self.topology) + self.bias.size
        dense = int(np.prod(self.topology.kernel_shape)) + self.bias.size
        return stored, dense


class BatchNorm2d:
    """Buffered layer path; algebra identical to :func:`batchnorm_forward` /
    :func:`batchnorm_backward` (asserted by the test suite), written with
    in-place ops on persistent scratch to keep the hot loop allocation-free."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = np.ones(channels, dtype)
        self.beta = np.zeros(channels, dtype)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum, self.eps = momentum, eps
        self._pool = BufferPool()
        self._cache = None
        self._grads = {}

    @staticmethod
    def _col(v):
        return v.reshape(1, -1, 1, 1)

    def forward(self, x, train=False):
        if x.shape[1] != self.gamma.shape[0]:
            raise ValueError("scale/shift length must match the channel count")
        axes = (0, 2, 3)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if train:
            if x.shape[0] == 0:
                raise ValueError("batch size 0 in train mode")
            mean = x.mean(axis=axes, dtype=np.float64)
            sq = self._pool.get("sq", x.shape, x.dtype)
            np.multiply(x, x, out=sq)
            var = sq.mean(axis=axes, dtype=np.float64) - mean ** 2
            np.maximum(var, 0.0, out=var)
            m = self.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mean).astype(self.gamma.dtype)
            self.running_var = ((1 - m) * self.running_var
                                + m * unbiased).astype(self.gamma.dtype)
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = self._pool.get("xhat", x.shape, x.dtype)
        np.subtract(x, self._col(mean.astype(x.dtype)), out=xhat)
        xhat *= self._col(inv_std.astype(x.dtype))
        y = self._pool.get("y", x.shape, x.dtype)
        np.multiply(xhat, self._col(self.gamma), out=y)
        y += self._col(self.beta)
        self._cache = dict(xhat=xhat, inv_std=inv_std.astype(x.dtype),
                           train=train, n=n)
        return y

    def backward(self, dy):
        c = self._cache
        xhat, inv_std = c["xhat"], c["inv_std"]
        axes = (0, 2, 3)
        tmp = self._pool.get("tmp", dy.shape, dy.dtype)
        np.multiply(dy, xhat, out=tmp)
        dgamma = tmp.sum(axis=axes, dtype=np.float64).astype(dy.dtype)
        dbeta = dy.sum(axis=axes, dtype=np.float64).astype(dy.dtype)
        dx = self._pool.get("dx", dy.shape, dy.dtype)
        np.multiply(dy, self._col(self.gamma * inv_std), out=dx)
        if c["train"]:
            # dxhat means reduce to per-channel scalars:
            # mean(dxhat) = gamma*mean(dy); mean(dxhat*xhat) = gamma*dgamma/n.
            n = c["n"]
            mean_dy = dy.mean(axis=axes, dtype=np.float64).astype(dy.dtype)
            m1 = self.gamma * mean_dy * inv_std
            m2 = self.gamma * (dgamma / n) * inv_std
            np.multiply(xhat, self._col(m2), out=tmp)
            dx -= tmp
            dx -= self._col(m1)
        self._grads = {"gamma": dgamma, "beta": dbeta}
        return dx

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return self._grads

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU:
    def __init__(self):
        self._pool = BufferPool()
        self._y = None

    def forward(self, x, train=False):
        y = self._pool.get("y", x.shape, x.dtype)
        np.maximum(x, 0, out=y)
        self._y = y
        return y

    def backward(self, dy):
        dx = self._pool.get("dx", dy.shape, dy.dtype)
        np.multiply(dy, self._y > 0, out=dx)
        return dx

    def params(self):
        return {}

    def grads(self):
        return {}


class GlobalAvgPool:
    def __init__(self):
        self._spatial = None

    def forward(self, x, train=False):
        self._spatial = x.shape[2:]
        return global_average_pool(x)

    def backward(self, dy):
        return global_average_pool_backward(dy, self._spatial)

    def params(self):
        return {}

    def grads(self):
        return {}


class Linear:
    def __init__(self, in_features, out_features, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(
            0.0, np.sqrt(2.0 / in_features), size=(in_features, out_features)
        ).astype(dtype)
        self.bias = np.zeros(out_features, dtype)
        self._x = None
        self._grads = {}

    def forward(self, x, train=False):
        self._x = x
        return fully_connected(x, self.weights, self.bias)

    def backward(self, dy):
        dx, dw, db = fully_connected_backward(self._x, self.weights, dy)
        self._grads = {"weights": dw, "bias": db}
        return dx

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return self._grads

    def ratio_param_counts(self):
        n = self.weights.size + self.bias.size
        return n, n


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network:
    """An ordered layer stack with a stable, uniquely named parameter registry."""

    def __init__(self, named_layers):
        names = [n for n, _ in named_layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = list(named_layers)

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dlogits):
        d = dlogits
        for _, layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def forward_trace(self, x):
        """Eval-mode forward returning [(layer name, output shape), ...]."""
        trace = []
        for name, layer in self.layers:
            x = layer.forward(x, train=False)
            trace.append((name, tuple(x.shape)))
        return trace

    def parameters(self) -> dict:
        out = {}
        for name, layer in self.layers:
            for key, arr in layer.params().items():
                out[f"{name}.{key}"] = arr
        return out

    def gradients(self) -> dict:
        out = {}
        for name, layer in self.layers:
            for key, arr in layer.grads().items():
                out[f"{name}.{key}"] = arr
        return out

    def state_entries(self) -> dict:
        """Parameters plus non-trainable state (running stats) for checkpoints."""
        out = dict(self.parameters())
        for name, layer in self.layers:
            if hasattr(layer, "state"):
                for key, arr in layer.state().items():
                    out[f"{name}.{key}"] = arr
        return out

    def permutations(self) -> dict:
        out = {}
        for name, layer in self.layers:
            if getattr(layer, "permutation", None) is not None:
                out[name] = layer.permutation
        return out

    def compression_accounting(self) -> tuple[int, int]:
        """(compressed, uncompressed) parameter counts for the ratio report.

        Counts the parameters defining the convolution and linear maps:
        kernels or their latent cores, plus all biases and the classifier
        head.  Normalization scale/shift are identical on both sides of the
        ratio and are left out of both counts, keeping the ratio a measure of
        the kernel-storage saving.
        """
        stored = dense = 0
        for _, layer in self.layers:
            if hasattr(layer, "ratio_param_counts"):
                s, d = layer.ratio_param_counts()
                stored += s
                dense += d
        return stored, dense

    def compression_ratio(self) -> float:
        stored, dense = self.compression_accounting()
        return tdmodel.compression_ratio(stored, dense)


@dataclass(frozen=True)
class LayerCompression:
    """How one convolution layer is compressed.

    ``seed`` pins the permutation of a shuffled layer; if None it is derived
    from the network seed as ``seed XOR layer_index``.
    """

    kind: str
    ranks: tuple[int, ...]
    shuffled: bool = False
    seed: int | None = None


def build_table1_network(channels: int = 256,
                         compression: dict[int, LayerCompression] | None = None,
                         in_channels: int = 3, num_classes: int = 10,
                         seed: int = 0, dtype=np.float32) -> Network:
    """Seven 3x3 conv layers (strides 1,1,2,1,1,2,1), each followed by batch
    norm and ReLU, then global average pooling and a linear classifier.

    ``compression`` maps 1-based conv indices (2..7) to
    :class:`LayerCompression`; the first conv layer always stays dense.
    """
    compression = dict(compression or {})
    for idx in compression:
        if idx == 1:
            raise ValueError("the first convolution layer is never compressed")
        if not 2 <= idx <= len(TABLE1_STRIDES):
            raise ValueError(f"no convolution layer {idx} to compress")

    layers = []
    for idx, stride in enumerate(TABLE1_STRIDES, start=1):
        cin = in_channels if idx == 1 else channels
        spec = compression.get(idx)
        init_seed = mix_seed(seed, idx)
        if spec is None:
            conv = Conv2d(cin, channels, 3, stride, 1, seed=init_seed, dtype=dtype)
        else:
            perm_seed = spec.seed
            if spec.shuffled and perm_seed is None:
                perm_seed = layer_permutation_seed(seed, idx)
            conv = FactorizedConv2d(
                cin, channels, 3, stride, 1,
                kind=spec.kind, ranks=tuple(spec.ranks), shuffled=spec.shuffled,
                permutation_seed=perm_seed, seed=init_seed, dtype=dtype,
            )
        if idx == 1:
            conv.input_grad_needed = False  # nothing below consumes dx
        layers.append((f"conv{idx}", conv))
        layers.append((f"bn{idx}", BatchNorm2d(channels, dtype=dtype)))
        layers.append((f"relu{idx}", ReLU()))
    layers.append(("pool", GlobalAvgPool()))
    layers.append(("fc", Linear(channels, num_classes,
                                seed=mix_seed(seed, 1000), dtype=dtype)))
    return Network(layers)
