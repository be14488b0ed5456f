"""Tensor-decomposition topologies and the reconstruction operator.

A topology is an undirected graph over N cores: a symmetric adjacency matrix
whose entry (i, j) > 0 is the bond rank shared by cores i and j (0 means no
edge), plus an assignment of every global kernel mode to exactly one core.
With all ranks equal to 1 the adjacency degenerates to a plain 0/1 edge
matrix.  Reconstruction contracts all cores over their bonds and returns the
full kernel with modes in ascending global-mode order; for convolution
kernels the global order is (in_channels, height, width, out_channels).

Canonical core layout
---------------------
Core i stores its modes in a fixed order shared by every routine here:

    bonds to lower-indexed neighbours (ascending j)
    | its free modes (declared order)
    | bonds to higher-indexed neighbours (ascending j)

e.g. a 4-core chain over modes (I, H, W, O) with ranks (r1, r2, r3) has core
shapes (I, r1), (r1, H, r2), (r2, W, r3), (r3, O), and the 4-core ring adds
the closing bond: (I, r1, r4), (r1, H, r2), (r2, W, r3), (r4, r3, O).

Contraction runs sequentially left to right over core index, which absorbs
the ring-closing bond together with the last core.  Mode bookkeeping uses
symbolic labels: ``("free", mode_id)`` or ``("bond", i, j)`` with i < j.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import DenseTensor

KIND_TT = "tt"
KIND_TT_MATRIX = "tt-matrix"
KIND_TR = "tr"
KIND_CUSTOM = "custom"
KINDS = (KIND_TT, KIND_TT_MATRIX, KIND_TR, KIND_CUSTOM)

# Global mode ids of a convolution kernel in canonical order.
MODE_IN, MODE_H, MODE_W, MODE_OUT = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class Topology:
    """Adjacency matrix (entries are bond ranks) plus per-core free modes.

    ``free_modes[i]`` is an ordered tuple of ``(global_mode_id, dimension)``
    pairs owned by core i.  Every global mode id in ``0..n_modes-1`` must be
    owned by exactly one core, and the graph must be connected.
    """

    adjacency: np.ndarray
    free_modes: tuple[tuple[tuple[int, int], ...], ...]
    kind: str = KIND_CUSTOM

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.int64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        n = adj.shape[0]
        if len(self.free_modes) != n:
            raise ValueError(
                f"free_modes lists {len(self.free_modes)} cores, adjacency has {n}"
            )
        if np.any(adj < 0):
            raise ValueError("adjacency entries must be nonnegative bond ranks")
        if np.any(adj != adj.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(adj) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if self.kind not in KINDS:
            raise ValueError(f"unknown topology kind {self.kind!r}")

        mode_ids = [m for core in self.free_modes for (m, _) in core]
        if sorted(mode_ids) != list(range(len(mode_ids))):
            raise ValueError(
                "global modes must be assigned to exactly one core each; "
                f"got ids {sorted(mode_ids)}"
            )
        if any(d < 1 for core in self.free_modes for (_, d) in core):
            raise ValueError("all free-mode dimensions must be >= 1")

        if n > 1:
            seen = {0}
            frontier = [0]
            while frontier:
                i = frontier.pop()
                for j in np.nonzero(adj[i])[0]:
                    if int(j) not in seen:
                        seen.add(int(j))
                        frontier.append(int(j))
            if len(seen) != n:
                raise ValueError("topology graph must be connected")

        if self.kind == KIND_TT:
            self._check_pattern(chain_edges(n), "chain")
        elif self.kind == KIND_TR:
            self._check_pattern(chain_edges(n) + ([(0, n - 1)] if n > 2 else []), "ring")

        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(
            self, "free_modes", tuple(tuple((int(m), int(d)) for m, d in core)
                                      for core in self.free_modes)
        )

    def _check_pattern(self, expected_edges, name):
        actual = {(i, j) for i, j, _ in self.edges()}
        if actual != set(expected_edges):
            raise ValueError(
                f"kind {self.kind!r} requires the {name} edge pattern "
                f"{sorted(expected_edges)}, got {sorted(actual)}"
            )

    @property
    def n_cores(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_modes(self) -> int:
        return sum(len(core) for core in self.free_modes)

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        dims = dict(m for core in self.free_modes for m in core)
        return tuple(dims[m] for m in range(self.n_modes))

    def edges(self) -> list[tuple[int, int, int]]:
        """All (i, j, rank) with i < j and rank > 0, lexicographically."""
        out = []
        n = self.n_cores
        for i in range(n):
            for j in range(i + 1, n):
                r = int(self.adjacency[i, j])
                if r > 0:
                    out.append((i, j, r))
        return out

    def core_labels(self, i: int) -> tuple[tuple, ...]:
        """Symbolic labels of core i's modes in the canonical layout."""
        lower = [("bond", j, i) for j in range(i) if self.adjacency[j, i] > 0]
        free = [("free", m) for (m, _) in self.free_modes[i]]
        upper = [("bond", i, j) for j in range(i + 1, self.n_cores)
                 if self.adjacency[i, j] > 0]
        return tuple(lower + free + upper)

    def core_shape(self, i: int) -> tuple[int, ...]:
        dims = dict(self.free_modes[i])
        shape = []
        for lab in self.core_labels(i):
            if lab[0] == "bond":
                shape.append(int(self.adjacency[lab[1], lab[2]]))
            else:
                shape.append(dims[lab[1]])
        return tuple(shape)

    @property
    def core_shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.core_shape(i) for i in range(self.n_cores))


def chain_edges(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def build_topology(
    kind: str,
    mode_dims: Sequence[int],
    ranks: Sequence[int],
    groups: Sequence[Sequence[int]] | None = None,
) -> Topology:
    """Build one of the preset topologies over the given global mode dims.

    * ``tt``: one core per mode, chain edges; ``len(ranks) == len(dims) - 1``.
    * ``tr``: chain plus the closing edge; ``len(ranks) == len(dims)``, the
      last rank being the closing bond between the first and last cores.
    * ``tt-matrix``: cores own groups of modes (default pairing
      ``((0, 1), (2, 3))`` i.e. (in, height) and (width, out)), chain edges;
      ``len(ranks) == len(groups) - 1``.
    """
    dims = [int(d) for d in mode_dims]
    ranks = [int(r) for r in ranks]
    if any(d < 1 for d in dims):
        raise ValueError(f"mode dims must be >= 1, got {dims}")
    if any(r < 1 for r in ranks):
        raise ValueError(f"bond ranks must be >= 1, got {ranks}")
    m = len(dims)
    kind = kind.lower()

    if kind == KIND_TT:
        if len(ranks) != m - 1:
            raise ValueError(f"tt over {m} modes needs {m - 1} ranks, got {len(ranks)}")
        edges = list(zip(chain_edges(m), ranks))
        free = tuple(((i, dims[i]),) for i in range(m))
        n = m
    elif kind == KIND_TR:
        if m < 3:
            raise ValueError("tr needs at least 3 modes")
        if len(ranks) != m:
            raise ValueError(f"tr over {m} modes needs {m} ranks, got {len(ranks)}")
        edges = list(zip(chain_edges(m), ranks[:-1])) + [((0, m - 1), ranks[-1])]
        free = tuple(((i, dims[i]),) for i in range(m))
        n = m
    elif kind == KIND_TT_MATRIX:
        if groups is None:
            if m != 4:
                raise ValueError("tt-matrix needs explicit groups unless there are 4 modes")
            groups = ((0, 1), (2, 3))
        groups = tuple(tuple(int(g) for g in grp) for grp in groups)
        if sorted(g for grp in groups for g in grp) != list(range(m)):
            raise ValueError(f"groups {groups} must partition modes 0..{m - 1}")
        if len(ranks) != len(groups) - 1:
            raise ValueError(
                f"tt-matrix with {len(groups)} cores needs {len(groups) - 1} ranks, "
                f"got {len(ranks)}"
            )
        n = len(groups)
        edges = list(zip(chain_edges(n), ranks))
        free = tuple(tuple((g, dims[g]) for g in grp) for grp in groups)
    else:
        raise ValueError(f"unknown preset kind {kind!r}; use one of tt, tt-matrix, tr")

    adj = np.zeros((n, n), dtype=np.int64)
    for (i, j), r in edges:
        adj[i, j] = adj[j, i] = r
    return Topology(adjacency=adj, free_modes=free, kind=kind)


@dataclass(frozen=True, eq=False)
class CoreSet:
    """The latent core tensors of one decomposition, validated on construction."""

    topology: Topology
    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        cores = tuple(np.asarray(c) for c in self.cores)
        expected = self.topology.core_shapes
        if len(cores) != len(expected):
            raise ValueError(
                f"{len(cores)} cores for a {len(expected)}-core topology"
            )
        for i, (core, shape) in enumerate(zip(cores, expected)):
            if core.shape != shape:
                raise ValueError(
                    f"core {i} has shape {core.shape}, topology requires {shape}"
                )
        object.__setattr__(self, "cores", cores)

    def __len__(self):
        return len(self.cores)

    def __getitem__(self, i):
        return self.cores[i]

    def __iter__(self):
        return iter(self.cores)

    @property
    def dtype(self):
        return self.cores[0].dtype

    def astype(self, dtype) -> "CoreSet":
        return CoreSet(self.topology, tuple(c.astype(dtype) for c in self.cores))


def init_cores(
    topology: Topology,
    seed: int,
    dtype=np.float32,
    kernel_variance: float | None = None,
) -> CoreSet:
    """Gaussian core initialization matched to a target kernel element variance.

    Each entry of core i is drawn i.i.d. from N(0, s_i^2) with

        s_i = sigma^(1/N) * prod over incident edges of rank^(-1/4),

    where sigma^2 is the target variance.  Summing the prod-of-ranks bond
    terms then gives reconstructed-kernel elements of variance sigma^2, so the
    compressed layer starts at the same activation scale as a dense kernel.
    The default target is He-style 2 / prod(all mode dims but the last),
    i.e. 2 / (in_channels * kh * kw) for convolution kernels.
    """
    if kernel_variance is None:
        shape = topology.kernel_shape
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
        kernel_variance = 2.0 / fan_in
    n = topology.n_cores
    sigma_root = float(kernel_variance) ** (0.5 / n)
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    cores = []
    for i in range(n):
        bond_norm = 1.0
        for (a, b, r) in topology.edges():
            if i in (a, b):
                bond_norm *= float(r) ** -0.25
        std = sigma_root * bond_norm
        cores.append(rng.normal(0.0, std, size=topology.core_shape(i)).astype(dtype))
    return CoreSet(topology, tuple(cores))


def _as_core_list(topology: Topology, cores) -> tuple[np.ndarray, ...]:
    if isinstance(cores, CoreSet):
        if cores.topology is not topology and cores.topology.core_shapes != topology.core_shapes:
            raise ValueError("core set does not conform to this topology")
        return cores.cores
    return CoreSet(topology, tuple(np.asarray(c) for c in cores)).cores


def reconstruct(topology: Topology, cores) -> DenseTensor:
    """Contract all cores over their bonds into the full kernel.

    The output carries the free modes in ascending global-mode order, i.e.
    (in_channels, height, width, out_channels) for convolution kernels.
    """
    core_arrays = _as_core_list(topology, cores)
    acc = core_arrays[0]
    labels = list(topology.core_labels(0))
    for i in range(1, topology.n_cores):
        core_lab = list(topology.core_labels(i))
        shared = [lab for lab in labels if lab in core_lab]
        axes_a = [labels.index(lab) for lab in shared]
        axes_b = [core_lab.index(lab) for lab in shared]
        acc = np.tensordot(acc, core_arrays[i], axes=(axes_a, axes_b))
        labels = [lab for lab in labels if lab not in shared] + \
                 [lab for lab in core_lab if lab not in shared]
    order = sorted(range(len(labels)), key=lambda k: labels[k][1])
    return np.ascontiguousarray(np.transpose(acc, order))


def reconstruct_gradient(topology: Topology, cores, upstream: DenseTensor) -> list[np.ndarray]:
    """Per-core gradients of <upstream, reconstruct(cores)>.

    Reconstruction is multilinear, so the gradient for core i is its
    "environment": ``upstream`` contracted with every other core, leaving
    open exactly core i's bond and free modes (returned in core i's canonical
    layout).
    """
    core_arrays = _as_core_list(topology, cores)
    kshape = topology.kernel_shape
    if tuple(upstream.shape) != kshape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match kernel shape {kshape}"
        )
    grads = []
    for target in range(topology.n_cores):
        acc = upstream
        labels = [("free", m) for m in range(topology.n_modes)]
        for j in range(topology.n_cores):
            if j == target:
                continue
            core_lab = list(topology.core_labels(j))
            shared = [lab for lab in labels if lab in core_lab]
            axes_a = [labels.index(lab) for lab in shared]
            axes_b = [core_lab.index(lab) for lab in shared]
            acc = np.tensordot(acc, core_arrays[j], axes=(axes_a, axes_b))
            labels = [lab for lab in labels if lab not in shared] + \
                     [lab for lab in core_lab if lab not in shared]
        target_lab = list(topology.core_labels(target))
        order = [labels.index(lab) for lab in target_lab]
        grads.append(np.ascontiguousarray(np.transpose(acc, order)))
    return grads


def param_count(topology: Topology) -> int:
    """Total stored elements across all cores."""
    return int(sum(int(np.prod(s)) for s in topology.core_shapes))


def compression_ratio(n_compressed: int, n_uncompressed: int) -> float:
    """Compressed-to-uncompressed trainable parameter ratio."""
    if n_uncompressed <= 0:
        raise ValueError(f"uncompressed parameter count must be > 0, got {n_uncompressed}")
    if n_compressed < 0:
        raise ValueError(f"compressed parameter count must be >= 0, got {n_compressed}")
    return float(n_compressed) / float(n_uncompressed)


def tt_decompose(tensor: DenseTensor, max_rank: int | None = None) -> tuple[Topology, CoreSet]:
    """Chain decomposition of a dense tensor via sequential matricization + SVD.

    With ``max_rank=None`` the full SVD ranks are kept and the round trip
    ``reconstruct(tt_decompose(W)) == W`` is exact up to floating point.
    """
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim < 2:
        raise ValueError("need at least 2 modes to build a chain decomposition")
    dims = t.shape
    cores = []
    ranks = []
    c = t
    r_prev = 1
    for k in range(t.ndim - 1):
        c = c.reshape(r_prev * dims[k], -1)
        u, s, vt = np.linalg.svd(c, full_matrices=False)
        r = s.size if max_rank is None else min(s.size, int(max_rank))
        core = u[:, :r].reshape(r_prev, dims[k], r)
        cores.append(core[0] if k == 0 else core)
        c = s[:r, None] * vt[:r]
        ranks.append(r)
        r_prev = r
    cores.append(c.reshape(r_prev, dims[-1]))
    topo = build_topology(KIND_TT, dims, ranks)
    return topo, CoreSet(topo, tuple(cores))


def rank1_tr_split_forward(cores: CoreSet, x: DenseTensor, stride: int = 1,
                           padding: int = 0) -> DenseTensor:
    """Two-step path of a rank-1 ring layer: latent convolution, then channel mixing.

    With every bond rank equal to 1 the kernel is an outer product of four
    vectors.  Step 1 convolves the input with the merged
    (in_channels, height, width) factors, producing a single latent feature
    map; step 2 forms each output channel by scaling that map with the
    out-channel factor.  Equals reconstruct-then-convolve exactly, and makes
    plain why every output channel is the same map up to scale.
    """
    topo = cores.topology
    if topo.kind != KIND_TR or topo.n_modes != 4:
        raise ValueError("split path requires a 4-mode ring topology")
    if any(r != 1 for (_, _, r) in topo.edges()):
        raise ValueError("split path requires every bond rank to equal 1")
    u = cores[0].reshape(-1)   # in_channels factor
    v = cores[1].reshape(-1)   # height factor
    w = cores[2].reshape(-1)   # width factor
    d = cores[3].reshape(-1)   # out_channels factor
    latent_kernel = np.einsum("i,h,w->ihw", u, v, w)[..., None]

    from .nn import conv2d_forward  # deferred: nn builds on this module

    z = conv2d_forward(x, latent_kernel.astype(x.dtype), bias=None,
                       stride=stride, padding=padding)
    return np.ascontiguousarray(z * d.astype(x.dtype).reshape(1, -1, 1, 1))
