"""Shared oracles for the test suite.

Everything here is deliberately naive: nested loops and explicit enumeration
that are independent of the library's own contraction / convolution paths.
"""

import numpy as np


def assert_norm_close(actual, desired, rtol, what="", atol=1e-10):
    """Norm-wise relative comparison: ||a - d|| <= rtol * ||d|| + atol.

    The absolute floor covers gradients that are exactly zero analytically
    (e.g. a conv bias followed by train-mode batch norm).
    """
    actual = np.asarray(actual, dtype=np.float64)
    desired = np.asarray(desired, dtype=np.float64)
    err = np.linalg.norm(actual - desired)
    ref = np.linalg.norm(desired)
    assert err <= rtol * ref + atol, (
        f"{what}: ||diff||={err:.3e} exceeds rtol {rtol} * ||ref||={ref:.3e} + {atol}"
    )


def contract_oracle(a, b, modes_a, modes_b):
    """Brute-force nested-loop tensor contraction."""
    free_a = [m for m in range(a.ndim) if m not in modes_a]
    free_b = [m for m in range(b.ndim) if m not in modes_b]
    out_shape = [a.shape[m] for m in free_a] + [b.shape[m] for m in free_b]
    out = np.zeros(out_shape or (1,), dtype=np.float64)
    for ia in np.ndindex(*a.shape):
        for ib in np.ndindex(*b.shape):
            if all(ia[ma] == ib[mb] for ma, mb in zip(modes_a, modes_b)):
                oi = tuple(ia[m] for m in free_a) + tuple(ib[m] for m in free_b)
                out[oi if oi else (0,)] += float(a[ia]) * float(b[ib])
    return out.reshape(out_shape) if out_shape else out.reshape(())


def reconstruct_oracle(topology, cores):
    """Brute-force sum over all bond-index assignments of core entry products."""
    kshape = topology.kernel_shape
    edges = topology.edges()
    bond_dims = [r for (_, _, r) in edges]
    labels = [topology.core_labels(i) for i in range(topology.n_cores)]
    out = np.zeros(kshape, dtype=np.float64)
    for kidx in np.ndindex(*kshape):
        total = 0.0
        for bidx in np.ndindex(*bond_dims) if bond_dims else [()]:
            bond_val = {("bond", i, j): bidx[e] for e, (i, j, _) in enumerate(edges)}
            prod = 1.0
            for c, core in enumerate(cores):
                idx = tuple(
                    bond_val[lab] if lab[0] == "bond" else kidx[lab[1]]
                    for lab in labels[c]
                )
                prod *= float(core[idx])
            total += prod
        out[kidx] = total
    return out


def conv2d_oracle(x, kernel, bias=None, stride=1, padding=0):
    """Nested-loop cross-correlation with zero padding."""
    b, cin, h, w = x.shape
    kin, kh, kw, cout = kernel.shape
    assert cin == kin
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    y = np.zeros((b, cout, ho, wo), dtype=np.float64)
    for n in range(b):
        for o in range(cout):
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, c, yy * stride + i, xx * stride + j] \
                                    * kernel[c, i, j, o]
                    y[n, o, yy, xx] = acc + (bias[o] if bias is not None else 0.0)
    return y


def finite_difference(f, x, step=1e-5):
    """Central finite differences of a scalar function over every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g
