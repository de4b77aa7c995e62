"""Shared oracle helpers: central finite differences against the engine."""

import numpy as np

from protoflow import numerics as nx

FD_STEP = 1e-4
FD_RTOL = 1e-4


def numeric_grads(build, arrays, step=FD_STEP):
    """Central-difference gradients of a scalar-valued tensor function.

    ``build`` maps a list of Tensors to a scalar Tensor; it is re-evaluated
    with perturbed inputs under no_grad, so this path never touches the
    backward machinery it is checking.
    """
    grads = []
    for j, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        it = np.nditer(base, flags=["multi_index"], op_flags=["readonly"])
        while not it.finished:
            idx = it.multi_index
            sides = []
            for sign in (1.0, -1.0):
                pert = [a.astype(np.float64).copy() for a in arrays]
                pert[j][idx] += sign * step
                with nx.no_grad():
                    sides.append(build([nx.Tensor(p) for p in pert]).item())
            g[idx] = (sides[0] - sides[1]) / (2.0 * step)
            it.iternext()
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=FD_RTOL, step=FD_STEP):
    leaves = [nx.Tensor(a, requires_grad=True) for a in arrays]
    build(leaves).backward()
    for leaf, num in zip(leaves, numeric_grads(build, arrays, step=step)):
        assert leaf.adjoint is not None, "leaf received no adjoint"
        err = np.max(np.abs(leaf.adjoint - num) / (1.0 + np.abs(num)))
        assert err < rtol, f"adjoint disagrees with finite differences: {err:.3e}"


def weighted_scalar(t, rng):
    """Reduce a tensor to a scalar with fixed random weights so every entry
    of the upstream gradient is distinct."""
    w = nx.constant(rng.normal(size=t.shape))
    return (t * w).sum()
