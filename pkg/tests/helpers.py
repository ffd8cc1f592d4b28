"""Shared test utilities."""

import numpy as np

from posemtl import autograd as ag

FD_STEP = 1e-6
FD_TOL = 1e-5
FD_ATOL = 1e-8


def check_gradients(build, params, seed=0):
    """Max relative FD error of ``sum(r * build())`` over ``params``.

    ``build()`` must return a Tensor; ``r`` is a fixed random projection so
    every output element contributes with a distinct weight. Random signs keep
    ``r`` free of a common offset that normalising layers would cancel.
    """
    out = build()
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    for p in params:
        p.grad = None
    ag.backward(ag.sum_(ag.mul(out, r)))
    worst = 0.0
    for p in params:
        num = ag.numerical_gradient(lambda: build().data * r, p, FD_STEP)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, ag.gradient_error(analytic, num, FD_ATOL))
    return worst


def rand(rng, *shape, low=-1.0, high=1.0):
    return ag.parameter(rng.uniform(low, high, size=shape))


def check_jacobian_rows(build, params):
    """Worst FD error over each output element on its own.

    Suits outputs constrained to a simplex, where a random projection of
    two nearly equal weights cancels the signal but not the rounding noise.
    """
    size = build().data.size
    worst = 0.0
    for k in range(size):
        row = lambda k=k: ag.reshape(build(), (-1,))[k]
        worst = max(worst, check_gradients(row, params))
    return worst
