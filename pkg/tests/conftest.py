import numpy as np
import pytest

from plumeseg import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def directional_fd(f, xs, h=1e-6, probe_seed=0):
    """Worst relative error between analytic and central-difference
    directional derivatives of scalar f(*xs), one random direction per input.
    """
    prng = np.random.default_rng(probe_seed)
    with T.GradTape() as tape:
        leaves = [tape.watch(x) for x in xs]
        loss = f(*leaves)
        grads = tape.gradients(loss, leaves)
    worst = 0.0
    for i, x in enumerate(xs):
        v = prng.standard_normal(x.shape).astype(x.dtype)
        plus = [a.copy() for a in xs]
        minus = [a.copy() for a in xs]
        plus[i] = (x + h * v).astype(x.dtype)
        minus[i] = (x - h * v).astype(x.dtype)
        fd = (f(*[T.Tensor(a) for a in plus]).item()
              - f(*[T.Tensor(a) for a in minus]).item()) / (2 * h)
        an = float((grads[i] * v).sum())
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst
