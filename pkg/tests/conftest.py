import numpy as np
import pytest

from samfed import tensor as T


def central_fd(f, arrays, eps=1e-3, picks=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arrays``.

    Computed in float64 on copies so the oracle does not share the tape path.
    ``picks``: list of (array index, flat index); default = every entry.
    """
    out = []
    if picks is None:
        picks = [(a, i) for a, arr in enumerate(arrays) for i in range(arr.size)]
    for a, i in picks:
        arr = arrays[a]
        flat = arr.reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def rel_err(a, b, floor=1e-2):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fd():
    return central_fd


@pytest.fixture
def tape_grad():
    def run(build, params):
        for p in params:
            p.grad = None
        with T.Tape() as tape:
            loss = build()
        T.backward(tape, loss)
        return [np.zeros(p.shape, np.float32) if p.grad is None else p.grad for p in params]

    return run
