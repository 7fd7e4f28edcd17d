import numpy as np
import pytest

from monocal import autodiff as ad


def finite_difference(f, arrays, h=1e-5):
    """Central finite-difference gradients of scalar f(*arrays)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k in range(len(arrays)):
        g = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(make_loss, arrays, h=1e-5, tol=1e-4, seed=0):
    """Compare backward() gradients with central finite differences.

    make_loss(tape, *vars) must return a scalar Var.  The tape is re-seeded
    identically for every evaluation so stochastic ops stay fixed.  Returns
    the worst relative error; asserts it is <= tol.
    """
    def value(*arrs):
        tape = ad.Tape(seed)
        vs = [tape.variable(a) for a in arrs]
        return float(make_loss(tape, *vs).data)

    tape = ad.Tape(seed)
    vs = [tape.variable(a) for a in arrays]
    root = make_loss(tape, *vs)
    grads = ad.backward(root)
    fd = finite_difference(value, arrays, h=h)
    worst = 0.0
    for v, fdg in zip(vs, fd):
        an = np.asarray(grads[v.id], dtype=np.float64).reshape(fdg.shape)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(fdg)), 1e-4)
        err = float(np.max(np.abs(an - fdg) / denom)) if an.size else 0.0
        worst = max(worst, err)
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
