"""Shared test utilities: central finite differences against tape gradients."""

import numpy as np

from ebmseg.tensor import Tensor, Tape


def finite_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        g.ravel()[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) \
            / (2.0 * eps)
    return g


def tape_grad(op, x: np.ndarray, *rest) -> np.ndarray:
    """Gradient of sum(weights * op(x, *rest)) w.r.t. x via the tape.

    A fixed pseudo-random weighting turns any output into a scalar without
    hiding sign errors the way a plain sum can.
    """
    xt = Tensor(x)
    tape = Tape()
    tape.watch(xt)
    with tape:
        out = op(xt, *rest)
        w = _weights(out.shape)
        s = (out * w).data.sum()
        loss = (out * w)
        from ebmseg.tensor import tsum
        loss = tsum(loss)
    tape.backward(loss)
    g = tape.grad(xt)
    assert g is not None, "no gradient recorded"
    assert abs(loss.item() - s) < 1e-12
    return g


def numeric_grad(op, x: np.ndarray, *rest, eps: float = 1e-6) -> np.ndarray:
    def f(arr):
        out = op(Tensor(arr), *rest)
        return float((out.data * _weights(out.shape)).sum())
    return finite_diff(f, x, eps=eps)


def _weights(shape) -> np.ndarray:
    g = np.random.Generator(np.random.Philox(key=[7, 7]))
    return g.uniform(0.5, 1.5, size=shape)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float = 1e-6) -> None:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1.0)
    err = np.abs(analytic - numeric).max() / scale
    assert err < rtol, f"gradient mismatch: rel err {err:.3e}"


def check_op_grad(op, x: np.ndarray, *rest, rtol: float = 1e-6,
                  eps: float = 1e-6) -> None:
    assert_grad_close(tape_grad(op, x, *rest), numeric_grad(op, x, *rest,
                                                            eps=eps), rtol)
