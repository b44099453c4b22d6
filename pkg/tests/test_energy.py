"""Tests for the energy-based latent prior and its gradient estimators."""

import numpy as np
import pytest
from scipy.special import erf

from ebmseg.energy import (EnergyPriorParams, HIDDEN, energy,
                           grad_alpha_estimate, grad_z_energy,
                           grad_z_energy_fast, init_energy_prior,
                           negative_energy, tmean_f)
from ebmseg.rng import RngStream
from ebmseg.tensor import Tensor, Tape, ShapeError, tsum
from helpers import finite_diff, assert_grad_close

D_Z = 4


def make_prior(seed=0, sigma_z_sq=1.0):
    return init_energy_prior(D_Z, RngStream(seed), sigma_z_sq=sigma_z_sq)


def zero_prior(sigma_z_sq=1.0):
    return EnergyPriorParams(
        w1=Tensor(np.zeros((HIDDEN, D_Z))), b1=Tensor(np.zeros(HIDDEN)),
        w2=Tensor(np.zeros((HIDDEN, HIDDEN))), b2=Tensor(np.zeros(HIDDEN)),
        w3=Tensor(np.zeros((1, HIDDEN))), b3=Tensor(np.zeros(1)),
        sigma_z_sq=sigma_z_sq)


def mlp_reference(p: EnergyPriorParams, z: np.ndarray) -> np.ndarray:
    """Independent plain-numpy forward pass of f(z)."""
    def g(a):
        return a * 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    h1 = g(z @ p.w1.data.T + p.b1.data)
    h2 = g(h1 @ p.w2.data.T + p.b2.data)
    return (h2 @ p.w3.data.T + p.b3.data)[:, 0]


def test_zero_network_is_gaussian_energy():
    p = zero_prior(sigma_z_sq=2.0)
    z = np.array([1.0, -2.0, 0.5, 0.0])
    assert negative_energy(p, Tensor(z)).item() == 0.0
    assert energy(p, Tensor(z)).item() == pytest.approx(
        np.dot(z, z) / 4.0, rel=1e-14)


def test_negative_energy_matches_reference():
    p = make_prior(3)
    zs = np.random.default_rng(1).normal(size=(7, D_Z))
    got = negative_energy(p, Tensor(zs)).data
    assert np.allclose(got, mlp_reference(p, zs), rtol=1e-12, atol=1e-12)


def test_energy_identity():
    p = make_prior(4, sigma_z_sq=0.7)
    zs = np.random.default_rng(2).normal(size=(5, D_Z))
    e = energy(p, Tensor(zs)).data
    f = negative_energy(p, Tensor(zs)).data
    quad = (zs * zs).sum(axis=1) / (2.0 * 0.7)
    assert np.allclose(e, quad - f, rtol=1e-13)


def test_grad_z_matches_finite_differences():
    p = make_prior(5)
    z = np.random.default_rng(3).normal(size=D_Z)
    g = grad_z_energy(p, Tensor(z))
    num = finite_diff(lambda a: energy(p, Tensor(a)).item(), z)
    assert_grad_close(g, num, rtol=1e-6)


def test_grad_z_fast_matches_tape():
    p = make_prior(6, sigma_z_sq=1.3)
    zs = np.random.default_rng(4).normal(size=(9, D_Z))
    fast = grad_z_energy_fast(p, zs)
    slow = grad_z_energy(p, Tensor(zs))
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-13)
    z1 = zs[0]
    assert np.allclose(grad_z_energy_fast(p, z1),
                       grad_z_energy(p, Tensor(z1)), rtol=1e-12)


def test_latent_shape_errors():
    p = make_prior(0)
    with pytest.raises(ShapeError):
        negative_energy(p, Tensor(np.zeros((2, 2, 2))))
    with pytest.raises(ShapeError):
        negative_energy(p, Tensor(np.zeros(D_Z + 1)))
    with pytest.raises(ValueError):
        grad_alpha_estimate(p, Tensor(np.zeros((0, D_Z))),
                            Tensor(np.zeros((3, D_Z))))


def test_grad_alpha_matches_two_tape_oracle():
    p = make_prior(7)
    rng = np.random.default_rng(5)
    pos = Tensor(rng.normal(size=(6, D_Z)))
    pri = Tensor(rng.normal(size=(8, D_Z)))
    got = grad_alpha_estimate(p, pos, pri)

    def mean_f_grads(zs):
        named = p.named()
        tape = Tape()
        tape.watch(*named.values())
        with tape:
            obj = tmean_f(p, zs)
        tape.backward(obj)
        return {n: tape.grad(t) for n, t in named.items()}

    gp = mean_f_grads(pos)
    gn = mean_f_grads(pri)
    for name in got:
        a = np.zeros_like(got[name]) if gp[name] is None else gp[name]
        b = np.zeros_like(got[name]) if gn[name] is None else gn[name]
        assert np.allclose(got[name], a - b, rtol=1e-12, atol=1e-13)


def test_grad_alpha_matches_finite_differences():
    p = make_prior(8)
    rng = np.random.default_rng(6)
    pos = rng.normal(size=(4, D_Z))
    pri = rng.normal(size=(4, D_Z))
    got = grad_alpha_estimate(p, Tensor(pos), Tensor(pri))

    for name in ("w1", "b2", "w3", "b3"):
        base = getattr(p, name).data

        def obj(arr):
            q = p.with_params({name: Tensor(arr)})
            return float(mlp_reference(q, pos).mean()
                         - mlp_reference(q, pri).mean())

        assert_grad_close(got[name], finite_diff(obj, base), rtol=1e-6)


def test_ascent_increases_objective():
    p = make_prior(9)
    rng = np.random.default_rng(7)
    pos = Tensor(rng.normal(loc=0.5, size=(8, D_Z)))
    pri = Tensor(rng.normal(loc=-0.5, size=(8, D_Z)))

    def objective(q):
        return float(mlp_reference(q, pos.data).mean()
                     - mlp_reference(q, pri.data).mean())

    eta = 1e-3
    values = [objective(p)]
    for _ in range(20):
        g = grad_alpha_estimate(p, pos, pri)
        p = p.with_params({n: Tensor(getattr(p, n).data + eta * g[n])
                           for n in g})
        values.append(objective(p))
    diffs = np.diff(values)
    assert np.all(diffs > 0), f"objective not strictly increasing: {values}"
