"""Energy-based prior over latent codes.

The prior density is an MLP-tilted Gaussian: p(z) proportional to
exp(f(z) - ||z||^2 / (2 sigma_z^2)), with f a {d_z, 100, 100} -> 1 MLP using
GELU activations.  The normalizer is never computed; learning uses the
posterior-minus-prior gradient estimator, which cancels it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from .rng import RngStream
from .tensor import Tensor, Tape, ShapeError, gelu, matmul, reshape, tsum

HIDDEN = 100


@dataclass(frozen=True)
class EnergyPriorParams:
    w1: Tensor  # [HIDDEN, d_z]
    b1: Tensor  # [HIDDEN]
    w2: Tensor  # [HIDDEN, HIDDEN]
    b2: Tensor  # [HIDDEN]
    w3: Tensor  # [1, HIDDEN]
    b3: Tensor  # [1]
    sigma_z_sq: float = 1.0

    def __post_init__(self):
        d_z = self.w1.shape[1]
        expect = {
            "w1": (HIDDEN, d_z), "b1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN), "b2": (HIDDEN,),
            "w3": (1, HIDDEN), "b3": (1,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"energy prior {name}: {got} != {shape}")
        if not self.sigma_z_sq > 0:
            raise ValueError("sigma_z_sq must be positive")

    @property
    def d_z(self) -> int:
        return self.w1.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in ("w1", "b1", "w2", "b2", "w3", "b3")}

    def with_params(self, values: dict[str, Tensor]) -> "EnergyPriorParams":
        return replace(self, **values)


def init_energy_prior(d_z: int, stream: RngStream,
                      sigma_z_sq: float = 1.0) -> EnergyPriorParams:
    """He-style init: weights N(0, 2/fan_in), biases zero."""
    g = stream.substream("energy-init")
    def w(fan_out, fan_in):
        return Tensor(g.standard_normal((fan_out, fan_in))
                      * np.sqrt(2.0 / fan_in))
    return EnergyPriorParams(
        w1=w(HIDDEN, d_z), b1=Tensor(np.zeros(HIDDEN)),
        w2=w(HIDDEN, HIDDEN), b2=Tensor(np.zeros(HIDDEN)),
        w3=w(1, HIDDEN), b3=Tensor(np.zeros(1)),
        sigma_z_sq=sigma_z_sq,
    )


def _as_batch(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 1:
        return reshape(z, (1, z.shape[0])), True
    if z.ndim == 2:
        return z, False
    raise ShapeError(f"latent must be [d_z] or [B,d_z], got {z.shape}")


def negative_energy(params: EnergyPriorParams, z: Tensor) -> Tensor:
    """f(z): MLP output, scalar per latent.  Returns [] or [B]."""
    zb, single = _as_batch(z)
    if zb.shape[1] != params.d_z:
        raise ShapeError(f"latent dim {zb.shape[1]} != {params.d_z}")
    h1 = gelu(matmul(zb, _t(params.w1)) + params.b1)
    h2 = gelu(matmul(h1, _t(params.w2)) + params.b2)
    out = matmul(h2, _t(params.w3)) + params.b3          # [B,1]
    out = tsum(out, axis=1)                              # [B]
    return tsum(out) if single else out


# transposed views of weight tensors are not differentiable tensors; keep the
# matmul order right-multiplying by W^T instead.
def _t(w: Tensor) -> Tensor:
    from .tensor import _out  # local import to reuse recording machinery
    raw = np.ascontiguousarray(w.data.T)
    return _out(raw, "transpose", [(w, lambda g: g.T)])


def energy(params: EnergyPriorParams, z: Tensor) -> Tensor:
    """E(z) = -f(z) + ||z||^2 / (2 sigma_z^2), scalar per latent."""
    zb, single = _as_batch(z)
    f = negative_energy(params, zb)                      # [B]
    quad = tsum(zb * zb, axis=1) * (0.5 / params.sigma_z_sq)
    e = quad - f
    return tsum(e) if single else e


def grad_z_energy(params: EnergyPriorParams, z: Tensor) -> np.ndarray:
    """dE/dz via reverse mode; shaped like z ([d_z] or [B,d_z])."""
    tape = Tape()
    tape.watch(z)
    with tape:
        e = tsum(energy(params, z)) if z.ndim == 2 else energy(params, z)
    tape.backward(e)
    g = tape.grad(z)
    return np.zeros_like(z.data) if g is None else g


def grad_z_energy_fast(params: EnergyPriorParams, z: np.ndarray) -> np.ndarray:
    """Hand-rolled batched dE/dz for the sampler hot path.

    Same quantity as grad_z_energy; kept as plain numpy so long chains with
    many parallel walkers avoid tape overhead.  Cross-checked against the
    tape route in the tests.
    """
    single = z.ndim == 1
    zb = z[None, :] if single else z
    a1 = zb @ params.w1.data.T + params.b1.data
    h1, d1 = _gelu_fwd_bwd(a1)
    a2 = h1 @ params.w2.data.T + params.b2.data
    h2, d2 = _gelu_fwd_bwd(a2)
    # f = h2 @ w3.T + b3 ; df/dz backward
    g2 = np.broadcast_to(params.w3.data, h2.shape) * d2
    g1 = (g2 @ params.w2.data) * d1
    df_dz = g1 @ params.w1.data
    grad = zb / params.sigma_z_sq - df_dz
    return grad[0] if single else grad


def _gelu_fwd_bwd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    return a * cdf, cdf + a * pdf


def grad_alpha_estimate(params: EnergyPriorParams,
                        posterior_zs: Tensor,
                        prior_zs: Tensor) -> dict[str, np.ndarray]:
    """Ascent direction for the log-likelihood w.r.t. the prior parameters.

    mean over posterior latents of df/dalpha minus the same mean over prior
    latents.  Batches are [B,d_z]; both must be non-empty.
    """
    pos, _ = _as_batch(posterior_zs)
    pri, _ = _as_batch(prior_zs)
    if pos.shape[0] == 0 or pri.shape[0] == 0:
        raise ValueError("empty latent batch")
    named = params.named()
    tape = Tape()
    tape.watch(*named.values())
    with tape:
        obj = tmean_f(params, pos) - tmean_f(params, pri)
    tape.backward(obj)
    out = {}
    for name, t in named.items():
        g = tape.grad(t)
        out[name] = np.zeros_like(t.data) if g is None else g
    return out


def tmean_f(params: EnergyPriorParams, zs: Tensor) -> Tensor:
    return tsum(negative_energy(params, zs)) * (1.0 / zs.shape[0])
