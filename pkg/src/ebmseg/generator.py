"""Stochastic segmentation generator g(x, z).

A compact 4-stage convolutional encoder produces feature maps at 1/2 .. 1/16
resolution.  The latent code is linearly projected, tiled over the bottleneck
grid and concatenated channelwise, then four fusion blocks (3x3 conv + GELU +
nearest 2x upsample) walk back up, each consuming the matching encoder
feature.  A 1x1 head and sigmoid give a per-pixel foreground probability map
at the input resolution.

Downsampling uses 2x2 average pooling after a stride-1 conv so the whole
network commutes with horizontal flips (symmetric padding throughout).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import RngStream
from .tensor import (Tensor, ShapeError, as_tensor, avg_pool2, concat,
                     conv2d, gelu, matmul, reshape, sigmoid, tile_spatial,
                     upsample2)

DEFAULT_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True)
class GeneratorParams:
    enc_w: tuple          # 4 conv kernels [w_i, c_in, 3, 3]
    enc_b: tuple
    zp_w: Tensor          # [c_z, d_z]
    zp_b: Tensor          # [c_z]
    fuse_w: tuple         # 4 conv kernels, bottleneck first
    fuse_b: tuple
    head_w: Tensor        # [1, fuse_out, 1, 1]
    head_b: Tensor        # [1]
    sigma_eps_sq: float = 0.3
    widths: tuple = DEFAULT_WIDTHS
    c_z: int = 16
    d_z: int = 8

    def __post_init__(self):
        if not self.sigma_eps_sq > 0:
            raise ValueError("sigma_eps_sq must be positive")
        if len(self.enc_w) != 4 or len(self.fuse_w) != 4:
            raise ShapeError("generator expects 4 encoder and 4 fusion blocks")

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(4):
            out[f"enc{i}.w"] = self.enc_w[i]
            out[f"enc{i}.b"] = self.enc_b[i]
        out["zp.w"] = self.zp_w
        out["zp.b"] = self.zp_b
        for i in range(4):
            out[f"fuse{i}.w"] = self.fuse_w[i]
            out[f"fuse{i}.b"] = self.fuse_b[i]
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def with_params(self, values: dict[str, Tensor]) -> "GeneratorParams":
        merged = self.named() | values
        return replace(
            self,
            enc_w=tuple(merged[f"enc{i}.w"] for i in range(4)),
            enc_b=tuple(merged[f"enc{i}.b"] for i in range(4)),
            zp_w=merged["zp.w"], zp_b=merged["zp.b"],
            fuse_w=tuple(merged[f"fuse{i}.w"] for i in range(4)),
            fuse_b=tuple(merged[f"fuse{i}.b"] for i in range(4)),
            head_w=merged["head.w"], head_b=merged["head.b"],
        )


def fusion_widths(widths) -> tuple:
    """Output channels of the fusion blocks, bottleneck first."""
    return (widths[2], widths[1], widths[0], widths[0])


def init_generator(stream: RngStream, widths=DEFAULT_WIDTHS, c_z: int = 16,
                   d_z: int = 8, sigma_eps_sq: float = 0.3) -> GeneratorParams:
    g = stream.substream("generator-init")

    def conv(c_out, c_in, k=3):
        fan_in = c_in * k * k
        return (Tensor(g.standard_normal((c_out, c_in, k, k))
                       * np.sqrt(2.0 / fan_in)),
                Tensor(np.zeros(c_out)))

    enc = [conv(widths[0], 3)]
    for i in range(1, 4):
        enc.append(conv(widths[i], widths[i - 1]))
    zp_w = Tensor(g.standard_normal((c_z, d_z)) * np.sqrt(2.0 / d_z))
    zp_b = Tensor(np.zeros(c_z))
    fw = fusion_widths(widths)
    fuse_in = (widths[3] + c_z, fw[0] + widths[2], fw[1] + widths[1],
               fw[2] + widths[0])
    fuse = [conv(fw[i], fuse_in[i]) for i in range(4)]
    head_w, head_b = conv(1, fw[3], k=1)
    return GeneratorParams(
        enc_w=tuple(w for w, _ in enc), enc_b=tuple(b for _, b in enc),
        zp_w=zp_w, zp_b=zp_b,
        fuse_w=tuple(w for w, _ in fuse), fuse_b=tuple(b for _, b in fuse),
        head_w=head_w, head_b=head_b,
        sigma_eps_sq=sigma_eps_sq, widths=tuple(widths), c_z=c_z, d_z=d_z,
    )


def _check_image(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected image batch [B,3,H,W], got {x.shape}")
    _, _, h, w = x.shape
    if h % 16 or w % 16:
        raise ShapeError("image extents must be divisible by 16")


def encode(params: GeneratorParams, x: Tensor) -> list:
    """Four feature maps at 1/2, 1/4, 1/8 and 1/16 resolution."""
    _check_image(x)
    feats = []
    h = x
    for i in range(4):
        h = avg_pool2(gelu(conv2d(h, params.enc_w[i], params.enc_b[i])))
        feats.append(h)
    return feats


def decode(params: GeneratorParams, feats: list, z: Tensor) -> Tensor:
    """Fuse encoder features with the tiled latent; sigmoid probability map."""
    if z.ndim == 1:
        z = reshape(z, (1, z.shape[0]))
    if z.shape[1] != params.d_z:
        raise ShapeError(f"latent dim {z.shape[1]} != {params.d_z}")
    e1, e2, e3, e4 = feats
    gh, gw = e4.shape[2], e4.shape[3]
    zmap = tile_spatial(matmul(z, _transpose(params.zp_w)) + params.zp_b,
                        gh, gw)
    h = concat([e4, zmap], axis=1)
    skips = (e3, e2, e1, None)
    for i in range(4):
        h = upsample2(gelu(conv2d(h, params.fuse_w[i], params.fuse_b[i])))
        if skips[i] is not None:
            h = concat([h, skips[i]], axis=1)
    logits = conv2d(h, params.head_w, params.head_b, pad=0)
    return sigmoid(logits)


def _transpose(w: Tensor) -> Tensor:
    from .tensor import _out
    raw = np.ascontiguousarray(w.data.T)
    return _out(raw, "transpose", [(w, lambda g: g.T)])


def forward_batch(params: GeneratorParams, xs, zs) -> Tensor:
    """Probability maps [B,1,H,W] for a batch of images and latents."""
    xs, zs = as_tensor(xs), as_tensor(zs)
    if xs.ndim != 4 or xs.shape[0] == 0:
        raise ShapeError("forward_batch needs a non-empty [B,3,H,W] batch")
    if zs.ndim != 2 or zs.shape[0] != xs.shape[0]:
        raise ShapeError("latent batch must be [B,d_z] matching the images")
    return decode(params, encode(params, xs), zs)


def forward(params: GeneratorParams, x, z) -> Tensor:
    """Single-image probability map [1,H,W]."""
    x, z = as_tensor(x), as_tensor(z)
    if x.ndim != 3:
        raise ShapeError(f"expected image [3,H,W], got {x.shape}")
    zb = reshape(z, (1, z.shape[0])) if z.ndim == 1 else z
    out = forward_batch(params, reshape(x, (1,) + x.shape), zb)
    return reshape(out, out.shape[1:])
