"""Pure-numpy volume<->column kernels (fallback backend).

Both backends expose the same two primitives over padded 5-D volumes
[N, C, D, H, W]:

  vol2col  - gather sliding kernel windows into a column matrix
             [N*oD*oH*oW, C*kD*kH*kW] (position-major) ready for one
             channel GEMM
  col2vol  - the adjoint scatter-add of vol2col

All convolution maths (forward, input gradient, kernel gradient,
transposed convolution) reduces to these two plus matmul.
"""

import numpy as np

BACKEND = "python"


def out_extent(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def vol2col(x: np.ndarray, kdhw, stride) -> np.ndarray:
    n, c, d, h, w = x.shape
    kd, kh, kw = kdhw
    sd, sh, sw = stride
    od, oh, ow = out_extent(d, kd, sd), out_extent(h, kh, sh), out_extent(w, kw, sw)
    xs = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, od, oh, ow, c, kd, kh, kw),
        strides=(xs[0], xs[2] * sd, xs[3] * sh, xs[4] * sw, xs[1], xs[2], xs[3], xs[4]),
        writeable=False,
    )
    return patches.reshape(n * od * oh * ow, c * kd * kh * kw).copy()


def col2vol(cols: np.ndarray, vol_shape, kdhw, stride) -> np.ndarray:
    n, c, d, h, w = vol_shape
    kd, kh, kw = kdhw
    sd, sh, sw = stride
    od, oh, ow = out_extent(d, kd, sd), out_extent(h, kh, sh), out_extent(w, kw, sw)
    out = np.zeros(vol_shape, dtype=cols.dtype)
    split = cols.reshape(n, od, oh, ow, c, kd, kh, kw)
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                piece = np.moveaxis(split[:, :, :, :, :, dz, dy, dx], 4, 1)
                out[
                    :,
                    :,
                    dz : dz + od * sd : sd,
                    dy : dy + oh * sh : sh,
                    dx : dx + ow * sw : sw,
                ] += piece
    return out
