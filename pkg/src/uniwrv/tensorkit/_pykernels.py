"""Pure-numpy bilinear sampling kernels (fallback for the compiled module).

Layout: ``x`` is (B, H, W, C), ``coords`` is (B, N, 2) holding (row, col)
positions in pixel units. Neighbours outside the grid read as zero.
"""

import numpy as np


def _corners(coords, H, W):
    r = coords[..., 0]
    c = coords[..., 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        flat = np.where(valid, rr * W + cc, 0)
        out.append((flat, valid))
    return fr, fc, out


def _gather(x, flat, valid):
    B, H, W, C = x.shape
    xf = x.reshape(B, H * W, C)
    v = np.take_along_axis(xf, flat[..., None], axis=1)
    return v * valid[..., None]


def grid_sample_forward(x, coords):
    B, H, W, C = x.shape
    fr, fc, corners = _corners(coords, H, W)
    v00, v01, v10, v11 = (_gather(x, f, m) for f, m in corners)
    fr = fr[..., None]
    fc = fc[..., None]
    return (1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01 + fr * (1 - fc) * v10 + fr * fc * v11


def grid_sample_backward(x, coords, gout, need_x=True, need_coords=True):
    B, H, W, C = x.shape
    fr, fc, corners = _corners(coords, H, W)
    gx = gcoords = None
    if need_x:
        gx = np.zeros((B, H * W, C), dtype=x.dtype)
        weights = ((1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc)
        boff = (np.arange(B) * H * W)[:, None]
        gflat = gx.reshape(B * H * W, C)
        for (flat, valid), w in zip(corners, weights):
            contrib = gout * (w * valid)[..., None]
            idx = (flat + boff).ravel()
            np.add.at(gflat, idx, contrib.reshape(-1, C))
        gx = gx.reshape(B, H, W, C)
    if need_coords:
        v00, v01, v10, v11 = (_gather(x, f, m) for f, m in corners)
        fr_ = fr[..., None]
        fc_ = fc[..., None]
        dr = (1 - fc_) * (v10 - v00) + fc_ * (v11 - v01)
        dc = (1 - fr_) * (v01 - v00) + fr_ * (v11 - v10)
        gcoords = np.stack([(gout * dr).sum(-1), (gout * dc).sum(-1)], axis=-1)
    return gx, gcoords
