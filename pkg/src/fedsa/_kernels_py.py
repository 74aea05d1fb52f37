"""Pure numpy implementations of the convolution kernels.

Layouts: images are NHWC, kernels are (kh, kw, c_in, c_out). Stride 1,
zero padding of ``kh // 2`` / ``kw // 2`` so spatial size is preserved.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, kh, kw):
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (n, h, w, c, kh, kw) -> (n, h, w, kh, kw, c)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)


def conv2d_forward(x, w):
    n, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    if kh == 1 and kw == 1:
        return (x.reshape(-1, cin) @ w.reshape(cin, cout)).reshape(n, h, wd, cout)
    cols = _im2col(x, kh, kw)
    return (cols @ w.reshape(-1, cout)).reshape(n, h, wd, cout)


def conv2d_backward_input(dout, w):
    n, h, wd, cout = dout.shape
    kh, kw, cin, _ = w.shape
    if kh == 1 and kw == 1:
        return (dout.reshape(-1, cout) @ w.reshape(cin, cout).T).reshape(n, h, wd, cin)
    ph, pw = kh // 2, kw // 2
    dcols = (dout.reshape(-1, cout) @ w.reshape(-1, cout).T).reshape(n, h, wd, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, ph:ph + h, pw:pw + wd, :]


def conv2d_backward_weight(x, dout, kshape):
    kh, kw, cin, cout = kshape
    if kh == 1 and kw == 1:
        return (x.reshape(-1, cin).T @ dout.reshape(-1, cout)).reshape(kshape)
    cols = _im2col(x, kh, kw)
    return (cols.T @ dout.reshape(-1, cout)).reshape(kshape)
