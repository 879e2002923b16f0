"""Hot numeric kernels: dense forward and fused forward/backward passes.

Both kernels exist in two lanes sharing one source body: a numba
``@njit``-compiled lane and a pure-numpy fallback. The lane is chosen at
import time; set ``FEDSIM_NUMBA=0`` to force the numpy fallback (the
fallback is also used automatically when numba is not importable).

Model parameters travel as one flat float64 vector. Layer ``i`` maps
``dims[i] -> dims[i+1]`` and owns the slice ``[off, off + dims[i]*dims[i+1]
+ dims[i+1])`` holding the weight matrix (row-major, input-major) followed
by the bias. Activation codes: 0 = identity, 1 = relu (subgradient 0 at 0).

All randomness lives outside these kernels, so both lanes consume identical
inputs and differ at most by floating-point summation order.
"""

import os

import numpy as np

ACT_IDENTITY = 0
ACT_RELU = 1


def layer_offset(dims, layer):
    """Start of layer `layer`'s parameter slice in the flat vector."""
    off = 0
    for i in range(layer):
        off += int(dims[i]) * int(dims[i + 1]) + int(dims[i + 1])
    return off


def _forward_impl(theta, dims, acts, x, lo, hi):
    # Runs layers [lo, hi) on x; x must have width dims[lo].
    off = 0
    for i in range(lo):
        off += dims[i] * dims[i + 1] + dims[i + 1]
    out = x
    for i in range(lo, hi):
        nin = dims[i]
        nout = dims[i + 1]
        w = theta[off:off + nin * nout].reshape(nin, nout)
        b = theta[off + nin * nout:off + nin * nout + nout]
        z = out @ w + b
        if acts[i] == ACT_RELU:
            z = np.maximum(z, 0.0)
        out = z
        off += nin * nout + nout
    return out


def _loss_grad_impl(theta, dims, acts, x, labels, lo, ret_layer):
    # Mean softmax cross-entropy over the batch plus its exact gradient.
    # Layers below `lo` are skipped entirely: their gradient block stays
    # zero and x is fed directly into layer `lo`. Also returns the
    # post-activation output of layer `ret_layer - 1` (== x for
    # ret_layer <= lo), so callers can grab the split feature for free.
    num_layers = dims.shape[0] - 1
    batch = x.shape[0]

    outs = [x]
    off = 0
    for i in range(lo):
        off += dims[i] * dims[i + 1] + dims[i + 1]
    for i in range(lo, num_layers):
        nin = dims[i]
        nout = dims[i + 1]
        w = theta[off:off + nin * nout].reshape(nin, nout)
        b = theta[off + nin * nout:off + nin * nout + nout]
        z = outs[-1] @ w + b
        if acts[i] == ACT_RELU:
            z = np.maximum(z, 0.0)
        outs.append(z)
        off += nin * nout + nout

    logits = outs[-1]
    num_classes = logits.shape[1]
    inv_b = 1.0 / batch

    loss = 0.0
    delta = np.empty_like(logits)
    for r in range(batch):
        m = logits[r, 0]
        for c in range(1, num_classes):
            if logits[r, c] > m:
                m = logits[r, c]
        s = 0.0
        for c in range(num_classes):
            e = np.exp(logits[r, c] - m)
            delta[r, c] = e
            s += e
        for c in range(num_classes):
            delta[r, c] = delta[r, c] / s * inv_b
        loss += (np.log(s) + m - logits[r, labels[r]]) * inv_b
        delta[r, labels[r]] -= inv_b

    grad = np.zeros(theta.shape[0])
    for i in range(num_layers - 1, lo - 1, -1):
        nin = dims[i]
        nout = dims[i + 1]
        off -= nin * nout + nout
        w = theta[off:off + nin * nout].reshape(nin, nout)
        a_prev = outs[i - lo]
        gw = a_prev.T @ delta
        grad[off:off + nin * nout] = gw.ravel()
        grad[off + nin * nout:off + nin * nout + nout] = np.sum(delta, 0)
        if i > lo:
            dprev = delta @ w.T
            if acts[i - 1] == ACT_RELU:
                dprev = np.where(a_prev > 0.0, dprev, 0.0)
            delta = dprev

    ret = ret_layer - lo
    if ret < 0:
        ret = 0
    return loss, grad, outs[ret]


def _env_wants_numba():
    flag = os.environ.get("FEDSIM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


BACKEND = "numpy"
if _env_wants_numba():
    try:
        from numba import njit

        forward = njit(cache=True)(_forward_impl)
        loss_grad = njit(cache=True)(_loss_grad_impl)
        BACKEND = "numba"
    except ImportError:
        pass

if BACKEND == "numpy":
    forward = _forward_impl
    loss_grad = _loss_grad_impl
