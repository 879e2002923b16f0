"""Dense split network: exact forward/backward with a low/high parameter cut.

A model is a stack of affine layers with relu or identity activations,
ending in logits consumed by softmax cross-entropy. ``split_index`` s cuts
the stack into a feature extractor (layers [0, s), parameter block "low")
and a classifier head (layers [s, L), block "high"). Parameters live in a
single flat float64 vector so that aggregation, divergence norms and
block-wise gradient algebra are plain vector arithmetic.

All operations are pure: they never mutate a model, and identical inputs
produce identical outputs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

ACTIVATIONS = {"identity": _kernels.ACT_IDENTITY, "relu": _kernels.ACT_RELU}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}


class ShapeError(ValueError):
    """Input/parameter dimensions do not compose."""


class LabelError(ValueError):
    """A class label is outside [0, num_classes)."""


def as_tensor(values, shape=None, checked=True):
    """Validate and return a float64 array.

    If `shape` is given, `values` must hold exactly prod(shape) entries and
    is reshaped row-major. With `checked`, non-finite entries are rejected.
    """
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative extent in shape {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _as_batch(x, width, what="input"):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{what} must be a 2-D batch, got ndim={x.ndim}")
    if x.shape[0] == 0:
        raise ShapeError(f"{what} batch is empty")
    if x.shape[1] != width:
        raise ShapeError(f"{what} width {x.shape[1]} != expected {width}")
    return x


def _as_labels(y, num_classes):
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.ndim != 1:
        raise LabelError("labels must be a 1-D vector")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return y


@dataclass(eq=False)
class SplitModel:
    """Flat-parameter dense network cut at ``split_index``."""

    dims: np.ndarray          # layer widths, length L+1
    activations: np.ndarray   # per-layer activation codes, length L
    theta: np.ndarray         # flat parameters, length d
    split_index: int

    def __post_init__(self):
        self.dims = np.ascontiguousarray(self.dims, dtype=np.int64)
        self.activations = np.ascontiguousarray(self.activations, dtype=np.int64)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.dims.ndim != 1 or self.dims.size < 2:
            raise ShapeError("dims must list at least input and output widths")
        if np.any(self.dims <= 0):
            raise ShapeError("all layer widths must be positive")
        if self.activations.shape != (self.num_layers,):
            raise ShapeError("need one activation code per layer")
        if not 0 < self.split_index < self.num_layers:
            raise ShapeError(
                f"split_index must satisfy 0 < s < {self.num_layers}, got {self.split_index}"
            )
        if self.theta.shape != (self.num_params,):
            raise ShapeError(
                f"theta has {self.theta.size} entries, model needs {self.num_params}"
            )

    @property
    def num_layers(self):
        return self.dims.size - 1

    @property
    def in_dim(self):
        return int(self.dims[0])

    @property
    def num_classes(self):
        return int(self.dims[-1])

    @property
    def feature_dim(self):
        """Width of the split-layer output h."""
        return int(self.dims[self.split_index])

    @property
    def num_params(self):
        return _kernels.layer_offset(self.dims, self.num_layers)

    @property
    def num_params_low(self):
        return _kernels.layer_offset(self.dims, self.split_index)

    @property
    def num_params_high(self):
        return self.num_params - self.num_params_low

    def layer_slice(self, i):
        """(weight_slice, bias_slice) into theta for layer i."""
        off = _kernels.layer_offset(self.dims, i)
        nw = int(self.dims[i] * self.dims[i + 1])
        nb = int(self.dims[i + 1])
        return slice(off, off + nw), slice(off + nw, off + nw + nb)

    def weight(self, i):
        ws, _ = self.layer_slice(i)
        return self.theta[ws].reshape(int(self.dims[i]), int(self.dims[i + 1]))

    def bias(self, i):
        _, bs = self.layer_slice(i)
        return self.theta[bs]

    @property
    def layers(self):
        """Read-only view as [(weight, bias, activation_name), ...]."""
        return [
            (self.weight(i), self.bias(i), _ACT_NAMES[int(self.activations[i])])
            for i in range(self.num_layers)
        ]

    def with_theta(self, theta):
        return SplitModel(self.dims, self.activations, theta, self.split_index)

    def copy(self):
        return self.with_theta(self.theta.copy())

    @classmethod
    def init(cls, layer_sizes, split_index, seed, hidden_activation="relu"):
        """Seeded init: every layer parameter uniform in +-1/sqrt(in_dim).

        Hidden layers use `hidden_activation`; the final layer is identity
        (it emits logits).
        """
        dims = np.asarray(layer_sizes, dtype=np.int64)
        num_layers = dims.size - 1
        code = ACTIVATIONS[hidden_activation]
        acts = np.full(num_layers, code, dtype=np.int64)
        acts[-1] = _kernels.ACT_IDENTITY
        rng = np.random.default_rng([int(seed)])
        parts = []
        for i in range(num_layers):
            bound = 1.0 / np.sqrt(float(dims[i]))
            n = int(dims[i] * dims[i + 1] + dims[i + 1])
            parts.append(rng.uniform(-bound, bound, size=n))
        return cls(dims, acts, np.concatenate(parts), split_index)

    @classmethod
    def from_layers(cls, layers, split_index):
        """Build from explicit [(weight, bias, activation_name), ...]."""
        dims = []
        acts = []
        parts = []
        for k, (w, b, act) in enumerate(layers):
            w = as_tensor(w)
            b = as_tensor(b)
            if w.ndim != 2 or b.ndim != 1 or b.size != w.shape[1]:
                raise ShapeError(f"layer {k}: weight must be 2-D with matching bias")
            if dims and dims[-1] != w.shape[0]:
                raise ShapeError(
                    f"layer {k}: in_dim {w.shape[0]} != previous out_dim {dims[-1]}"
                )
            if not dims:
                dims.append(w.shape[0])
            dims.append(w.shape[1])
            acts.append(ACTIVATIONS[act])
            parts.append(w.ravel())
            parts.append(b)
        return cls(
            np.asarray(dims, dtype=np.int64),
            np.asarray(acts, dtype=np.int64),
            np.concatenate(parts),
            split_index,
        )


@dataclass
class GradientVector:
    """Flat gradient split into the model's low/high parameter blocks."""

    flat: np.ndarray
    d_low: int

    @property
    def low(self):
        return self.flat[:self.d_low]

    @property
    def high(self):
        return self.flat[self.d_low:]

    @classmethod
    def from_blocks(cls, low, high):
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        return cls(np.concatenate([low, high]), low.size)

    def check_model(self, model):
        if self.d_low != model.num_params_low or self.flat.size != model.num_params:
            raise ShapeError("gradient blocks do not match the model partition")


def forward_full(model, x):
    """Run the whole stack; returns (h, logits) with h the split feature."""
    x = _as_batch(x, model.in_dim)
    h = _kernels.forward(model.theta, model.dims, model.activations, x, 0, model.split_index)
    logits = _kernels.forward(
        model.theta, model.dims, model.activations, h, model.split_index, model.num_layers
    )
    return h, logits


def forward_high(model, h):
    """Run only the classifier head on split-layer features."""
    h = _as_batch(h, model.feature_dim, what="feature")
    return _kernels.forward(
        model.theta, model.dims, model.activations, h, model.split_index, model.num_layers
    )


def loss_and_grad(model, inputs, labels, entry="raw"):
    """Mean softmax cross-entropy and its exact gradient.

    entry="raw" feeds `inputs` at layer 0 and returns the full gradient;
    entry="feature" feeds split-layer features into the classifier head,
    so the low block of the returned gradient is exactly zero.
    """
    loss, grad, _ = _loss_grad_feature(model, inputs, labels, entry)
    return loss, grad


def _loss_grad_feature(model, inputs, labels, entry="raw"):
    """loss_and_grad that also returns the split feature h of the batch."""
    if entry == "raw":
        lo = 0
        x = _as_batch(inputs, model.in_dim)
    elif entry == "feature":
        lo = model.split_index
        x = _as_batch(inputs, model.feature_dim, what="feature")
    else:
        raise ValueError(f"unknown entry {entry!r}")
    y = _as_labels(labels, model.num_classes)
    if y.size != x.shape[0]:
        raise ShapeError("labels and batch rows disagree")
    loss, grad, h = _kernels.loss_grad(
        model.theta, model.dims, model.activations, x, y, lo, model.split_index
    )
    return float(loss), GradientVector(grad, model.num_params_low), h


def apply_update(model, grad, lr):
    """One SGD step: theta <- theta - lr * grad (both blocks)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    grad.check_model(model)
    return model.with_theta(model.theta - lr * grad.flat)
