"""
Minimal reverse-mode differentiation for the detection networks.

A Tensor wraps a float64 numpy array. Every op below returns a new Tensor that
remembers its parents and a backward rule mapping the output gradient to one
gradient per parent. backward(loss) walks the graph in reverse topological order.

Gradients propagate through a private table for each backward call, then get
added to every visited node's .grad. Leaves (parameters) therefore accumulate
across calls, and calling backward on two different losses over the same graph
gives the per-loss gradients whose sum equals backward on the summed loss.

Layouts: feature maps are (channels, height, width); conv weights are
(out, in, k, k); fully connected weights are (in, out).
"""

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from collabdet.errors import InvalidInputError
from collabdet.geometry import as_box_array

logger = logging.getLogger(__name__)


class Tensor:
    """
    A node in the computation graph.

    Attributes:
        values (np.ndarray): float64 values.
        grad (np.ndarray): accumulated gradient, same shape as values.
        parents (tuple): input tensors this node was computed from.
        backward_fn (callable): maps the output gradient to a tuple of parent gradients.
        requires_grad (bool): True for parameters and anything computed from them.
        name (str): optional, set for registry parameters.
    """

    # numpy arrays on the left of an operator defer to the reflected Tensor op
    __array_ufunc__ = None

    def __init__(self, values, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        tracked = tuple(p for p in parents if p.requires_grad)
        self.requires_grad = bool(requires_grad or tracked)
        self.parents = tuple(parents) if tracked else ()
        self.backward_fn = backward_fn if tracked else None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def detach(self):
        """Same values, cut from the graph."""
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __len__(self):
        return self.values.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(values, name=None):
    """A trainable leaf."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.values + b.values, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.values - b.values, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor(a.values * b.values, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * a.values / (b.values ** 2), b.shape))

    return Tensor(a.values / b.values, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor(a.values @ b.values, (a, b), backward)


def tensor_sum(x, axis=None):
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(x.values.sum(axis=axis), (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor(x.values.reshape(shape), (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor(x.values.transpose(axes), (x,), backward)


def take(x, key):
    """Numpy-style indexing; the backward scatters with np.add.at."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.values)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(x.values[key], (x,), backward)


def log(x):
    x = as_tensor(x)

    def backward(g):
        return (g / x.values,)

    return Tensor(np.log(x.values), (x,), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.values)

    def backward(g):
        return (g * out,)

    return Tensor(out, (x,), backward)


def clamp(x, low=None, high=None):
    """Clip values; the gradient is zero where a bound is active."""
    x = as_tensor(x)
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    passed = (x.values >= lo) & (x.values <= hi)

    def backward(g):
        return (g * passed,)

    return Tensor(np.clip(x.values, lo, hi), (x,), backward)


def relu(x):
    x = as_tensor(x)
    active = x.values > 0

    def backward(g):
        return (g * active,)

    return Tensor(np.where(active, x.values, 0.0), (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.values))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (x,), backward)


def softmax(x, axis=-1):
    """Softmax with max-subtraction; slices along axis sum to 1."""
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (x,), backward)


def smooth_l1(x):
    """Elementwise 0.5 x^2 when |x| < 1, |x| - 0.5 otherwise."""
    x = as_tensor(x)
    small = np.abs(x.values) < 1.0
    out = np.where(small, 0.5 * x.values ** 2, np.abs(x.values) - 0.5)

    def backward(g):
        return (g * np.where(small, x.values, np.sign(x.values)),)

    return Tensor(out, (x,), backward)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def fully_connected(x, weight, bias):
    """x (N, in) @ weight (in, out) + bias (out,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidInputError(f"fully_connected shape mismatch: {x.shape} x {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise InvalidInputError(f"fully_connected bias shape {bias.shape} != ({weight.shape[1]},)")

    def backward(g):
        return g @ weight.values.T, x.values.T @ g, g.sum(axis=0)

    return Tensor(x.values @ weight.values + bias.values, (x, weight, bias), backward)


def conv2d(x, weight, bias, padding="same"):
    """
    Stride-1 convolution of a (C, H, W) map with (O, C, k, k) kernels.

    padding is "same" (zero padding k // 2, odd k) or "valid" (no padding).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise InvalidInputError(f"conv2d shape mismatch: input {x.shape}, kernel {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise InvalidInputError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
    out_channels, in_channels, k, k2 = weight.shape
    if k != k2:
        raise InvalidInputError("conv2d kernels must be square")
    if padding == "same":
        if k % 2 == 0:
            raise InvalidInputError("same padding needs an odd kernel size")
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise InvalidInputError(f"Unknown padding {padding!r}")
    xp = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad)))
    if xp.shape[1] < k or xp.shape[2] < k:
        raise InvalidInputError(f"conv2d input {x.shape} smaller than kernel {k}")
    # windows: (C, Ho, Wo, k, k) -> columns (Ho * Wo, C * k * k)
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))
    _, out_h, out_w, _, _ = windows.shape
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, in_channels * k * k)
    w_mat = weight.values.reshape(out_channels, -1)
    out = (cols @ w_mat.T + bias.values).T.reshape(out_channels, out_h, out_w)

    def backward(g):
        g_mat = g.reshape(out_channels, out_h * out_w)
        grad_w = (g_mat @ cols).reshape(weight.shape)
        grad_b = g_mat.sum(axis=1)
        dcols = (g_mat.T @ w_mat).reshape(out_h, out_w, in_channels, k, k)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + out_h, dj:dj + out_w] += dcols[:, :, :, di, dj].transpose(2, 0, 1)
        grad_x = dxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]]
        return grad_x, grad_w, grad_b

    return Tensor(out, (x, weight, bias), backward)


def max_pool(x, size=2):
    """Non-overlapping size x size max pooling of a (C, H, W) map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise InvalidInputError(f"max_pool expects (C, H, W), got {x.shape}")
    channels, height, width = x.shape
    if height % size or width % size:
        raise InvalidInputError(f"max_pool needs H and W divisible by {size}, got {x.shape}")
    out_h, out_w = height // size, width // size
    blocks = (x.values.reshape(channels, out_h, size, out_w, size)
              .transpose(0, 1, 3, 2, 4).reshape(channels, out_h, out_w, size * size))
    winner = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, winner[..., None], axis=3)[..., 0]

    def backward(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, winner[..., None], g[..., None], axis=3)
        grad = (grad_blocks.reshape(channels, out_h, out_w, size, size)
                .transpose(0, 1, 3, 2, 4).reshape(channels, height, width))
        return (grad,)

    return Tensor(out, (x,), backward)


def _bin_edges(start, stop, bins):
    """Split the cell range [start, stop) into bins; an empty bin takes its nearest cell."""
    count = stop - start
    edges = []
    for b in range(bins):
        lo = start + (b * count) // bins
        hi = start + -((-(b + 1) * count) // bins)
        if hi <= lo:
            lo = min(lo, stop - 1)
            hi = lo + 1
        edges.append((lo, hi))
    return edges


def roi_pool(features, boxes, bins=(2, 2), spatial_scale=1.0):
    """
    Max-pool each box's window of a (C, H, W) feature map into a fixed grid.

    Box coordinates are in image pixels and are multiplied by spatial_scale to
    land on the feature map, where cell (r, c) covers [c, c + 1) x [r, r + 1).

    Returns:
        Tensor: (N, C, bins_h, bins_w).
    """
    features = as_tensor(features)
    if features.ndim != 3:
        raise InvalidInputError(f"roi_pool expects (C, H, W) features, got {features.shape}")
    channels, height, width = features.shape
    bins_h, bins_w = bins
    arr = as_box_array(boxes)
    flat = features.values.reshape(channels, height * width)
    positions = np.zeros((len(arr), channels, bins_h, bins_w), dtype=np.int64)
    for n, (x1, y1, x2, y2) in enumerate(arr * spatial_scale):
        c0 = max(int(np.floor(x1)), 0)
        c1 = min(int(np.ceil(x2)), width)
        r0 = max(int(np.floor(y1)), 0)
        r1 = min(int(np.ceil(y2)), height)
        if c1 <= c0 or r1 <= r0:
            raise InvalidInputError(f"Box {arr[n].tolist()} lies outside the feature map")
        for bi, (ra, rb) in enumerate(_bin_edges(r0, r1, bins_h)):
            for bj, (ca, cb) in enumerate(_bin_edges(c0, c1, bins_w)):
                window = features.values[:, ra:rb, ca:cb].reshape(channels, -1)
                best = window.argmax(axis=1)
                positions[n, :, bi, bj] = (ra + best // (cb - ca)) * width + ca + best % (cb - ca)
    channel_index = np.broadcast_to(np.arange(channels)[None, :, None, None], positions.shape)
    out = flat[channel_index, positions]

    def backward(g):
        grad = np.zeros_like(flat)
        np.add.at(grad, (channel_index, positions), g)
        return (grad.reshape(features.shape),)

    return Tensor(out, (features,), backward)


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate d(loss)/d(node) into .grad of every node reachable from loss.

    Parameters that do not feed the loss are left untouched, so after
    ParameterRegistry.zero_grad() they read zero.
    """
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def reachable_parameters(loss):
    """Names of the named leaves the loss depends on."""
    return {node.name for node in _topological_order(loss)
            if node.name is not None and not node.parents}


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(fn, params, epsilon=1e-5, max_coords=20, rng=None, floor=1e-6):
    """
    Compare analytic gradients with central differences.

    Args:
        fn (callable): no-argument function returning a scalar Tensor built from params.
        params (list[Tensor]): leaves to perturb in place.
        epsilon (float): finite-difference step.
        max_coords (int): coordinates sampled per parameter (all when fewer).
        rng (np.random.Generator): coordinate sampler, default seed 0.
        floor (float): lower bound of the relative-error denominator.

    Returns:
        float: max |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat_count = p.values.size
        if flat_count <= max_coords:
            coords = np.arange(flat_count)
        else:
            coords = rng.choice(flat_count, size=max_coords, replace=False)
        flat = p.values.reshape(-1)
        for index in coords:
            original = flat[index]
            flat[index] = original + epsilon
            plus = fn().item()
            flat[index] = original - epsilon
            minus = fn().item()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            exact = grad.reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
    for p in params:
        p.zero_grad()
    logger.debug(f"grad_check over {len(params)} tensors: max relative error {worst:.3e}")
    return worst
