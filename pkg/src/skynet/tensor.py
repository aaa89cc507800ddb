"""Dense tensor operators for depthwise-separable detection networks.

All operators act on numpy arrays laid out channel-major: rank 3 means
(channels, height, width). Forward functions are pure and deterministic;
every differentiable operator has a matching vector-Jacobian product
reachable through :func:`backward`, and :func:`finite_diff_grad` provides
the independent numerical oracle used to check them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

Array = np.ndarray


def _as_chw(x, name: str = "x") -> Array:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be rank 3 (C,H,W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} extents must all be >= 1, got {x.shape}")
    return x


def _as_channel_vector(v, c: int, name: str) -> Array:
    v = np.asarray(v, dtype=np.result_type(v, np.float32))
    if v.ndim != 1 or v.shape[0] != c:
        raise ShapeError(f"{name} must have length {c}, got shape {v.shape}")
    return v


@dataclass
class ConvWeights:
    """Parameters attached to one layer: a depthwise kernel, a pointwise
    matrix, or a batch-norm parameter group. Unused fields stay None."""

    depthwise: Array | None = None   # (C, 3, 3)
    pointwise: Array | None = None   # (Cout, Cin)
    bn_gamma: Array | None = None
    bn_beta: Array | None = None
    bn_mean: Array | None = None
    bn_var: Array | None = None
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depthwise is not None:
            self.depthwise = np.asarray(self.depthwise)
            if self.depthwise.ndim != 3 or self.depthwise.shape[1:] != (3, 3):
                raise ShapeError(
                    f"depthwise kernel must be (C,3,3), got {self.depthwise.shape}"
                )
        if self.pointwise is not None:
            self.pointwise = np.asarray(self.pointwise)
            if self.pointwise.ndim != 2:
                raise ShapeError(
                    f"pointwise matrix must be (Cout,Cin), got {self.pointwise.shape}"
                )
        if self.bn_var is not None:
            self.bn_var = np.asarray(self.bn_var)
            if np.any(self.bn_var < 0):
                raise DomainError("bn_var entries must be >= 0")
        if self.bn_eps < 0:
            raise DomainError("bn_eps must be >= 0")

    def scalar_count(self) -> int:
        n = 0
        for a in (self.depthwise, self.pointwise, self.bn_gamma,
                  self.bn_beta, self.bn_mean, self.bn_var):
            if a is not None:
                n += int(np.asarray(a).size)
        return n


# ---------------------------------------------------------------------------
# forward operators
# ---------------------------------------------------------------------------

def dw_conv3(x, w) -> Array:
    """3x3 depthwise convolution, stride 1, zero padding 1, no bias.

    One 3x3 filter per channel; output spatial size equals the input's.
    """
    x = _as_chw(x)
    w = np.asarray(w)
    if w.ndim != 3 or w.shape[1:] != (3, 3):
        raise ShapeError(f"depthwise kernel must be (C,3,3), got {w.shape}")
    if w.shape[0] != x.shape[0]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[0]} channels, kernel has {w.shape[0]}"
        )
    c, h, wd = x.shape
    dtype = np.result_type(x, w)
    xp = np.zeros((c, h + 2, wd + 2), dtype=dtype)
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((c, h, wd), dtype=dtype)
    for u in range(3):
        for v in range(3):
            out += w[:, u, v][:, None, None] * xp[:, u:u + h, v:v + wd]
    return out


def pw_conv1(x, w) -> Array:
    """1x1 pointwise convolution: per-pixel channel mixing, no bias."""
    x = _as_chw(x)
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"pointwise matrix must be (Cout,Cin), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[0]} channels, matrix expects {w.shape[1]}"
        )
    return np.tensordot(w, x, axes=([1], [0]))


def batchnorm_infer(x, gamma, beta, mean, var, eps: float = 1e-5) -> Array:
    """Inference-mode batch normalization with fixed statistics."""
    x = _as_chw(x)
    c = x.shape[0]
    gamma = _as_channel_vector(gamma, c, "gamma")
    beta = _as_channel_vector(beta, c, "beta")
    mean = _as_channel_vector(mean, c, "mean")
    var = _as_channel_vector(var, c, "var")
    if np.any(var < 0):
        raise DomainError("var entries must be >= 0")
    if eps < 0:
        raise DomainError("eps must be >= 0")
    denom = var + eps
    if np.any(denom <= 0):
        raise DomainError("var + eps must be positive for every channel")
    scale = gamma / np.sqrt(denom)
    return scale[:, None, None] * (x - mean[:, None, None]) + beta[:, None, None]


def relu(x) -> Array:
    x = np.asarray(x)
    return np.maximum(x, 0)


def relu6(x) -> Array:
    """Clamp to [0, 6]."""
    x = np.asarray(x)
    return np.minimum(np.maximum(x, 0), 6)


def maxpool2(x) -> Array:
    """2x2 max pooling with stride 2. Requires even spatial extents."""
    x = _as_chw(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even H and W, got ({h},{w})")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2)
    return blocks.max(axis=(2, 4))


def space_to_depth(x) -> Array:
    """Move each 2x2 spatial block into 4 channels: (C,H,W) -> (4C,H/2,W/2).

    For block position (i,j), output channel 4c+k takes input element
    (2i + k//2, 2j + k%2) of channel c: row-major within the block.
    """
    x = _as_chw(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth requires even H and W, got ({h},{w})")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2)
    return blocks.transpose(0, 2, 4, 1, 3).reshape(4 * c, h // 2, w // 2)


def depth_to_space(x) -> Array:
    """Exact inverse of :func:`space_to_depth`: (4C,H,W) -> (C,2H,2W)."""
    x = _as_chw(x)
    c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"depth_to_space requires channels divisible by 4, got {c4}")
    c = c4 // 4
    blocks = x.reshape(c, 2, 2, h, w)
    return blocks.transpose(0, 3, 1, 4, 2).reshape(c, 2 * h, 2 * w)


def concat_channels(a, b) -> Array:
    """Stack b's channels after a's; spatial dims must agree."""
    a = _as_chw(a, "a")
    b = _as_chw(b, "b")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}"
        )
    return np.concatenate([a, b], axis=0)


# ---------------------------------------------------------------------------
# vector-Jacobian products
# ---------------------------------------------------------------------------

def _check_grad_shape(grad_out, shape, op_name: str) -> Array:
    g = np.asarray(grad_out)
    if g.shape != tuple(shape):
        raise ShapeError(
            f"{op_name}: grad_out shape {g.shape} does not match output shape {tuple(shape)}"
        )
    return g


def _vjp_dw_conv3(inputs, grad_out):
    x, w = (np.asarray(t) for t in inputs)
    g = _check_grad_shape(grad_out, x.shape, "dw_conv3")
    grad_x = dw_conv3(g, np.asarray(w)[:, ::-1, ::-1])
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2, wd + 2), dtype=np.result_type(x, g))
    xp[:, 1:-1, 1:-1] = x
    grad_w = np.empty((c, 3, 3), dtype=xp.dtype)
    for u in range(3):
        for v in range(3):
            grad_w[:, u, v] = np.sum(g * xp[:, u:u + h, v:v + wd], axis=(1, 2))
    return grad_x, grad_w


def _vjp_pw_conv1(inputs, grad_out):
    x, w = (np.asarray(t) for t in inputs)
    g = _check_grad_shape(grad_out, (w.shape[0],) + x.shape[1:], "pw_conv1")
    grad_x = np.tensordot(w.T, g, axes=([1], [0]))
    grad_w = np.tensordot(g, x, axes=([1, 2], [1, 2]))
    return grad_x, grad_w


def _vjp_batchnorm_infer(inputs, grad_out):
    x, gamma, beta, mean, var = (np.asarray(t) for t in inputs[:5])
    eps = inputs[5] if len(inputs) > 5 else 1e-5
    g = _check_grad_shape(grad_out, x.shape, "batchnorm_infer")
    inv_std = 1.0 / np.sqrt(var + eps)
    centered = x - mean[:, None, None]
    grad_x = (gamma * inv_std)[:, None, None] * g
    grad_gamma = np.sum(g * centered * inv_std[:, None, None], axis=(1, 2))
    grad_beta = np.sum(g, axis=(1, 2))
    grad_mean = -(gamma * inv_std) * np.sum(g, axis=(1, 2))
    grad_var = -0.5 * gamma * inv_std**3 * np.sum(g * centered, axis=(1, 2))
    return grad_x, grad_gamma, grad_beta, grad_mean, grad_var


def _vjp_relu(inputs, grad_out):
    x = np.asarray(inputs[0])
    g = _check_grad_shape(grad_out, x.shape, "relu")
    return (np.where(x > 0, g, 0.0),)


def _vjp_relu6(inputs, grad_out):
    # subgradient 0 at both kinks (x == 0 and x == 6)
    x = np.asarray(inputs[0])
    g = _check_grad_shape(grad_out, x.shape, "relu6")
    return (np.where((x > 0) & (x < 6), g, 0.0),)


def _vjp_maxpool2(inputs, grad_out):
    x = _as_chw(inputs[0])
    c, h, w = x.shape
    g = _check_grad_shape(grad_out, (c, h // 2, w // 2), "maxpool2")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    flat = blocks.reshape(c, h // 2, w // 2, 4)
    winner = flat.argmax(axis=-1)  # first max wins on ties
    grad_flat = np.zeros_like(flat, dtype=np.result_type(g, x))
    np.put_along_axis(grad_flat, winner[..., None], g[..., None], axis=-1)
    grad_x = grad_flat.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
    return (grad_x.reshape(c, h, w),)


def _vjp_space_to_depth(inputs, grad_out):
    x = _as_chw(inputs[0])
    c, h, w = x.shape
    g = _check_grad_shape(grad_out, (4 * c, h // 2, w // 2), "space_to_depth")
    return (depth_to_space(g),)


def _vjp_depth_to_space(inputs, grad_out):
    x = _as_chw(inputs[0])
    c4, h, w = x.shape
    g = _check_grad_shape(grad_out, (c4 // 4, 2 * h, 2 * w), "depth_to_space")
    return (space_to_depth(g),)


def _vjp_concat_channels(inputs, grad_out):
    a = _as_chw(inputs[0], "a")
    b = _as_chw(inputs[1], "b")
    g = _check_grad_shape(grad_out, (a.shape[0] + b.shape[0],) + a.shape[1:],
                          "concat_channels")
    return g[:a.shape[0]], g[a.shape[0]:]


_VJPS = {
    dw_conv3: _vjp_dw_conv3,
    pw_conv1: _vjp_pw_conv1,
    batchnorm_infer: _vjp_batchnorm_infer,
    relu: _vjp_relu,
    relu6: _vjp_relu6,
    maxpool2: _vjp_maxpool2,
    space_to_depth: _vjp_space_to_depth,
    depth_to_space: _vjp_depth_to_space,
    concat_channels: _vjp_concat_channels,
}


def backward(op, inputs, grad_out):
    """Vector-Jacobian product of ``op`` at ``inputs``.

    Returns one gradient per differentiable input, in the operator's
    argument order (batch-norm returns grads for x, gamma, beta, mean, var;
    eps is treated as a constant).
    """
    try:
        vjp = _VJPS[op]
    except KeyError:
        raise DomainError(f"no registered gradient for operator {op!r}") from None
    return vjp(tuple(inputs), grad_out)


def finite_diff_grad(f, x, h: float = 1e-5) -> Array:
    """Central-difference gradient of scalar-valued ``f`` at ``x``, per element."""
    if h <= 0:
        raise DomainError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return grad
