"""Differentiable building blocks with explicit forward caches.

Every layer exposes ``forward(...) -> (y, cache)`` and
``backward(grad_out, cache) -> (grad_in, param_grads)`` where
``param_grads`` is a dict keyed like ``params()``.  Backward must
receive the cache produced by the matching forward call; shape
mismatches raise :class:`ContractError`.

Forward and backward are pure given (params, input, cache, rng): layers
hold parameters only, never activations, so a layer in eval mode can be
shared across threads.

Conventions fixed here:

* normalization divides by sqrt(population variance + eps), with eps
  inside the root;
* the ReLU gradient at exactly 0 is 0;
* dropout is inverted (train-time scaling by 1/(1-p)), eval is identity.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError, DomainError, ShapeError

TRAIN = "train"
EVAL = "eval"


def _check_grad_shape(layer, grad_out, expected_shape):
    if grad_out.shape != expected_shape:
        raise ContractError(
            f"{layer}: grad shape {grad_out.shape} does not match the "
            f"forward output shape {expected_shape}; stale or foreign cache?"
        )


class Linear:
    """Affine map y = x W + b.

    ``weight`` is stored input-major with shape (in_dim, out_dim), i.e.
    the transpose of the conventional (out, in) layout, so the forward
    GEMM runs on contiguous operands.  A stacked layer carries one extra
    leading lane axis on every parameter (weight (R, in, out), bias
    (R, 1, out)) and maps (R, N, in) inputs lane by lane; lanes never
    mix.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight)
        bias = np.asarray(bias, dtype=weight.dtype)
        ok = (weight.ndim == 2 and bias.shape == (weight.shape[1],)) or (
            weight.ndim == 3 and bias.shape == (weight.shape[0], 1, weight.shape[2])
        )
        if not ok:
            raise ShapeError(
                f"Linear expects weight (in, out) with bias (out,), or stacked "
                f"(R, in, out) with (R, 1, out); got {weight.shape} and {bias.shape}"
            )
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng, in_dim: int, out_dim: int, dtype=np.float64) -> "Linear":
        """Fan-in-scaled uniform init (suits the ReLU blocks); zero bias."""
        bound = float(np.sqrt(6.0 / in_dim))
        weight = rng.uniform((in_dim, out_dim), -bound, bound, dtype=np.float64)
        return cls(weight.astype(dtype), np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self):
        return self.weight.shape[-2]

    @property
    def out_dim(self):
        return self.weight.shape[-1]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.ndim != self.weight.ndim or x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"Linear({self.in_dim}->{self.out_dim}) with weight "
                f"{self.weight.shape} got input {x.shape}"
            )
        if x.ndim == 2:
            y = x @ self.weight
            y += self.bias
            return y, x
        if self._lane_loop(x):
            # per-lane 2-D GEMMs beat numpy's batched matmul for real work
            y = np.empty(x.shape[:-1] + (self.out_dim,), dtype=x.dtype)
            for r in range(x.shape[0]):
                np.matmul(x[r], self.weight[r], out=y[r])
        else:
            y = x @ self.weight
        y += self.bias
        return y, x

    def _lane_loop(self, x):
        return x.shape[-2] * self.in_dim * self.out_dim >= 32768

    def backward(self, grad_out, cache):
        x = cache
        _check_grad_shape("Linear", grad_out, x.shape[:-1] + (self.out_dim,))
        if x.ndim == 2:
            grad_in = grad_out @ self.weight.T
            grad_w = x.T @ grad_out
            grad_b = np.add.reduce(grad_out, 0)
            return grad_in, {"weight": grad_w, "bias": grad_b}
        if self._lane_loop(x):
            grad_in = np.empty_like(x)
            grad_w = np.empty_like(self.weight)
            for r in range(x.shape[0]):
                np.matmul(grad_out[r], self.weight[r].T, out=grad_in[r])
                np.matmul(x[r].T, grad_out[r], out=grad_w[r])
        else:
            grad_in = grad_out @ self.weight.swapaxes(-1, -2)
            grad_w = x.swapaxes(-1, -2) @ grad_out
        grad_b = np.add.reduce(grad_out, -2).reshape(self.bias.shape)
        return grad_in, {"weight": grad_w, "bias": grad_b}


class ReLU:
    def params(self):
        return {}

    def forward(self, x):
        # keep is False where the input is <= 0, so the gradient at the
        # kink (input exactly 0) is 0.
        keep = x > 0
        return x * keep, keep

    def backward(self, grad_out, cache):
        keep = cache
        _check_grad_shape("ReLU", grad_out, keep.shape)
        return grad_out * keep, {}


class Dropout:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise DomainError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)

    def params(self):
        return {}

    def forward(self, x, mode, rng):
        if mode == EVAL or self.p == 0.0:
            return x, (mode, None)
        if rng is None:
            raise ContractError("Dropout in train mode needs an rng stream")
        u = rng.uniform(x.shape, dtype=x.dtype)
        # mask holds 0 or 1/(1-p), so forward and backward are one multiply
        mask = (u >= x.dtype.type(self.p)).astype(x.dtype)
        mask *= x.dtype.type(1.0 / (1.0 - self.p))
        return x * mask, (mode, mask)

    def apply_mask(self, x, cache):
        """Re-apply a previously drawn mask (fixed-noise replay)."""
        mode, mask = cache
        if mode == EVAL or mask is None:
            return x, cache
        if mask.shape != x.shape:
            raise ContractError(
                f"Dropout mask shape {mask.shape} does not match input {x.shape}"
            )
        return x * mask, cache

    def backward(self, grad_out, cache):
        mode, mask = cache
        if mode == EVAL or mask is None:
            return grad_out, {}
        _check_grad_shape("Dropout", grad_out, mask.shape)
        return grad_out * mask, {}


def _check_norm_params(kind, gamma, beta):
    ok = gamma.ndim == 1 or (gamma.ndim == 3 and gamma.shape[1] == 1)
    if gamma.shape != beta.shape or not ok:
        raise ShapeError(
            f"{kind} gamma/beta must be equal-length vectors (C,) or stacked "
            f"(R, 1, C), got {gamma.shape} and {beta.shape}"
        )


class LayerNorm:
    """Per-row normalization over all channels, with learnable gamma/beta.

    Rows are the last axis; any leading axes (batch, stacked lanes) are
    normalized independently.
    """

    def __init__(self, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
        gamma = np.asarray(gamma)
        beta = np.asarray(beta, dtype=gamma.dtype)
        _check_norm_params("LayerNorm", gamma, beta)
        if eps < 0:
            raise DomainError(f"eps must be >= 0, got {eps}")
        self.gamma = gamma
        self.beta = beta
        self.eps = float(eps)

    @classmethod
    def create(cls, dim: int, eps: float = 1e-5, dtype=np.float64) -> "LayerNorm":
        return cls(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype), eps)

    @property
    def dim(self):
        return self.gamma.shape[-1]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _normalize(self, x):
        inv_c = x.dtype.type(1.0 / x.shape[-1])
        mean = np.add.reduce(x, -1, keepdims=True)
        mean *= inv_c
        xhat = x - mean
        var = np.add.reduce(xhat * xhat, -1, keepdims=True)
        var *= inv_c
        var += x.dtype.type(self.eps)
        inv_std = np.sqrt(var, out=var)
        np.divide(1.0, inv_std, out=inv_std)
        xhat *= inv_std
        return xhat, inv_std

    def forward(self, x):
        if x.ndim < 2 or x.shape[-1] != self.dim:
            raise ShapeError(f"LayerNorm({self.dim}) got input {x.shape}")
        xhat, inv_std = self._normalize(x)
        y = xhat * self.gamma
        y += self.beta
        return y, (xhat, inv_std)

    def backward(self, grad_out, cache):
        xhat, inv_std = cache
        _check_grad_shape("LayerNorm", grad_out, xhat.shape)
        inv_c = xhat.dtype.type(1.0 / xhat.shape[-1])
        grad_gamma = np.add.reduce(grad_out * xhat, -2).reshape(self.gamma.shape)
        grad_beta = np.add.reduce(grad_out, -2).reshape(self.beta.shape)
        gx = grad_out * self.gamma
        mean_gx = np.add.reduce(gx, -1, keepdims=True)
        mean_gx *= inv_c
        mean_gx_xhat = np.add.reduce(gx * xhat, -1, keepdims=True)
        mean_gx_xhat *= inv_c
        gx -= mean_gx
        gx -= xhat * mean_gx_xhat
        gx *= inv_std
        return gx, {"gamma": grad_gamma, "beta": grad_beta}


class GroupNorm:
    """Per-row normalization within contiguous channel groups.

    Channel k belongs to group floor(k / (C / G)).  With num_groups == 1
    this is exactly LayerNorm.
    """

    def __init__(self, gamma, beta, eps: float = 1e-5, num_groups: int = 2):
        gamma = np.asarray(gamma)
        beta = np.asarray(beta, dtype=gamma.dtype)
        _check_norm_params("GroupNorm", gamma, beta)
        if eps < 0:
            raise DomainError(f"eps must be >= 0, got {eps}")
        if num_groups < 1 or gamma.shape[-1] % num_groups != 0:
            raise ConfigError(
                f"channel count {gamma.shape[-1]} is not divisible into "
                f"{num_groups} groups"
            )
        self.gamma = gamma
        self.beta = beta
        self.eps = float(eps)
        self.num_groups = int(num_groups)

    @classmethod
    def create(cls, dim, eps=1e-5, num_groups=2, dtype=np.float64) -> "GroupNorm":
        return cls(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype), eps, num_groups)

    @property
    def dim(self):
        return self.gamma.shape[-1]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x):
        if x.ndim < 2 or x.shape[-1] != self.dim:
            raise ShapeError(f"GroupNorm({self.dim}) got input {x.shape}")
        shape = x.shape
        grouped = x.reshape(shape[:-1] + (self.num_groups, -1))
        inv_m = x.dtype.type(self.num_groups / self.dim)
        mean = np.add.reduce(grouped, -1, keepdims=True)
        mean *= inv_m
        xhat = grouped - mean
        var = np.add.reduce(xhat * xhat, -1, keepdims=True)
        var *= inv_m
        var += x.dtype.type(self.eps)
        inv_std = np.sqrt(var, out=var)
        np.divide(1.0, inv_std, out=inv_std)
        xhat *= inv_std
        xhat = xhat.reshape(shape)
        y = xhat * self.gamma
        y += self.beta
        return y, (xhat, inv_std)

    def backward(self, grad_out, cache):
        xhat, inv_std = cache
        _check_grad_shape("GroupNorm", grad_out, xhat.shape)
        shape = xhat.shape
        inv_m = xhat.dtype.type(self.num_groups / self.dim)
        grad_gamma = np.add.reduce(grad_out * xhat, -2).reshape(self.gamma.shape)
        grad_beta = np.add.reduce(grad_out, -2).reshape(self.beta.shape)
        gx = (grad_out * self.gamma).reshape(shape[:-1] + (self.num_groups, -1))
        xhat_g = xhat.reshape(gx.shape)
        mean_gx = np.add.reduce(gx, -1, keepdims=True)
        mean_gx *= inv_m
        mean_gx_xhat = np.add.reduce(gx * xhat_g, -1, keepdims=True)
        mean_gx_xhat *= inv_m
        gx -= mean_gx
        gx -= xhat_g * mean_gx_xhat
        gx *= inv_std
        return gx.reshape(shape), {"gamma": grad_gamma, "beta": grad_beta}


class ZScoreAlign:
    """Map each row of x to a target mean/std using the row's own moments.

    y_i = target_std_i * (x_i - mean(x_i)) / std(x_i) + target_mean_i

    std is the population standard deviation of the row itself (no eps);
    a constant row cannot be aligned and raises
    :class:`DegenerateInputError`.  The transform has no learnable
    parameters but does have a Jacobian with respect to x and both
    targets.
    """

    def params(self):
        return {}

    @staticmethod
    def _target(name, value, x):
        t = np.asarray(value, dtype=x.dtype)
        if t.ndim == x.ndim - 1:
            t = t[..., None]
        if t.ndim != 0 and t.shape != x.shape[:-1] + (1,):
            raise ShapeError(
                f"{name} must be a scalar or one value per row; got {t.shape} "
                f"for input {x.shape}"
            )
        return t

    def forward(self, x, target_mean, target_std):
        if x.ndim < 2:
            raise ShapeError(f"ZScoreAlign expects row-major input, got {x.shape}")
        t_mean = self._target("target_mean", target_mean, x)
        t_std = self._target("target_std", target_std, x)
        if np.any(t_std < 0):
            raise DomainError("target_std must be >= 0")
        inv_c = x.dtype.type(1.0 / x.shape[-1])
        mean = np.add.reduce(x, -1, keepdims=True)
        mean *= inv_c
        xhat = x - mean
        var = np.add.reduce(xhat * xhat, -1, keepdims=True)
        var *= inv_c
        if np.any(var == 0):
            raise DegenerateInputError(
                "z-score alignment is undefined for a constant feature vector"
            )
        inv_std = np.sqrt(var, out=var)
        np.divide(1.0, inv_std, out=inv_std)
        xhat *= inv_std
        y = xhat * t_std
        y += t_mean
        return y, (xhat, inv_std, t_std)

    def backward(self, grad_out, cache):
        """Returns (grad_x, grad_target_mean, grad_target_std)."""
        xhat, inv_std, t_std = cache
        _check_grad_shape("ZScoreAlign", grad_out, xhat.shape)
        inv_c = xhat.dtype.type(1.0 / xhat.shape[-1])
        grad_t_mean = np.add.reduce(grad_out, -1)
        grad_t_std = np.add.reduce(grad_out * xhat, -1)
        gs = grad_out * t_std
        mean_gs = np.add.reduce(gs, -1, keepdims=True)
        mean_gs *= inv_c
        mean_gs_xhat = np.add.reduce(gs * xhat, -1, keepdims=True)
        mean_gs_xhat *= inv_c
        gs -= mean_gs
        gs -= xhat * mean_gs_xhat
        gs *= inv_std
        return gs, grad_t_mean, grad_t_std


def zscore_align(x_f, target_mean, target_std) -> np.ndarray:
    """Functional z-score alignment of one vector or a batch of rows."""
    x = np.asarray(x_f, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    y, _ = ZScoreAlign().forward(x, target_mean, target_std)
    return y[0] if squeeze else y
