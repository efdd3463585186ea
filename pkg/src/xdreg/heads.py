"""Regression heads over paired feature vectors from two domains.

Six selectable variants, all ending in a single-output linear block:

================  ==============================================================
variant           structure
================  ==============================================================
``xf``            FC-hidden + ReLU + Dropout, then FC-1, on the RGB features
``xm``            the same trunk on the energy-distribution features
``concat``        the same trunk on the raw concatenation (x_m, x_f)
``zscore``        x_f aligned to x_m's per-row mean/std, then the concat trunk
``ln``            LN+ReLU+Dropout per domain, concat, LN+ReLU+Dropout,
                  FC-hidden + LN + ReLU + Dropout, FC-1
``lngn``          as ``ln`` but the two post-concat norms are GroupNorm
                  (2 contiguous groups, which line up with the two domains)
================  ==============================================================

The two single-domain variants have the same trunk as ``concat`` so the
six rows differ only in how (whether) the domains are adapted.  The
per-domain norm blocks carry independent gamma/beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .layers import EVAL, TRAIN, Dropout, GroupNorm, LayerNorm, Linear, ReLU, ZScoreAlign

DEFAULT_HIDDEN = 1000
DEFAULT_EPS = 1e-5
DEFAULT_DROPOUT = 0.5
DEFAULT_GROUPS = 2


class HeadVariant(str, Enum):
    RGB_ONLY = "xf"
    EDM_ONLY = "xm"
    RAW_CONCAT = "concat"
    ZSCORE = "zscore"
    LAYER_NORM = "ln"
    LAYER_GROUP_NORM = "lngn"

    @classmethod
    def parse(cls, value) -> "HeadVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown head variant {value!r}; expected one of {names}")


_SINGLE_DOMAIN = (HeadVariant.RGB_ONLY, HeadVariant.EDM_ONLY)


@dataclass
class HeadModel:
    variant: HeadVariant
    c_m: int
    c_f: int
    hidden: int
    eps: float
    dropout_p: float
    num_groups: int
    dtype: np.dtype
    branch_m: list = field(default_factory=list)
    branch_f: list = field(default_factory=list)
    align: ZScoreAlign | None = None
    trunk: list = field(default_factory=list)
    mode: str = TRAIN
    target_mean: float | None = None
    target_std: float | None = None

    def set_mode(self, mode: str):
        if mode not in (TRAIN, EVAL):
            raise ConfigError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
        self.mode = mode
        return self

    def sections(self):
        return (("branch_m", self.branch_m), ("branch_f", self.branch_f), ("trunk", self.trunk))

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """All learnable tensors in a fixed, documented traversal order."""
        out = []
        for section, chain in self.sections():
            for i, layer in enumerate(chain):
                for pname, arr in layer.params().items():
                    out.append((f"{section}.{i}.{pname}", arr))
        return out

    def set_parameters(self, arrays):
        named = self.parameters()
        if len(arrays) != len(named):
            raise ContractError(
                f"expected {len(named)} parameter tensors, got {len(arrays)}"
            )
        for (name, current), new in zip(named, arrays):
            new = np.asarray(new, dtype=current.dtype)
            if new.shape != current.shape:
                raise ContractError(
                    f"parameter {name} has shape {current.shape}, got {new.shape}"
                )
            current[...] = new

    def block_shapes(self) -> list[tuple[str, tuple]]:
        """Structural audit view: (layer kind, characteristic shape) per block."""
        out = []
        for section, chain in self.sections():
            for layer in chain:
                if isinstance(layer, Linear):
                    out.append((f"{section}.linear", (layer.in_dim, layer.out_dim)))
                elif isinstance(layer, GroupNorm):
                    out.append((f"{section}.groupnorm", (layer.dim, layer.num_groups)))
                elif isinstance(layer, LayerNorm):
                    out.append((f"{section}.layernorm", (layer.dim,)))
                elif isinstance(layer, Dropout):
                    out.append((f"{section}.dropout", (layer.p,)))
                else:
                    out.append((f"{section}.{type(layer).__name__.lower()}", ()))
        return out


@dataclass
class HeadCache:
    """Per-call state saved by head_forward for the matching backward."""

    caches_m: list
    caches_f: list
    align_cache: tuple | None
    stats_cache: tuple | None  # (centered x_m, row std of x_m) for the zscore path
    trunk_caches: list
    preds_shape: tuple


def _norm_block(kind, dim, eps, dropout_p, num_groups, dtype):
    if kind == "ln":
        norm = LayerNorm.create(dim, eps=eps, dtype=dtype)
    else:
        norm = GroupNorm.create(dim, eps=eps, num_groups=num_groups, dtype=dtype)
    return [norm, ReLU(), Dropout(dropout_p)]


def build_head(
    variant,
    c_m: int,
    c_f: int,
    rng,
    *,
    hidden: int = DEFAULT_HIDDEN,
    eps: float = DEFAULT_EPS,
    dropout_p: float = DEFAULT_DROPOUT,
    num_groups: int = DEFAULT_GROUPS,
    dtype=np.float64,
    allow_unequal_domains: bool = False,
) -> HeadModel:
    """Construct a head with freshly initialized parameters.

    Weight draws consume ``rng`` in block order, so the same stream and
    dims always produce the same initialization.
    """
    variant = HeadVariant.parse(variant)
    if c_m < 1 or c_f < 1 or hidden < 1:
        raise ConfigError(f"dims must be >= 1, got c_m={c_m} c_f={c_f} hidden={hidden}")
    dtype = np.dtype(dtype)
    concat_dim = c_m + c_f

    model = HeadModel(
        variant=variant,
        c_m=int(c_m),
        c_f=int(c_f),
        hidden=int(hidden),
        eps=float(eps),
        dropout_p=float(dropout_p),
        num_groups=int(num_groups),
        dtype=dtype,
    )

    def trunk_tail(in_dim, norm_kind=None):
        layers = [Linear.create(rng, in_dim, hidden, dtype=dtype)]
        if norm_kind is not None:
            layers += _norm_block(norm_kind, hidden, eps, dropout_p, num_groups, dtype)
        else:
            layers += [ReLU(), Dropout(dropout_p)]
        layers.append(Linear.create(rng, hidden, 1, dtype=dtype))
        return layers

    if variant in _SINGLE_DOMAIN:
        in_dim = c_f if variant is HeadVariant.RGB_ONLY else c_m
        model.trunk = trunk_tail(in_dim)
    elif variant is HeadVariant.RAW_CONCAT:
        model.trunk = trunk_tail(concat_dim)
    elif variant is HeadVariant.ZSCORE:
        model.align = ZScoreAlign()
        model.trunk = trunk_tail(concat_dim)
    else:
        if variant is HeadVariant.LAYER_GROUP_NORM:
            if concat_dim % num_groups != 0:
                raise ConfigError(
                    f"lngn needs c_m + c_f divisible by {num_groups} groups, "
                    f"got {c_m} + {c_f} = {concat_dim}"
                )
            if hidden % num_groups != 0:
                raise ConfigError(
                    f"lngn needs hidden divisible by {num_groups}, got {hidden}"
                )
            if c_m != c_f and not allow_unequal_domains:
                raise ConfigError(
                    f"lngn groups align with the two domains only when c_m == c_f "
                    f"(got {c_m} and {c_f}); pass allow_unequal_domains=True to override"
                )
        norm_kind = "gn" if variant is HeadVariant.LAYER_GROUP_NORM else "ln"
        model.branch_m = _norm_block("ln", c_m, eps, dropout_p, num_groups, dtype)
        model.branch_f = _norm_block("ln", c_f, eps, dropout_p, num_groups, dtype)
        model.trunk = (
            _norm_block(norm_kind, concat_dim, eps, dropout_p, num_groups, dtype)
            + trunk_tail(concat_dim, norm_kind=norm_kind)
        )
    return model


def _chain_forward(chain, x, mode, rng, frozen):
    caches = []
    for i, layer in enumerate(chain):
        if isinstance(layer, Dropout):
            if frozen is not None:
                x, c = layer.apply_mask(x, frozen[i])
            else:
                x, c = layer.forward(x, mode, rng)
        else:
            x, c = layer.forward(x)
        caches.append(c)
    return x, caches


def _chain_backward(chain, grad, caches):
    param_grads = {}
    for i in range(len(chain) - 1, -1, -1):
        layer = chain[i]
        grad, pgrads = layer.backward(grad, caches[i])
        for pname, g in pgrads.items():
            param_grads[(i, pname)] = g
    return grad, param_grads


def _row_stats(x):
    inv_c = x.dtype.type(1.0 / x.shape[-1])
    mean = np.add.reduce(x, -1, keepdims=True)
    mean *= inv_c
    centered = x - mean
    var = np.add.reduce(centered * centered, -1, keepdims=True)
    var *= inv_c
    std = np.sqrt(var, out=var)
    return mean, std, centered


def _validate_input(name, x, width, dtype, leading=None):
    if x is None:
        raise ShapeError(f"head requires {name} (width {width})")
    x = np.asarray(x, dtype=dtype)
    if x.ndim not in (2, 3) or x.shape[-1] != width:
        raise ShapeError(f"{name} must be (N, {width}), got {x.shape}")
    if leading is not None and x.shape[:-1] != leading:
        raise ShapeError(f"{name} batch {x.shape[:-1]} != {leading}")
    return x


def head_forward(model: HeadModel, x_m, x_f, rng=None, frozen: HeadCache | None = None):
    """Run the head; returns (predictions vector of length N, HeadCache).

    In eval mode dropout is the identity and the pass is deterministic;
    in train mode each dropout draws a mask from ``rng`` unless
    ``frozen`` replays the masks of an earlier call.  A stacked model
    (lane axis on every parameter) takes (R, N, C) inputs and returns
    (R, N) predictions.
    """
    mode = model.mode
    variant = model.variant

    if variant is HeadVariant.RGB_ONLY:
        u = _validate_input("x_f", x_f, model.c_f, model.dtype)
        caches_m, caches_f = [], []
        align_cache = stats_cache = None
    elif variant is HeadVariant.EDM_ONLY:
        u = _validate_input("x_m", x_m, model.c_m, model.dtype)
        caches_m, caches_f = [], []
        align_cache = stats_cache = None
    else:
        x_m = _validate_input("x_m", x_m, model.c_m, model.dtype)
        x_f = _validate_input("x_f", x_f, model.c_f, model.dtype, leading=x_m.shape[:-1])
        am, caches_m = _chain_forward(
            model.branch_m, x_m, mode, rng, frozen.caches_m if frozen else None
        )
        af, caches_f = _chain_forward(
            model.branch_f, x_f, mode, rng, frozen.caches_f if frozen else None
        )
        if model.align is not None:
            mean_m, std_m, centered_m = _row_stats(x_m)
            af, align_cache = model.align.forward(af, mean_m, std_m)
            stats_cache = (centered_m, std_m)
        else:
            align_cache = stats_cache = None
        u = np.concatenate([am, af], axis=-1)

    y, trunk_caches = _chain_forward(
        model.trunk, u, mode, rng, frozen.trunk_caches if frozen else None
    )
    cache = HeadCache(
        caches_m=caches_m,
        caches_f=caches_f,
        align_cache=align_cache,
        stats_cache=stats_cache,
        trunk_caches=trunk_caches,
        preds_shape=y.shape[:-1],
    )
    return y[..., 0], cache


def head_backward(model: HeadModel, grad_predictions, cache: HeadCache):
    """Gradients for every learnable parameter, by reverse block traversal.

    Returns (param_grads keyed like ``parameters()``, (grad_x_m, grad_x_f)).
    Input gradients are None for domains the variant does not consume.
    """
    grad_predictions = np.asarray(grad_predictions, dtype=model.dtype)
    if grad_predictions.shape != cache.preds_shape:
        raise ContractError(
            f"grad_predictions must have shape {cache.preds_shape}, "
            f"got {grad_predictions.shape}"
        )
    grad = grad_predictions[..., None]

    grad_u, trunk_grads = _chain_backward(model.trunk, grad, cache.trunk_caches)
    named = {f"trunk.{i}.{p}": g for (i, p), g in trunk_grads.items()}

    variant = model.variant
    if variant is HeadVariant.RGB_ONLY:
        grad_m, grad_f = None, grad_u
    elif variant is HeadVariant.EDM_ONLY:
        grad_m, grad_f = grad_u, None
    else:
        grad_am = grad_u[..., : model.c_m]
        grad_af = grad_u[..., model.c_m :]
        if model.align is not None:
            grad_af, grad_tmean, grad_tstd = model.align.backward(
                grad_af, cache.align_cache
            )
            # Chain the target-statistics gradients back into x_m: the
            # targets are x_m's own row mean and population std.
            centered_m, std_m = cache.stats_cache
            c_m = model.c_m
            grad_am = grad_am + grad_tmean[..., None] / c_m
            safe = np.where(std_m > 0, std_m, 1)
            grad_am = grad_am + np.where(
                std_m > 0, grad_tstd[..., None] * centered_m / (c_m * safe), 0
            )
        grad_m, m_grads = _chain_backward(model.branch_m, grad_am, cache.caches_m)
        grad_f, f_grads = _chain_backward(model.branch_f, grad_af, cache.caches_f)
        named.update({f"branch_m.{i}.{p}": g for (i, p), g in m_grads.items()})
        named.update({f"branch_f.{i}.{p}": g for (i, p), g in f_grads.items()})

    return named, (grad_m, grad_f)
