"""Deterministic mini-batch training with per-epoch checkpoints.

The trainer is single-threaded over optimizer steps and every source of
randomness is a named substream of the config seed, so identical
(model init, data, config) reruns produce bitwise-identical checkpoint
sequences on the same platform.

The Adam update has two interchangeable implementations: an in-place
numpy cascade and a fused C kernel (xdreg._fastopt) that applies the
same per-element operations in the same order, making the two bitwise
identical; the C path is used automatically when the extension built.
Set XDREG_DISABLE_FASTOPT=1 to force the numpy path.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, ContractError, DomainError, TrainingDiverged
from .heads import EVAL, HeadModel, HeadVariant, build_head, head_backward, head_forward
from .rng import RngStream

try:
    from . import _fastopt
except ImportError:  # extension not built; numpy fallback is equivalent
    _fastopt = None

_FASTOPT_ENABLED = _fastopt is not None and not os.environ.get("XDREG_DISABLE_FASTOPT")

LOSSES = ("l1", "l2")
OPTIMIZERS = ("adam", "sgd")
DTYPES = ("float32", "float64")


@dataclass
class TrainConfig:
    """Training hyperparameters.

    float64 is the reference precision; "float32" is an opt-in for long
    benchmark runs.  The loss defaults to L1 because the headline metric
    is a mean absolute error over a target range spanning two orders of
    magnitude; L2 is selectable.
    """

    batch_size: int = 2
    epochs: int = 300
    learning_rate: float = 1e-4
    loss: str = "l1"
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_p: float = 0.5
    seed: int = 7
    eval_window: int = 50
    target_standardize: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.loss = str(self.loss).lower()
        self.optimizer = str(self.optimizer).lower()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be > 0")
        if not 1 <= self.eval_window <= self.epochs:
            raise ConfigError(
                f"eval_window must be in [1, epochs={self.epochs}], "
                f"got {self.eval_window}"
            )
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")


def loss_and_grad(predictions, targets, kind: str = "l1"):
    """Mean loss and its gradient with respect to the predictions.

    l1: mean |p - t|, subgradient sign(p - t)/N (0 at ties).
    l2: mean (p - t)^2, gradient 2 (p - t)/N.
    """
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise DomainError(
            f"predictions and targets must be equal-length vectors, got "
            f"{predictions.shape} and {targets.shape}"
        )
    n = predictions.shape[0]
    if n == 0:
        raise DomainError("loss is undefined on empty vectors")
    diff = predictions - targets
    kind = kind.lower()
    if kind == "l1":
        loss = float(np.add.reduce(np.abs(diff))) / n
        grad = np.sign(diff)
        grad *= predictions.dtype.type(1.0 / n)
    elif kind == "l2":
        loss = float(np.add.reduce(diff * diff)) / n
        grad = diff
        grad *= predictions.dtype.type(2.0 / n)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizers


def make_optimizer_state(params, config: TrainConfig) -> dict:
    if config.optimizer == "adam":
        return {
            "kind": "adam",
            "t": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
        }
    return {"kind": "sgd"}


def _adam_scalars(config: TrainConfig, t: int):
    b1, b2 = config.beta1, config.beta2
    ic2 = 1.0 / (1.0 - b2**t)
    lr_ic1 = config.learning_rate / (1.0 - b1**t)
    return (b1, 1.0 - b1, b2, 1.0 - b2, ic2, lr_ic1, config.adam_eps)


def _adam_update_numpy(p, g, m, v, scalars, buf):
    # Mirrors the C kernel in xdreg._fastopt op for op (same rounding
    # sequence), including the flush of sub-normal moments to zero, so
    # the two paths produce bitwise-identical results.
    b1, c1mb1, b2, c1mb2, ic2, lr_ic1, eps = scalars
    tiny = np.finfo(p.dtype).tiny
    np.multiply(g, c1mb1, out=buf)
    m *= b1
    m += buf
    m *= np.abs(m) >= tiny
    np.multiply(g, g, out=buf)
    buf *= c1mb2
    v *= b2
    v += buf
    v *= v >= tiny
    np.multiply(v, ic2, out=buf)
    np.sqrt(buf, out=buf)
    buf += eps
    np.divide(m, buf, out=buf)
    buf *= lr_ic1
    p -= buf


def optimizer_step(params, grads, state: dict, config: TrainConfig):
    """Apply one update in place; returns (params, state)."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(
                f"param shape {p.shape} does not match grad shape {g.shape}"
            )
    if state["kind"] == "adam":
        state["t"] += 1
        scalars = _adam_scalars(config, state["t"])
        fast = state.get("_fast")
        if fast is None:
            fast = state["_fast"] = _FASTOPT_ENABLED and all(
                p.flags.c_contiguous and p.dtype.itemsize in (4, 8) for p in params
            )
        if fast and all(
            g.flags.c_contiguous and g.dtype == p.dtype
            for g, p in zip(grads, params)
        ):
            _fastopt.adam_step_multi(params, grads, state["m"], state["v"], *scalars)
        else:
            scratch = state.setdefault("_scratch", {})
            for p, g, m, v in zip(params, grads, state["m"], state["v"]):
                key = (p.size, p.dtype.str)
                buf = scratch.get(key)
                if buf is None:
                    buf = scratch[key] = np.empty(p.size, dtype=p.dtype)
                _adam_update_numpy(
                    p.reshape(-1),
                    g.reshape(-1).astype(p.dtype, copy=False),
                    m.reshape(-1),
                    v.reshape(-1),
                    scalars,
                    buf,
                )
    elif state["kind"] == "sgd":
        lr = config.learning_rate
        for p, g in zip(params, grads):
            p -= lr * g
    else:
        raise ConfigError(f"unknown optimizer state kind {state['kind']!r}")
    return params, state


class _EpochMaskRng:
    """Serves dropout uniforms from bulk per-width buffers.

    Each distinct mask width gets its own substream of the epoch stream,
    drawn in blocks and consumed in row order; numpy generators fill
    row-major, so the served values are identical to drawing the same
    row counts one call at a time from that substream.  This exists to
    amortize generator call overhead over the epoch.
    """

    _BLOCK_ROWS = 1024

    def __init__(self, epoch_stream):
        self._stream = epoch_stream
        self._per_width = {}

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64):
        rows, width = shape
        state = self._per_width.get(width)
        if state is None:
            state = self._per_width[width] = [self._stream.split(width), None, 0]
        stream, buf, cursor = state
        if buf is None or cursor + rows > buf.shape[0]:
            buf = state[1] = stream.uniform(
                (max(self._BLOCK_ROWS, rows), width), low, high, dtype=dtype
            )
            cursor = state[2] = 0
        state[2] = cursor + rows
        return buf[cursor : state[2]]


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """Full snapshot of a model plus optimizer state at one epoch."""

    epoch: int
    variant: str
    c_m: int
    c_f: int
    hidden: int
    eps: float
    dropout_p: float
    num_groups: int
    dtype: str
    param_names: list
    params: list
    opt_kind: str
    opt_t: int
    opt_m: Optional[list]
    opt_v: Optional[list]
    target_mean: Optional[float]
    target_std: Optional[float]
    config: dict = field(default_factory=dict)


def snapshot(
    model: HeadModel, epoch: int, opt_state: dict, config: TrainConfig, config_dict=None
) -> Checkpoint:
    named = model.parameters()
    is_adam = opt_state["kind"] == "adam"
    return Checkpoint(
        epoch=epoch,
        variant=model.variant.value,
        c_m=model.c_m,
        c_f=model.c_f,
        hidden=model.hidden,
        eps=model.eps,
        dropout_p=model.dropout_p,
        num_groups=model.num_groups,
        dtype=str(model.dtype),
        param_names=[name for name, _ in named],
        params=[arr.copy() for _, arr in named],
        opt_kind=opt_state["kind"],
        opt_t=opt_state.get("t", 0),
        opt_m=[m.copy() for m in opt_state["m"]] if is_adam else None,
        opt_v=[v.copy() for v in opt_state["v"]] if is_adam else None,
        target_mean=model.target_mean,
        target_std=model.target_std,
        config=asdict(config) if config_dict is None else config_dict,
    )


def checkpoint_to_model(ckpt: Checkpoint) -> HeadModel:
    """Materialize an eval-mode model from a snapshot (bitwise parameters)."""
    model = build_head(
        HeadVariant.parse(ckpt.variant),
        ckpt.c_m,
        ckpt.c_f,
        RngStream(0),
        hidden=ckpt.hidden,
        eps=ckpt.eps,
        dropout_p=ckpt.dropout_p,
        num_groups=ckpt.num_groups,
        dtype=np.dtype(ckpt.dtype),
        allow_unequal_domains=True,
    )
    expected = [name for name, _ in model.parameters()]
    if expected != list(ckpt.param_names):
        raise ContractError(
            f"checkpoint parameter names {ckpt.param_names} do not match the "
            f"reconstructed structure {expected}"
        )
    model.set_parameters(ckpt.params)
    model.target_mean = ckpt.target_mean
    model.target_std = ckpt.target_std
    return model.set_mode(EVAL)


# ---------------------------------------------------------------------------
# Training loop


def dataset_arrays(samples, dtype):
    """Stack a sample list into (X_m, X_f, targets_kcal float64)."""
    if not samples:
        raise DomainError("dataset is empty")
    x_m = np.stack([s.x_m.values for s in samples]).astype(dtype, copy=False)
    x_f = np.stack([s.x_f.values for s in samples]).astype(dtype, copy=False)
    y = np.array([s.target_kcal for s in samples], dtype=np.float64)
    return x_m, x_f, y


def standardize_targets(y: np.ndarray):
    """Population mean/std of the train targets; std 0 falls back to 1."""
    mean = float(y.mean())
    std = float(np.sqrt(np.mean((y - mean) ** 2)))
    if std == 0.0:
        std = 1.0
    return mean, std


def train(
    model: HeadModel,
    train_set,
    config: TrainConfig,
    *,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    keep: str = "all",
    verbose: bool = False,
) -> list:
    """Run the configured number of epochs; returns retained checkpoints.

    Every epoch performs a seeded shuffle, sequential mini-batches with
    the final partial batch kept, and one optimizer step per batch, then
    emits a checkpoint.  ``keep`` selects which checkpoints the returned
    list retains: "all", "window" (the last eval_window) or "none";
    ``on_checkpoint`` sees every checkpoint regardless.
    """
    if keep not in ("all", "window", "none"):
        raise ConfigError(f"keep must be all|window|none, got {keep!r}")
    dtype = np.dtype(config.dtype)
    if dtype != model.dtype:
        raise ConfigError(
            f"config dtype {dtype} does not match model dtype {model.dtype}"
        )
    x_m, x_f, y_kcal = dataset_arrays(train_set, dtype)
    if model.variant is not HeadVariant.RGB_ONLY and x_m.shape[1] != model.c_m:
        raise ConfigError(f"x_m width {x_m.shape[1]} != model c_m {model.c_m}")
    if model.variant is not HeadVariant.EDM_ONLY and x_f.shape[1] != model.c_f:
        raise ConfigError(f"x_f width {x_f.shape[1]} != model c_f {model.c_f}")

    if config.target_standardize:
        t_mean, t_std = standardize_targets(y_kcal)
        model.target_mean, model.target_std = t_mean, t_std
        y = ((y_kcal - t_mean) / t_std).astype(dtype)
    else:
        model.target_mean = model.target_std = None
        y = y_kcal.astype(dtype)

    model.set_mode("train")
    named = model.parameters()
    names = [name for name, _ in named]
    params = [arr for _, arr in named]
    opt_state = make_optimizer_state(params, config)
    root = RngStream(config.seed)
    n = x_m.shape[0]
    bs = config.batch_size

    if keep == "window":
        retained: deque = deque(maxlen=config.eval_window)
    else:
        retained = deque()

    config_dict = asdict(config)
    with threadpool_limits(limits=1):
        for epoch in range(1, config.epochs + 1):
            perm = root.split("shuffle", epoch).permutation(n)
            drop_rng = _EpochMaskRng(root.split("dropout", epoch))
            xm_e, xf_e, y_e = x_m[perm], x_f[perm], y[perm]
            loss_sum = 0.0
            for b, start in enumerate(range(0, n, bs)):
                stop = min(start + bs, n)
                preds, cache = head_forward(
                    model, xm_e[start:stop], xf_e[start:stop], rng=drop_rng
                )
                loss, grad = loss_and_grad(preds, y_e[start:stop], config.loss)
                if not np.isfinite(loss):
                    norms = {nm: float(np.linalg.norm(p)) for nm, p in zip(names, params)}
                    raise TrainingDiverged(epoch, b, loss, norms)
                pgrads, _ = head_backward(model, grad, cache)
                optimizer_step(params, [pgrads[nm] for nm in names], opt_state, config)
                loss_sum += loss * (stop - start)
            if verbose:
                print(f"epoch={epoch} loss={loss_sum / n:.8g}", flush=True)
            ckpt = snapshot(model, epoch, opt_state, config, config_dict)
            if on_checkpoint is not None:
                on_checkpoint(ckpt)
            if keep != "none":
                retained.append(ckpt)
    return list(retained)
