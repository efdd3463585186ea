"""Synthetic dual-domain benchmark with a controlled statistics mismatch.

The generator draws a positive scalar target (kCal) uniformly over a
configurable range and embeds it into two feature domains:

* ``x_m`` (energy-distribution domain): every channel is a monotone
  saturating function of the target plus Gaussian noise, standardized to
  zero mean and unit variance in closed form, so the domain is clean and
  informative.
* ``x_f`` (RGB domain): only a fraction of channels carry the target
  signal (with heavier noise), the rest are pure noise; the standardized
  block is then shifted by ``xf_offset`` and the whole thing scaled by
  ``xf_scale``, i.e. ``x_f = xf_scale * (standardized + xf_offset)``.
  Channel means therefore scale linearly with ``xf_scale``, while with
  ``xf_scale=1, xf_offset=0`` the two domains' moments match.

Raw concatenation is consequently dominated by x_f's magnitude, which is
exactly the imbalance the adaptation heads are meant to remove, so the
qualitative quality ordering of the six head variants is reproducible at
desk scale.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import DOMAIN_EDM, DOMAIN_RGB, FeatureVector, Sample
from .errors import ConfigError, TrainingDiverged
from .evaluation import evaluate, evaluate_window
from .heads import HeadModel, HeadVariant, build_head, head_backward, head_forward
from .layers import Dropout, GroupNorm, LayerNorm, Linear, ReLU, ZScoreAlign
from .rng import RngStream
from .training import (
    TrainConfig,
    dataset_arrays,
    make_optimizer_state,
    optimizer_step,
    standardize_targets,
    train,
)

CATEGORIES = ("breakfast", "lunch", "dinner")
SQRT3 = float(np.sqrt(3.0))


@dataclass
class SynthConfig:
    c_m: int = 64
    c_f: int = 64
    n_train: int = 864
    n_test: int = 96
    target_range: tuple = (19.83, 2204.35)
    xm_noise_std: float = 0.25
    xf_noise_std: float = 2.0
    xf_scale: float = 50.0
    xf_offset: float = 10.0
    xf_signal_fraction: float = 0.25
    seed: int = 7

    def __post_init__(self):
        if self.c_m < 2 or self.c_f < 2:
            raise ConfigError(f"feature widths must be >= 2, got {self.c_m}, {self.c_f}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        lo, hi = self.target_range
        if not (0 < lo < hi):
            raise ConfigError(f"target_range must be positive and ordered, got {self.target_range}")
        if self.xm_noise_std < 0 or self.xf_noise_std < 0:
            raise ConfigError("noise stds must be >= 0")
        if self.xf_scale <= 0:
            raise ConfigError("xf_scale must be > 0")
        if not 0.0 <= self.xf_signal_fraction <= 1.0:
            raise ConfigError("xf_signal_fraction must be in [0, 1]")


def _log_cosh(z):
    z = np.abs(z)
    return z + np.log1p(np.exp(-2.0 * z)) - np.log(2.0)


def _channel_functions(stream: RngStream, width: int):
    """Per-channel saturating curves: slope, shift, sign."""
    slope = stream.uniform((width,), 0.6, 2.4)
    shift = stream.uniform((width,), -1.2, 1.2)
    sign = np.where(stream.uniform((width,)) < 0.5, -1.0, 1.0)
    return slope, shift, sign


def _embed(u, slope, shift, sign):
    """tanh(slope * u + shift), standardized in closed form over u ~ U[-sqrt3, sqrt3].

    The mean and second moment of tanh over a uniform interval have
    closed forms (integral of tanh is log cosh; of tanh^2 is u - tanh u),
    so every channel is exactly zero-mean, unit-variance in expectation.
    """
    u1 = slope * SQRT3 + shift
    u0 = -slope * SQRT3 + shift
    width = u1 - u0
    mean = (_log_cosh(u1) - _log_cosh(u0)) / width
    second = 1.0 - (np.tanh(u1) - np.tanh(u0)) / width
    std = np.sqrt(second - mean * mean)
    return sign * (np.tanh(u[:, None] * slope + shift) - mean) / std


def _noisy(signal, noise, noise_std):
    # Keep channels unit-variance: var(signal + s*noise) = 1 + s^2.
    return (signal + noise_std * noise) / np.sqrt(1.0 + noise_std**2)


def generate(config: SynthConfig):
    """Generate (train, test) sample lists; bitwise deterministic per seed."""
    root = RngStream(config.seed)
    m_curves = _channel_functions(root.split("channels", "m"), config.c_m)
    n_signal = int(round(config.c_f * config.xf_signal_fraction))
    f_curves = _channel_functions(root.split("channels", "f"), max(n_signal, 1))

    lo, hi = config.target_range
    mid = (lo + hi) / 2.0
    spread = (hi - lo) / np.sqrt(12.0)

    def make_split(name, count):
        stream = root.split(name)
        w = stream.split("targets").uniform((count,), lo, hi)
        u = (w - mid) / spread
        x_m = _noisy(
            _embed(u, *m_curves),
            stream.split("noise_m").normal((count, config.c_m)),
            config.xm_noise_std,
        )
        x_f = stream.split("noise_f").normal((count, config.c_f))
        if n_signal > 0:
            x_f[:, :n_signal] = _noisy(
                _embed(u, *f_curves), x_f[:, :n_signal], config.xf_noise_std
            )
        x_f = config.xf_scale * (x_f + config.xf_offset)
        return [
            Sample(
                id=f"{name}_{i:04d}",
                x_m=FeatureVector(DOMAIN_EDM, x_m[i]),
                x_f=FeatureVector(DOMAIN_RGB, x_f[i]),
                target_kcal=float(w[i]),
                category=CATEGORIES[i % len(CATEGORIES)],
            )
            for i in range(count)
        ]

    return make_split("train", config.n_train), make_split("test", config.n_test)


# ---------------------------------------------------------------------------
# Ordering experiment


@dataclass
class OrderingRow:
    seed: int
    variant: str
    mae: float
    mape: float


@dataclass
class OrderingReport:
    """Per-variant windowed metrics plus the quality-ordering assertions.

    The assertions characterize the expected benchmark outcome:

    * raw_concat_degrades: MAPE(concat) > MAPE(xm)
    * ln_beats_raw_concat: MAPE(ln) < MAPE(concat)
    * ln_within_1pt_of_xm: MAPE(ln) <= MAPE(xm) + 1
    * xf_worst:            MAPE(xf) >= every other variant's MAPE

    With five or more seeds an assertion may fail on one seed and the
    report still passes (at-least-4-of-5 rule); with fewer seeds it must
    hold on all of them.
    """

    seeds: list
    rows: list
    per_seed_assertions: dict = field(default_factory=dict)

    ASSERTION_NAMES = (
        "raw_concat_degrades",
        "ln_beats_raw_concat",
        "ln_within_1pt_of_xm",
        "xf_worst",
    )

    def mape_table(self, seed) -> dict:
        return {r.variant: r.mape for r in self.rows if r.seed == seed}

    def assertion_counts(self) -> dict:
        counts = {name: 0 for name in self.ASSERTION_NAMES}
        for seed in self.seeds:
            for name, ok in self.per_seed_assertions[seed].items():
                counts[name] += bool(ok)
        return counts

    @property
    def required_passes(self) -> int:
        return len(self.seeds) - 1 if len(self.seeds) >= 5 else len(self.seeds)

    def passed(self) -> bool:
        need = self.required_passes
        return all(count >= need for count in self.assertion_counts().values())

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "rows": [asdict(r) for r in self.rows],
            "assertions": {str(s): a for s, a in self.per_seed_assertions.items()},
            "assertion_counts": self.assertion_counts(),
            "required_passes": self.required_passes,
            "passed": self.passed(),
        }


def _evaluate_assertions(mapes: dict) -> dict:
    others = [m for v, m in mapes.items() if v != HeadVariant.RGB_ONLY.value]
    return {
        "raw_concat_degrades": bool(mapes["concat"] > mapes["xm"]),
        "ln_beats_raw_concat": bool(mapes["ln"] < mapes["concat"]),
        "ln_within_1pt_of_xm": bool(mapes["ln"] <= mapes["xm"] + 1.0),
        "xf_worst": bool(mapes["xf"] >= max(others)),
    }


def run_variant(synth_config: SynthConfig, train_config: TrainConfig, variant) -> OrderingRow:
    """Train one variant on the benchmark and window-evaluate it."""
    variant = HeadVariant.parse(variant)
    train_set, test_set = generate(synth_config)
    init = RngStream(train_config.seed).split("init", variant.value)
    model = build_head(
        variant,
        synth_config.c_m,
        synth_config.c_f,
        init,
        dropout_p=train_config.dropout_p,
        dtype=np.dtype(train_config.dtype),
    )
    checkpoints = train(model, train_set, train_config, keep="window")
    window = evaluate_window(checkpoints, test_set)
    return OrderingRow(
        seed=train_config.seed, variant=variant.value, mae=window.mae, mape=window.mape
    )


# ---------------------------------------------------------------------------
# Lane-stacked execution: one variant, several seeds trained side by side.
#
# Every parameter gains a leading lane axis and every lane consumes its
# own seed's substreams (init, shuffle, dropout) exactly as a solo
# run_variant would, while elementwise work and python dispatch are
# shared across lanes.  Lanes never mix, so each lane reproduces the
# solo run bit for bit; the test suite pins that equivalence.


def _stack_layers(layer_rows):
    stacked = []
    for layers in zip(*layer_rows):
        first = layers[0]
        if isinstance(first, Linear):
            weight = np.stack([l.weight for l in layers])
            bias = np.stack([l.bias for l in layers])[:, None, :]
            stacked.append(Linear(weight, bias))
        elif isinstance(first, GroupNorm):
            stacked.append(
                GroupNorm(
                    np.stack([l.gamma for l in layers])[:, None, :],
                    np.stack([l.beta for l in layers])[:, None, :],
                    first.eps,
                    first.num_groups,
                )
            )
        elif isinstance(first, LayerNorm):
            stacked.append(
                LayerNorm(
                    np.stack([l.gamma for l in layers])[:, None, :],
                    np.stack([l.beta for l in layers])[:, None, :],
                    first.eps,
                )
            )
        elif isinstance(first, Dropout):
            stacked.append(Dropout(first.p))
        else:
            stacked.append(ReLU())
    return stacked


def _stack_models(models) -> HeadModel:
    first = models[0]
    return HeadModel(
        variant=first.variant,
        c_m=first.c_m,
        c_f=first.c_f,
        hidden=first.hidden,
        eps=first.eps,
        dropout_p=first.dropout_p,
        num_groups=first.num_groups,
        dtype=first.dtype,
        branch_m=_stack_layers([m.branch_m for m in models]),
        branch_f=_stack_layers([m.branch_f for m in models]),
        align=ZScoreAlign() if first.align is not None else None,
        trunk=_stack_layers([m.trunk for m in models]),
        mode="train",
    )


class _StackedMaskRng:
    """Per-lane dropout uniforms; lane r's sequence matches a solo run."""

    _BLOCK_ROWS = 1024

    def __init__(self, lane_epoch_streams):
        self._lanes = lane_epoch_streams
        self._per_width = {}

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64):
        lanes, rows, width = shape
        state = self._per_width.get(width)
        if state is None:
            state = self._per_width[width] = [
                [lane.split(width) for lane in self._lanes],
                None,
                0,
            ]
        streams, buf, cursor = state
        if buf is None or cursor + rows > buf.shape[1]:
            block = max(self._BLOCK_ROWS, rows)
            buf = state[1] = np.stack(
                [s.uniform((block, width), low, high, dtype=dtype) for s in streams]
            )
            cursor = state[2] = 0
        state[2] = cursor + rows
        return buf[:, cursor : state[2]]


def _stacked_loss(predictions, targets, kind):
    diff = predictions - targets
    inv = predictions.dtype.type(1.0 / diff.shape[-1])
    if kind == "l1":
        losses = np.add.reduce(np.abs(diff), -1) * inv
        grad = np.sign(diff)
        grad *= inv
    else:
        losses = np.add.reduce(diff * diff, -1) * inv
        grad = diff
        grad *= predictions.dtype.type(2.0 / diff.shape[-1])
    return losses, grad


def _run_variant_stacked(args):
    """Train one variant across all seeds at once; returns per-seed rows."""
    synth_dict, train_dict, seeds, variant_value = args
    variant = HeadVariant.parse(variant_value)
    lanes = []
    for seed in seeds:
        synth = SynthConfig(**{**synth_dict, "seed": seed})
        cfg = TrainConfig(**{**train_dict, "seed": seed})
        train_set, test_set = generate(synth)
        init = RngStream(seed).split("init", variant.value)
        model = build_head(
            variant,
            synth.c_m,
            synth.c_f,
            init,
            dropout_p=cfg.dropout_p,
            dtype=np.dtype(cfg.dtype),
        )
        lanes.append((seed, cfg, train_set, test_set, model))

    cfg = lanes[0][1]
    dtype = np.dtype(cfg.dtype)
    nlanes = len(lanes)
    arrays = [dataset_arrays(train_set, dtype) for _, _, train_set, _, _ in lanes]
    x_m = np.stack([a[0] for a in arrays])
    x_f = np.stack([a[1] for a in arrays])
    stats = [standardize_targets(a[2]) for a in arrays]
    if cfg.target_standardize:
        y = np.stack(
            [((a[2] - m) / s).astype(dtype) for a, (m, s) in zip(arrays, stats)]
        )
    else:
        y = np.stack([a[2].astype(dtype) for a in arrays])

    stacked = _stack_models([model for _, _, _, _, model in lanes])
    names = [name for name, _ in stacked.parameters()]
    params = [arr for _, arr in stacked.parameters()]
    opt_state = make_optimizer_state(params, cfg)
    roots = [RngStream(seed) for seed in seeds]
    n = x_m.shape[1]
    bs = cfg.batch_size
    window = deque(maxlen=cfg.eval_window)

    with threadpool_limits(limits=1):
        for epoch in range(1, cfg.epochs + 1):
            perms = [root.split("shuffle", epoch).permutation(n) for root in roots]
            xm_e = np.stack([x_m[r][perms[r]] for r in range(nlanes)])
            xf_e = np.stack([x_f[r][perms[r]] for r in range(nlanes)])
            y_e = np.stack([y[r][perms[r]] for r in range(nlanes)])
            mask_rng = _StackedMaskRng(
                [root.split("dropout", epoch) for root in roots]
            )
            for b, start in enumerate(range(0, n, bs)):
                stop = min(start + bs, n)
                preds, cache = head_forward(
                    stacked, xm_e[:, start:stop], xf_e[:, start:stop], rng=mask_rng
                )
                losses, grad = _stacked_loss(preds, y_e[:, start:stop], cfg.loss)
                if not np.all(np.isfinite(losses)):
                    norms = {nm: float(np.linalg.norm(p)) for nm, p in zip(names, params)}
                    raise TrainingDiverged(epoch, b, losses.tolist(), norms)
                pgrads, _ = head_backward(stacked, grad, cache)
                optimizer_step(params, [pgrads[nm] for nm in names], opt_state, cfg)
            window.append([p.copy() for p in params])

    rows = []
    for r, (seed, _, _, test_set, solo) in enumerate(lanes):
        solo.set_mode("eval")
        if cfg.target_standardize:
            solo.target_mean, solo.target_std = stats[r]
        solo_shapes = [arr.shape for _, arr in solo.parameters()]
        maes, mapes = [], []
        for snap in window:
            solo.set_parameters(
                [arr[r].reshape(shape) for arr, shape in zip(snap, solo_shapes)]
            )
            report = evaluate(solo, test_set)
            maes.append(report.mae)
            mapes.append(report.mape)
        rows.append(
            OrderingRow(
                seed=seed,
                variant=variant.value,
                mae=float(np.mean(maes)),
                mape=float(np.mean(mapes)),
            )
        )
    return rows


# heavier variants first so two workers pack the job list evenly
_JOB_ORDER = ("lngn", "ln", "zscore", "concat", "xf", "xm")


def ordering_experiment(
    synth_config: SynthConfig,
    train_config: TrainConfig,
    *,
    seeds=None,
    max_workers=None,
) -> OrderingReport:
    """Train all six variants per seed on identical data and compare them.

    Each variant is one job that trains every seed lane side by side
    (see _run_variant_stacked); jobs are distributed across worker
    processes.  Every lane is fully seeded, so the report is
    deterministic regardless of scheduling.  max_workers <= 1 forces
    in-process serial execution.
    """
    seeds = [train_config.seed] if seeds is None else list(seeds)
    if not seeds:
        raise ConfigError("ordering_experiment needs at least one seed")
    synth_dict = asdict(synth_config)
    train_dict = asdict(train_config)
    jobs = [(synth_dict, train_dict, seeds, v) for v in _JOB_ORDER]

    if max_workers is None:
        max_workers = min(len(jobs), os.cpu_count() or 1)
    if max_workers <= 1:
        results = [_run_variant_stacked(j) for j in jobs]
    else:
        with ProcessPoolExecutor(
            max_workers=max_workers, mp_context=get_context("fork")
        ) as pool:
            results = list(pool.map(_run_variant_stacked, jobs))

    by_key = {(row.seed, row.variant): row for rows in results for row in rows}
    rows = [by_key[(s, v.value)] for s in seeds for v in HeadVariant]
    report = OrderingReport(seeds=seeds, rows=rows)
    for seed in seeds:
        report.per_seed_assertions[seed] = _evaluate_assertions(report.mape_table(seed))
    return report
