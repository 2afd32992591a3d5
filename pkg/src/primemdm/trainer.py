"""Monte Carlo training of the sub-token variational bound and NLL evaluation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .model import Model
from .decoder import masked_log_softmax, valid_sets
from .diffusion import forward_sample
from .schedule import T_MIN, Schedule, loss_weight


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4096
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    t_min: float = T_MIN
    weighted_loss: bool = True
    carryover_in_train: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")


@dataclass
class LossReport:
    loss_value: float
    per_token: np.ndarray
    masked_count: int
    t: float | np.ndarray


@dataclass
class AdamState:
    m: netmod.Params
    v: netmod.Params
    step: int = 0

    @classmethod
    def zeros(cls, params: netmod.Params) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def token_logprobs(model: Model, logits, x0, y_t, carryover: bool = True):
    """log p_theta(y0^i | y_t) per token and its gradient w.r.t. the logits.

    ``x0``: (N, L) tokens, ``y_t``: (N, L, l) grid. Fully visible tokens
    score exactly 0 under carry-over.
    """
    codec = model.codec
    x0 = np.asarray(x0)
    if model.config.head == "joint":
        if carryover:
            support = valid_sets(model.filters, y_t)
        else:
            support = np.ones(logits.shape, dtype=bool)
        logp = masked_log_softmax(logits, support)
        lp = np.take_along_axis(logp, x0[..., None], -1)[..., 0]
        dlogits = -np.exp(logp)
        np.put_along_axis(dlogits, x0[..., None],
                          np.take_along_axis(dlogits, x0[..., None], -1) + 1.0, -1)
        return lp, dlogits
    # independent head: logits (N, L, l, b)
    y0 = codec.encode_array(x0)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    lp_digit = np.take_along_axis(logp, y0[..., None], -1)[..., 0]
    active = (y_t == codec.mask_value) if carryover else np.ones(y_t.shape, dtype=bool)
    lp = np.where(active, lp_digit, 0.0).sum(axis=-1)
    dlogits = -np.exp(logp)
    np.put_along_axis(dlogits, y0[..., None],
                      np.take_along_axis(dlogits, y0[..., None], -1) + 1.0, -1)
    dlogits = dlogits * active[..., None]
    return lp, dlogits


def sequence_coefficient(sch: Schedule, t, weighted: bool, t_min: float = T_MIN):
    """Multiplier turning sum_i log p into a nonnegative loss."""
    t = np.asarray(t, dtype=float)
    if weighted:
        return loss_weight(sch, t, t_min)
    return -np.ones_like(t)


def loss_and_grad(params, model: Model, x0, y_t, t, sch: Schedule, weighted: bool = True,
                  carryover: bool = True, t_min: float = T_MIN, need_grad: bool = True):
    """Batch-mean loss for fixed (x0, y_t, t) and its parameter gradient."""
    logits, cache = netmod.forward(params, y_t, model.config, return_cache=True)
    lp, dlogits = token_logprobs(model, logits, x0, y_t, carryover)
    coef = sequence_coefficient(sch, t, weighted, t_min)
    per_seq = coef * lp.sum(axis=-1)
    n = per_seq.shape[0]
    loss = float(per_seq.mean())
    if not need_grad:
        return loss, None, lp
    upstream = (coef / n)[:, None, None] if dlogits.ndim == 3 else (coef / n)[:, None, None, None]
    grads = netmod.backward(params, cache, dlogits * upstream, model.config)
    return loss, grads, lp


def stratified_times(n: int, rng: np.random.Generator, t_min: float = T_MIN):
    """One uniform draw per stratum of [t_min, 1]."""
    return t_min + (1.0 - t_min) * (np.arange(n) + rng.random(n)) / n


def loss_estimate(params, model: Model, x0, sch: Schedule, rng: np.random.Generator,
                  cfg: TrainConfig) -> LossReport:
    """Single-sample estimate of the bound for one sequence of tokens."""
    x0 = np.asarray(x0)[None]
    t = float(cfg.t_min + (1.0 - cfg.t_min) * rng.random())
    y0 = model.codec.encode_array(x0)
    y_t = forward_sample(y0, t, sch, rng, model.mask_value)
    loss, _, lp = loss_and_grad(params, model, x0, y_t, np.array([t]), sch, cfg.weighted_loss,
                                cfg.carryover_in_train, cfg.t_min, need_grad=False)
    coef = float(sequence_coefficient(sch, t, cfg.weighted_loss, cfg.t_min))
    return LossReport(loss, coef * lp[0], int((y_t == model.mask_value).sum()), t)


def adam_update(params, grads, state: AdamState, cfg: TrainConfig):
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = netmod.Params()
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        step = cfg.learning_rate * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.adam_eps)
        out[k] = (p - step).astype(p.dtype, copy=False)
    return out, state


def train_step(params, model: Model, batch_x0, sch: Schedule, state: AdamState,
               cfg: TrainConfig, rng: np.random.Generator):
    batch_x0 = np.asarray(batch_x0)
    n = batch_x0.shape[0]
    t = stratified_times(n, rng, cfg.t_min)
    y0 = model.codec.encode_array(batch_x0)
    keep = rng.random(y0.shape) < sch.alpha(t)[:, None, None]
    y_t = np.where(keep, y0, model.mask_value)
    loss, grads, lp = loss_and_grad(params, model, batch_x0, y_t, t, sch, cfg.weighted_loss,
                                    cfg.carryover_in_train, cfg.t_min)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericFailure(f"non-finite loss/gradient at step {state.step}: loss={loss}")
    if cfg.learning_rate == 0:
        new_params = params
        state.step += 1
    else:
        new_params, state = adam_update(params, grads, state, cfg)
    report = LossReport(loss, lp.mean(axis=0), int((y_t == model.mask_value).sum()), t)
    return new_params, state, report


@dataclass
class NLLReport:
    nats_per_token: float
    perplexity: float
    stderr: float | None
    nats_per_sequence: float
    num_mc: int
    samples: np.ndarray = field(repr=False, default=None)


def eval_nll(params, model: Model, dataset_sampler, sch: Schedule, num_mc: int,
             rng: np.random.Generator, t_min: float = T_MIN, chunk: int = 4096) -> NLLReport:
    """Stratified Monte Carlo estimate of the weighted bound (with carry-over).

    ``dataset_sampler(rng, n)`` returns an (n, L) token array. The integral is
    taken over [t_min, 1]; the standard error is the plain sample estimate,
    which is conservative under stratification.
    """
    if num_mc < 1:
        raise ValueError("num_mc must be >= 1")
    t_all = stratified_times(num_mc, rng, t_min)
    vals = []
    for lo in range(0, num_mc, chunk):
        t = t_all[lo:lo + chunk]
        x0 = np.asarray(dataset_sampler(rng, len(t)))
        y0 = model.codec.encode_array(x0)
        keep = rng.random(y0.shape) < sch.alpha(t)[:, None, None]
        y_t = np.where(keep, y0, model.mask_value)
        logits = netmod.forward(params, y_t, model.config)
        lp, _ = token_logprobs(model, logits, x0, y_t, carryover=True)
        vals.append(sequence_coefficient(sch, t, True, t_min) * lp.sum(axis=-1))
    vals = np.concatenate(vals) * (1.0 - t_min)
    seq_len = model.config.seq_len
    per_seq = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(num_mc)) / seq_len if num_mc > 1 else None
    per_tok = per_seq / seq_len
    return NLLReport(per_tok, math.exp(per_tok), stderr, per_seq, num_mc, vals)


def exact_bound(params, model: Model, x0, sch: Schedule, t_min: float = T_MIN,
                nodes: int | None = None) -> np.ndarray:
    """Bound per sequence of ``x0`` (rows of tokens) with the mask expectation
    enumerated and the time integral done by Gauss-Legendre quadrature.

    Only for tiny grids (L * l <= 16). For polynomial schedules the integrand
    is a polynomial in t, so enough nodes make the quadrature exact.
    """
    x0 = np.atleast_2d(np.asarray(x0))
    L, l = model.config.seq_len, model.config.length
    n = L * l
    if n > 16:
        raise ValueError("exact_bound enumerates 2^(L*l) patterns; L*l must be <= 16")
    pats = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)  # True = masked
    k = pats.sum(axis=1)
    nodes = nodes or 2 * n + 16
    u, wq = np.polynomial.legendre.leggauss(nodes)
    t = t_min + (1.0 - t_min) * (u + 1.0) / 2.0
    wq = wq * (1.0 - t_min) / 2.0
    a = sch.alpha(t)
    pat_prob = a[:, None] ** (n - k) * (1.0 - a[:, None]) ** k       # (nodes, 2^n)
    coef = loss_weight(sch, t, t_min)
    y0 = model.codec.encode_array(x0)
    out = np.empty(len(x0))
    for r in range(len(x0)):
        grid = np.where(pats.reshape(-1, L, l), model.mask_value, y0[r])
        logits = netmod.forward(params, grid, model.config)
        lp, _ = token_logprobs(model, logits, np.broadcast_to(x0[r], (len(grid), L)), grid)
        seq_lp = lp.sum(axis=-1)
        out[r] = float(np.sum(wq * coef * (pat_prob @ seq_lp)))
    return out


METRIC_FIELDS = ["step", "wallclock", "loss", "nll_eval", "isr_running"]


def fit(params, model: Model, dataset_sampler, sch: Schedule, cfg: TrainConfig,
        metrics_path=None, eval_every: int = 0, eval_mc: int = 1024, isr_value=None,
        checkpoint_every: int = 0, checkpoint_fn=None, log=None):
    """Run ``cfg.steps`` Adam steps; optionally stream a metrics CSV.

    Returns (params, history of per-step losses).
    """
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    dtype = np.dtype(cfg.dtype)
    params = params.astype(dtype)
    state = AdamState.zeros(params)
    history = []
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            batch = dataset_sampler(rng, cfg.batch_size)
            params, state, rep = train_step(params, model, batch, sch, state, cfg, rng)
            history.append(rep.loss_value)
            nll = ""
            if eval_every and step % eval_every == 0:
                nll = f"{eval_nll(params, model, dataset_sampler, sch, eval_mc, eval_rng, cfg.t_min).nats_per_token:.10g}"
            if writer is not None:
                isr_txt = "" if isr_value is None else f"{isr_value:.10g}"
                writer.writerow([step, f"{time.perf_counter() - t0:.3f}", f"{rep.loss_value:.10g}",
                                 nll, isr_txt])
            if log is not None and (step == 1 or step % 100 == 0):
                log(f"step {step} loss {rep.loss_value:.4f}")
            if checkpoint_every and checkpoint_fn and step % checkpoint_every == 0:
                checkpoint_fn(params, step)
    finally:
        if fh is not None:
            fh.close()
    return params, history
