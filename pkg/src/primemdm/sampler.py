"""Ancestral reverse sampling over sub-token grids with idle-step accounting."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .decoder import (independent_head, masked_log_softmax, sample_categorical,
                      sample_independent, valid_sets)
from .diffusion import unmask_probability
from .model import Model
from .schedule import Schedule, get_schedule


@dataclass
class SamplerConfig:
    num_steps: int = 128
    schedule: Schedule | str = "linear"
    seed: int = 0
    cache_outputs: bool = True
    record_trajectory: bool = False
    freeze_draws_on_idle: bool = False

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        self.schedule = get_schedule(self.schedule)


@dataclass
class SampleRun:
    tokens: np.ndarray
    idle_step_count: int
    unmask_counts: np.ndarray
    model_evals: int
    trajectory: list | None = None


@dataclass
class BatchRun:
    tokens: np.ndarray          # (n, L)
    idle_step_counts: np.ndarray  # (n,)
    unmask_counts: np.ndarray     # (n, T)
    model_evals: int
    trajectory: list | None = field(default=None, repr=False)

    def run(self, i: int) -> SampleRun:
        traj = None if self.trajectory is None else [g[i] for g in self.trajectory]
        return SampleRun(self.tokens[i], int(self.idle_step_counts[i]), self.unmask_counts[i],
                         -1, traj)


def _draw_tokens(model: Model, logits, grid, rng):
    """Draw y0_hat digits for every token of ``grid`` (rows are tokens)."""
    codec = model.codec
    if model.config.head == "joint":
        support = valid_sets(model.filters, grid)
        probs = np.exp(masked_log_softmax(logits.astype(np.float64), support))
        x = sample_categorical(probs, rng)
    else:
        dist = independent_head(logits, grid, codec.mask_value)
        x = sample_independent(dist, codec, rng)
    return codec.valid_codes[x]


def _run(params, model: Model, cfg: SamplerConfig, grid, rng, chunk: int = 16384):
    codec = model.codec
    m = codec.mask_value
    sch = cfg.schedule
    T = cfg.num_steps
    grid = np.array(grid, dtype=np.int64, copy=True)
    n = grid.shape[0]
    logits = np.zeros((n,) + model.config.output_shape, dtype=np.float32)
    stale = np.ones(n, dtype=bool)
    prev_draw = np.zeros_like(grid)
    have_draw = np.zeros(n, dtype=bool)
    idle = np.zeros(n, dtype=np.int64)
    unmasked = np.zeros((n, T), dtype=np.int64)
    evals = 0
    traj = [grid.copy()] if cfg.record_trajectory else None

    def refresh(rows):
        nonlocal evals
        for lo in range(0, len(rows), chunk):
            r = rows[lo:lo + chunk]
            logits[r] = netmod.forward(params, grid[r], model.config)
        evals += len(rows)

    def step(s, t):
        active = (grid == m).any(axis=(1, 2))
        need = np.flatnonzero(active & stale) if cfg.cache_outputs else np.flatnonzero(active)
        if len(need):
            refresh(need)
        token_open = (grid == m).any(axis=-1)           # (n, L)
        draw = prev_draw.copy()
        redraw = token_open
        if cfg.freeze_draws_on_idle:
            redraw = token_open & ~(have_draw & ~stale)[:, None]
        ri, rj = np.nonzero(redraw)
        if len(ri):
            draw[ri, rj] = _draw_tokens(model, logits[ri, rj], grid[ri, rj], rng)
        prev_draw[:] = draw
        have_draw[:] = True
        r = unmask_probability(sch, s, t)
        reveal = (grid == m) & (rng.random(grid.shape) < r)
        grid[reveal] = draw[reveal]
        changed = reveal.any(axis=(1, 2))
        stale[:] = changed
        return reveal, changed

    for k in range(T):
        t = 1.0 - k / T
        s = 1.0 - (k + 1) / T
        reveal, changed = step(s, t)
        unmasked[:, k] = reveal.sum(axis=(1, 2))
        idle += ~changed
        if traj is not None:
            traj.append(grid.copy())
    if (grid == m).any():
        # floating-point leftovers: one forced draw at s = 0 reveals everything
        step(0.0, max(1.0 / T, 1e-12))
    tokens = codec.decode_array(grid)
    return BatchRun(tokens, idle, unmasked, evals, traj)


def generate_batch(params, model: Model, cfg: SamplerConfig, n: int,
                   rng: np.random.Generator) -> BatchRun:
    L, l = model.config.seq_len, model.config.length
    grid = np.full((n, L, l), model.mask_value, dtype=np.int64)
    return _run(params, model, cfg, grid, rng)


def generate(params, model: Model, cfg: SamplerConfig, rng: np.random.Generator) -> SampleRun:
    out = generate_batch(params, model, cfg, 1, rng)
    run = out.run(0)
    run.model_evals = out.model_evals
    return run


def _condition_grid(model: Model, condition):
    codec = model.codec
    cond = np.asarray(condition, dtype=np.int64)
    if cond.shape[-1] == codec.length and cond.ndim >= 2 and \
            cond.shape[-2] == model.config.seq_len:
        codec.decode_array(cond)  # raises InvalidCode on bad rows
        return cond
    return codec.encode_array(cond)


def impute_batch(params, model: Model, cfg: SamplerConfig, kept_mask, condition,
                 rng: np.random.Generator) -> BatchRun:
    """Like ``generate_batch`` but starting from the kept digits of ``condition``.

    ``condition``: (n, L) tokens or (n, L, l) digit grids; ``kept_mask`` is
    (L, l) or (n, L, l).
    """
    cond = _condition_grid(model, condition)
    kept = np.broadcast_to(np.asarray(kept_mask, dtype=bool), cond.shape)
    grid = np.where(kept, cond, model.mask_value)
    return _run(params, model, cfg, grid, rng)


def impute(params, model: Model, cfg: SamplerConfig, kept_mask, condition,
           rng: np.random.Generator) -> SampleRun:
    cond = _condition_grid(model, condition)[None]
    out = impute_batch(params, model, cfg, np.asarray(kept_mask)[None], cond, rng)
    run = out.run(0)
    run.model_evals = out.model_evals
    return run


def reverse_transition_probs(code_probs, y_ti, s: float, t: float, sch: Schedule,
                             codec) -> dict:
    """Exact one-step law of a token row: P(y_s^i = z | y_t^i) for every reachable z.

    ``code_probs`` is p_theta(. | y_t) over the C codes.
    """
    y_ti = tuple(int(v) for v in y_ti)
    m = codec.mask_value
    masked = [j for j, v in enumerate(y_ti) if v == m]
    r = unmask_probability(sch, s, t)
    out: dict = {}
    codes = codec.valid_codes
    for c in np.flatnonzero(np.asarray(code_probs) > 0):
        pc = float(code_probs[c])
        for pattern in itertools.product((False, True), repeat=len(masked)):
            k = sum(pattern)
            w = pc * r ** k * (1.0 - r) ** (len(masked) - k)
            if w == 0.0:
                continue
            z = list(y_ti)
            for j, hit in zip(masked, pattern):
                if hit:
                    z[j] = int(codes[c, j])
            key = tuple(z)
            out[key] = out.get(key, 0.0) + w
    return out
