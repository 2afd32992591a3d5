"""Absorbing-mask kernels on sub-token grids.

Grids are integer arrays whose last two axes are (L, l); the mask state is
stored as the sentinel value ``b`` (``codec.mask_value``).
"""
from __future__ import annotations

import numpy as np

from .schedule import Schedule


def unmask_probability(sch: Schedule, s: float, t: float) -> float:
    """Probability a masked entry at time t is revealed by time s < t."""
    a_s, a_t = float(sch.alpha(s)), float(sch.alpha(t))
    if a_t >= 1.0:
        return 1.0
    return min(max((a_s - a_t) / (1.0 - a_t), 0.0), 1.0)


def forward_sample(y0, t: float, sch: Schedule, rng: np.random.Generator, mask_value: int):
    """Mask each entry of ``y0`` independently with probability 1 - alpha_t."""
    y0 = np.asarray(y0)
    keep = rng.random(y0.shape) < float(sch.alpha(t))
    return np.where(keep, y0, mask_value)


def transition_sample(y_s, s: float, t: float, sch: Schedule, rng: np.random.Generator,
                      mask_value: int):
    """Absorbing transition s -> t: visible entries get masked w.p. (a_s - a_t)/a_s."""
    if t < s:
        raise ValueError("transition requires s <= t")
    y_s = np.asarray(y_s)
    a_s, a_t = float(sch.alpha(s)), float(sch.alpha(t))
    p_mask = 0.0 if a_s <= 0.0 else (a_s - a_t) / a_s
    hit = (rng.random(y_s.shape) < p_mask) & (y_s != mask_value)
    return np.where(hit, mask_value, y_s)


def posterior_step(y_t, y0_hat, s: float, t: float, sch: Schedule, rng: np.random.Generator,
                   mask_value: int):
    """Draw y_s ~ q(y_s | y_t, y0_hat) entry-wise.

    Visible entries are carried over; each masked entry takes its value from
    ``y0_hat`` with probability (a_s - a_t)/(1 - a_t).
    """
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    y_t = np.asarray(y_t)
    y0_hat = np.asarray(y0_hat)
    masked = y_t == mask_value
    if np.any(~masked & (y_t != y0_hat)):
        raise ValueError("y0_hat disagrees with an unmasked entry of y_t")
    reveal = masked & (rng.random(y_t.shape) < unmask_probability(sch, s, t))
    return np.where(reveal, y0_hat, y_t)


def token_states(y_t, mask_value: int):
    """Per-token state: 0 unmasked, 1 intermediate, 2 fully masked."""
    n_masked = (np.asarray(y_t) == mask_value).sum(axis=-1)
    length = np.asarray(y_t).shape[-1]
    return np.where(n_masked == 0, 0, np.where(n_masked == length, 2, 1))
