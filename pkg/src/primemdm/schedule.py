"""Masking schedules alpha_t on t in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_MIN = 1e-4


def _check_t(t):
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return arr


class Schedule:
    name = "base"

    def _alpha(self, t):
        raise NotImplementedError

    def _alpha_prime(self, t):
        raise NotImplementedError

    def alpha(self, t):
        return self._alpha(_check_t(t))

    def alpha_prime(self, t):
        return self._alpha_prime(_check_t(t))

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Linear(Schedule):
    name = "linear"

    def _alpha(self, t):
        return 1.0 - t

    def _alpha_prime(self, t):
        return -np.ones_like(t)


@dataclass(frozen=True)
class Polynomial(Schedule):
    power: float = 3.0

    @property
    def name(self):
        p = self.power
        return f"poly{int(p)}" if float(p).is_integer() else f"poly{p}"

    def _alpha(self, t):
        return (1.0 - t) ** self.power

    def _alpha_prime(self, t):
        return -self.power * (1.0 - t) ** (self.power - 1.0)


_REGISTRY = {"linear": Linear}


def register(name: str, factory) -> None:
    """Add a schedule kind. ``factory()`` must return a Schedule with analytic derivative."""
    _REGISTRY[name] = factory


def get_schedule(name: str | Schedule) -> Schedule:
    if isinstance(name, Schedule):
        return name
    key = name.strip().lower()
    if key in _REGISTRY:
        return _REGISTRY[key]()
    if key.startswith("poly"):
        try:
            return Polynomial(float(key[4:]))
        except ValueError:
            pass
    raise ValueError(f"unknown schedule {name!r}")


def alpha(sch: Schedule, t):
    return sch.alpha(t)


def alpha_prime(sch: Schedule, t):
    return sch.alpha_prime(t)


def loss_weight(sch: Schedule, t, t_min: float = T_MIN):
    """alpha'_t / (1 - alpha_t), with t clamped to [t_min, 1]."""
    t = np.clip(_check_t(t), t_min, 1.0)
    return sch.alpha_prime(t) / (1.0 - sch.alpha(t))


def mutual_info(sch: Schedule, t, entropy_h0: float):
    if entropy_h0 < 0:
        raise ValueError("entropy must be nonnegative")
    return sch.alpha(t) * entropy_h0


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


__all__ = [
    "T_MIN", "Schedule", "Linear", "Polynomial", "register", "get_schedule",
    "alpha", "alpha_prime", "loss_weight", "mutual_info", "entropy",
]
