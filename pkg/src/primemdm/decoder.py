"""Joint sub-token decoder with carry-over filtering.

For each sub-token position j a lookup table maps the observed digit (or the
mask) to a bitset over the C valid codes. The filters of the l positions are
AND-ed to get the support of a token's distribution, and the softmax is taken
over that support only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import SubTokenCodec


class EmptySupport(ValueError):
    pass


@dataclass(frozen=True)
class FilterTable:
    num_classes: int
    length: int
    base: int
    bits: np.ndarray   # (l, b+1, n_words) uint64
    dense: np.ndarray  # (l, b+1, C) bool, unpacked view of ``bits``

    def row(self, j: int, v: int) -> np.ndarray:
        return self.dense[j, v]


def _pack(mask: np.ndarray) -> np.ndarray:
    c = mask.shape[-1]
    n_words = (c + 63) // 64
    padded = np.zeros(mask.shape[:-1] + (n_words * 64,), dtype=bool)
    padded[..., :c] = mask
    b8 = np.packbits(padded, axis=-1, bitorder="little")
    return b8.view("<u8").reshape(mask.shape[:-1] + (n_words,))


def _unpack(words: np.ndarray, c: int) -> np.ndarray:
    b8 = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    return np.unpackbits(b8, axis=-1, bitorder="little")[..., :c].astype(bool)


def build_filter_table(codec: SubTokenCodec) -> FilterTable:
    codes = codec.valid_codes
    b = codec.base
    dense = np.empty((codec.length, b + 1, codec.num_classes), dtype=bool)
    for j in range(codec.length):
        dense[j, :b] = codes[:, j][None, :] == np.arange(b)[:, None]
        dense[j, b] = True
    dense.setflags(write=False)
    bits = _pack(dense)
    bits.setflags(write=False)
    return FilterTable(codec.num_classes, codec.length, b, bits, dense)


def valid_set(ft: FilterTable, y_ti) -> np.ndarray:
    """Boolean mask over the C codes consistent with one token's entries."""
    y_ti = np.asarray(y_ti)
    if y_ti.shape != (ft.length,):
        raise ValueError(f"expected {ft.length} entries, got shape {y_ti.shape}")
    acc = ft.bits[0, y_ti[0]].copy()
    for j in range(1, ft.length):
        acc &= ft.bits[j, y_ti[j]]
    return _unpack(acc, ft.num_classes)


def valid_sets(ft: FilterTable, y_t) -> np.ndarray:
    """Vectorized ``valid_set`` for grids of shape (..., l) -> (..., C)."""
    y_t = np.asarray(y_t)
    acc = ft.dense[0][y_t[..., 0]]
    for j in range(1, ft.length):
        acc = acc & ft.dense[j][y_t[..., j]]
    return acc


@dataclass
class DecoderDist:
    probs: np.ndarray
    support_mask: np.ndarray


def masked_log_softmax(logits, support):
    """log p over ``support`` (last axis); -inf elsewhere. Rows need >= 1 supported entry."""
    logits = np.asarray(logits)
    support = np.asarray(support, dtype=bool)
    if not np.all(support.any(axis=-1)):
        raise EmptySupport("valid set is empty")
    z = np.where(support, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def filtered_softmax(logits, support) -> DecoderDist:
    logp = masked_log_softmax(logits, support)
    probs = np.exp(logp)
    return DecoderDist(probs, np.asarray(support, dtype=bool))


def marginal(dist: DecoderDist, codec: SubTokenCodec, j: int) -> np.ndarray:
    if not 0 <= j < codec.length:
        raise ValueError(f"position {j} out of range")
    digits = codec.valid_codes[:, j]
    out = np.zeros(dist.probs.shape[:-1] + (codec.base,))
    for v in range(codec.base):
        out[..., v] = dist.probs[..., digits == v].sum(axis=-1)
    return out


def sample_categorical(probs, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw along the last axis; works on batches."""
    probs = np.asarray(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # never land on a zero-probability tail entry because of rounding
    idx = np.minimum(idx, probs.shape[-1] - 1)
    bad = np.take_along_axis(probs, idx[..., None], -1)[..., 0] <= 0
    if np.any(bad):
        last_nz = probs.shape[-1] - 1 - np.argmax((probs > 0)[..., ::-1], axis=-1)
        idx = np.where(bad, last_nz, idx)
    return idx


def sample_code(dist: DecoderDist, rng: np.random.Generator):
    """Draw a token index (the code index equals the token value)."""
    idx = sample_categorical(dist.probs, rng)
    return int(idx) if np.ndim(idx) == 0 else idx


# -- independent (factorized) head, kept for comparison only ----------------

@dataclass
class IndependentDist:
    """Per-position digit distributions; mass on invalid codes is kept."""
    digit_probs: np.ndarray  # (..., l, b)

    def code_probs(self, codec: SubTokenCodec) -> np.ndarray:
        """Probability of each valid code (does not sum to 1 if b**l > C)."""
        codes = codec.valid_codes
        p = np.ones(self.digit_probs.shape[:-2] + (codec.num_classes,))
        for j in range(codec.length):
            p = p * self.digit_probs[..., j, :][..., codes[:, j]]
        return p

    def invalid_mass(self, codec: SubTokenCodec) -> np.ndarray:
        return 1.0 - self.code_probs(codec).sum(axis=-1)


def independent_head(logitsets, y_ti, mask_value: int | None = None) -> IndependentDist:
    """Product of per-position softmaxes; visible digits become point masses."""
    logitsets = np.asarray(logitsets, dtype=float)
    y_ti = np.asarray(y_ti)
    b = logitsets.shape[-1]
    if mask_value is None:
        mask_value = b
    z = logitsets - logitsets.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    visible = y_ti != mask_value
    onehot = np.eye(b)[np.where(visible, y_ti, 0)]
    p = np.where(visible[..., None], onehot, p)
    return IndependentDist(p)


def sample_independent(dist: IndependentDist, codec: SubTokenCodec, rng: np.random.Generator,
                       max_tries: int = 100) -> np.ndarray:
    """Draw tokens digit-by-digit; invalid draws are redrawn, then fall back to argmax."""
    p = dist.digit_probs
    batch_shape = p.shape[:-2]
    out = np.full(batch_shape, -1, dtype=np.int64)
    pending = np.ones(batch_shape, dtype=bool)
    w = codec.weights
    for _ in range(max_tries):
        if not pending.any():
            break
        digits = sample_categorical(p[pending], rng)
        value = digits @ w
        ok = value < codec.num_classes
        idx = np.flatnonzero(pending.reshape(-1))
        flat = out.reshape(-1)
        flat[idx[ok]] = value[ok]
        out = flat.reshape(batch_shape)
        pending = out < 0
    if pending.any():
        cp = dist.code_probs(codec)
        out = np.where(pending, cp.argmax(axis=-1), out)
    return out
