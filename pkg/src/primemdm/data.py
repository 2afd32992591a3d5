"""2D density grids: construction, loading, sampling, scoring."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BUILTINS = ("gaussians", "checkerboard", "rings")


@dataclass(frozen=True)
class DensityGrid:
    probs: np.ndarray  # (side, side), sums to 1

    @property
    def side(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def from_intensity(cls, img) -> "DensityGrid":
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise ValueError(f"need a square 2D array, got shape {img.shape}")
        if np.any(img < 0) or not np.all(np.isfinite(img)):
            raise ValueError("intensities must be finite and nonnegative")
        total = img.sum()
        if total <= 0:
            raise ValueError("all-zero image has no density")
        probs = img / total
        probs.setflags(write=False)
        return cls(probs)


# -- PGM ---------------------------------------------------------------------

def _pgm_tokens(data: bytes):
    """Header tokens (magic, width, height, maxval) and the offset just past them."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < 4 and i < n:
        c = data[i:i + 1]
        if c == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, off = _pgm_tokens(data)
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a P2/P5 graymap")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if tokens[0] == b"P5":
        dtype = ">u2" if maxval > 255 else "u1"
        arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=off + 1)
    else:
        body = b" ".join(line.split(b"#")[0] for line in data[off:].splitlines())
        arr = np.array(body.split(), dtype=np.int64)[: w * h]
    if arr.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(h, w).astype(np.float64)


def write_pgm(path, img, binary: bool = True) -> None:
    img = np.asarray(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(np.asarray(img, dtype=np.uint8).tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n255\n".encode())
            for row in np.asarray(img, dtype=np.int64):
                fh.write((" ".join(map(str, row)) + "\n").encode())


def histogram_image(hist) -> np.ndarray:
    """Scale a nonnegative 2D histogram to 0..255 gray levels."""
    hist = np.asarray(hist, dtype=np.float64)
    top = hist.max()
    if top <= 0:
        return np.zeros(hist.shape, dtype=np.uint8)
    return np.round(255.0 * hist / top).astype(np.uint8)


def _square_resize(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape
    k = min(h, w)
    top, left = (h - k) // 2, (w - k) // 2
    img = img[top:top + k, left:left + k]
    idx = (np.arange(side) * k) // side
    return img[np.ix_(idx, idx)]


def load_density(path, side: int) -> DensityGrid:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    head = path.read_bytes()[:2]
    if head in (b"P2", b"P5"):
        img = read_pgm(path)
    else:
        try:
            img = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValueError(f"{path}: unreadable density file ({exc})") from exc
    return DensityGrid.from_intensity(_square_resize(img, side))


# -- builtins ----------------------------------------------------------------

def gaussian_centers(side: int):
    """The two mode centers (row, col); the pair is point-symmetric about the grid center."""
    c1 = (0.3 * (side - 1), 0.25 * (side - 1))
    c2 = (side - 1 - c1[0], side - 1 - c1[1])
    return c1, c2


def builtin_density(name: str, side: int, rng: np.random.Generator | None = None) -> DensityGrid:
    """Deterministic parametric densities (``rng`` is accepted but unused)."""
    r, c = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    if name == "gaussians":
        sigma = side / 12.0
        comps = []
        for cr, cc in gaussian_centers(side):
            g = np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * sigma ** 2))
            comps.append(g / g.sum())
        img = 0.5 * comps[0] + 0.5 * comps[1]
    elif name == "checkerboard":
        cell = max(side // 8, 1)
        img = (((r // cell) + (c // cell)) % 2 == 0).astype(float)
    elif name == "rings":
        mid = (side - 1) / 2.0
        rad = np.hypot(r - mid, c - mid)
        radius, width = 0.3 * side, max(side / 32.0, 0.5)
        img = np.where(np.abs(rad - radius) <= 3 * width,
                       np.exp(-((rad - radius) ** 2) / (2 * width ** 2)), 0.0)
    else:
        raise ValueError(f"unknown density {name!r}; choose from {BUILTINS}")
    return DensityGrid.from_intensity(img)


def sample_data(grid: DensityGrid, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. cells as (row, col) token pairs, shape (n, 2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cdf = np.cumsum(grid.probs.ravel())
    flat = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    flat = np.minimum(flat, cdf.size - 1)
    return np.stack(np.divmod(flat, grid.side), axis=1)


def sample_histogram(samples, side: int) -> np.ndarray:
    s = np.asarray(samples, dtype=np.int64).reshape(-1, 2)
    return np.bincount(s[:, 0] * side + s[:, 1], minlength=side * side).reshape(side, side)


def tv_distance(grid: DensityGrid, samples) -> float:
    s = np.asarray(samples)
    if s.size == 0:
        raise ValueError("samples must be nonempty")
    hist = sample_histogram(s, grid.side)
    emp = hist / hist.sum()
    return float(0.5 * np.abs(emp - grid.probs).sum())


class TokenRows:
    """Empirical distribution over token rows loaded from a CSV file."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.int64)
        if self.rows.ndim != 2 or self.rows.size == 0:
            raise ValueError("need a nonempty 2D array of token rows")

    @classmethod
    def from_csv(cls, path) -> "TokenRows":
        return cls(np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.int64))

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.rows[rng.integers(0, len(self.rows), n)]


def grid_sampler(grid: DensityGrid):
    return lambda rng, n: sample_data(grid, n, rng)
