"""Low-level numerics: seeded RNG streams, stable activations, selection,
rank estimation, and the finite-difference oracle used to validate every
hand-derived backward pass in this package.

All arrays are float64. Every public function is pure: same inputs (and same
RNG stream state) give bit-identical outputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Rng",
    "softplus",
    "sigmoid",
    "gumbel_draw",
    "topk_indices",
    "numerical_rank",
    "mean_pairwise_cosine",
    "finite_diff_grad",
    "as_matrix",
    "check_finite",
]


class Rng:
    """Deterministic random stream backed by the Philox counter-based generator.

    Philox is a published, platform-stable algorithm, so a seed fully pins the
    draw sequence across runs and machines.  ``split(tag)`` derives a child
    stream that is independent of the parent and of siblings with other tags
    (numpy ``SeedSequence`` spawning).
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, tag: int | str) -> "Rng":
        """Child stream keyed by ``tag``; same (seed, tag) always gives the same stream."""
        if isinstance(tag, str):
            tag = int.from_bytes(tag.encode("utf-8"), "little") % (2**63)
        child_seq = np.random.SeedSequence(entropy=self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(tag),))
        return Rng(self.seed, _seq=child_seq)

    def uniform_open(self, n: int) -> np.ndarray:
        """n uniforms on the open interval (0, 1); exact endpoints are rejected."""
        u = self.gen.random(n)
        while True:
            bad = u == 0.0
            if not bad.any():
                return u
            u[bad] = self.gen.random(int(bad.sum()))

    def normal(self, shape: tuple[int, ...] | int) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def integers(self, low: int, high: int, size: int | None = None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return ``a`` as a float64 2-D array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.isfinite(a).all():
        raise FloatingPointError(f"{what} contains non-finite values")
    return a


def softplus(x):
    """log(1 + exp(x)), overflow-safe: for x > 30 returns x + log1p(exp(-x))."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    hi = x > 30.0
    lo = ~hi
    out[hi] = x[hi] + np.log1p(np.exp(-x[hi]))
    out[lo] = np.log1p(np.exp(x[lo]))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid(x):
    """Logistic function, computed piecewise to avoid exp overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[neg])
    out[neg] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def gumbel_draw(rng: Rng, n: int) -> np.ndarray:
    """n i.i.d. standard Gumbel draws, g = -log(-log(u)) with u uniform on (0, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.uniform_open(n)
    return -np.log(-np.log(u))


def topk_indices(z: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, sorted by descending value.

    Ties break toward the lower index.  Raises if k exceeds n.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    n = z.shape[0]
    if k > n:
        raise ValueError("k exceeds n")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-z, kind="stable")
    return order[:k].copy()


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-6) -> int:
    """Number of singular values above rel_tol times the largest singular value."""
    m = as_matrix(m)
    if not (0.0 < rel_tol < 1.0):
        raise ValueError("rel_tol must be in (0, 1)")
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def mean_pairwise_cosine(m: np.ndarray) -> float:
    """Mean of cos(row_i, row_j) over all pairs i < j."""
    m = as_matrix(m)
    n = m.shape[0]
    if n < 2:
        raise ValueError("need at least two rows")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("degenerate token")
    unit = m / norms[:, None]
    g = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return float(np.mean(g[iu]))


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray | Sequence[float],
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / (2h).

    The oracle every analytic backward in this package is checked against.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64).copy()
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("objective returned a non-finite value")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
