"""Dense arithmetic, seeded randomness and truncated SVD.

Tensors are plain ``numpy.ndarray`` objects (float64 unless noted). The
helpers here are deliberately small: a fixed-order matrix product used where
bit-exact reproducibility matters more than speed, a counter-based splitmix64
generator, and a one-sided Jacobi SVD.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "IterationLimitError",
    "SeededRng",
    "matmul",
    "rng_uniform",
    "jacobi_svd",
    "svd_truncate",
]


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class IterationLimitError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed summation order over the inner index.

    ``out[i, j] = (((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)`` evaluated in
    float64, which matches a naive triple loop bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


# splitmix64 (Steele, Lea & Flood 2014). Output i of a generator with state s
# is mix(s + i*GAMMA), so a block of draws can be produced in one vector op.
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class SeededRng:
    """splitmix64 generator; the whole state is one unsigned 64-bit integer.

    Identical seeds give identical streams on every platform, and drawing
    ``a`` then ``b`` values yields the same numbers as drawing ``a + b``.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("draw count must be non-negative")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller on pairs; 1 - u keeps the log argument in (0, 1].
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        t = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(t), r * np.sin(t)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def fork(self) -> "SeededRng":
        return SeededRng(int(self.next_u64(1)[0]))


def rng_uniform(rng: SeededRng, n: int) -> np.ndarray:
    return rng.uniform(n)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of n/2 disjoint index pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        left = players[: n // 2]
        right = players[n // 2:][::-1]
        p = np.array([min(a, b) for a, b in zip(left, right)])
        q = np.array([max(a, b) for a, b in zip(left, right)])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(m: np.ndarray, max_sweeps: int = 60, tol: float = 1e-12):
    """Thin SVD ``m = u @ diag(s) @ v.T`` by one-sided (Hestenes) Jacobi.

    Columns of a working copy are rotated pairwise until every pair is
    orthogonal to relative tolerance ``tol``. Pairs are visited in
    round-robin order so each round rotates n/2 disjoint pairs at once. Wide
    inputs are handled through their transpose. Singular values come back in
    non-increasing order; columns of ``u`` belonging to zero singular values
    are completed to an orthonormal set.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if m.shape[1] > m.shape[0]:
        u, s, v = jacobi_svd(m.T, max_sweeps, tol)
        return v, s, u

    p, q = m.shape
    n = q + (q % 2)
    # columns are stored as rows so each rotation touches contiguous memory;
    # an odd count gets a dummy zero column that is dropped afterwards
    a = np.zeros((n, p))
    a[:q] = m.T
    v = np.eye(n)
    schedule = _round_robin(n) if n > 1 else []
    fro2 = float(np.sum(a * a))
    floor = (np.finfo(np.float64).eps ** 2) * fro2

    residual = 0.0
    for _ in range(max_sweeps):
        residual = 0.0
        for i, j in schedule:
            ai, aj = a[i], a[j]
            alpha = np.einsum("ij,ij->i", ai, ai)
            beta = np.einsum("ij,ij->i", aj, aj)
            gamma = np.einsum("ij,ij->i", ai, aj)
            scale = np.sqrt(alpha * beta)
            live = (alpha > floor) & (beta > floor) & (np.abs(gamma) > tol * scale)
            if not np.any(live):
                continue
            ratio = np.abs(gamma[live]) / scale[live]
            residual = max(residual, float(ratio.max()))
            if not np.all(live):
                i, j = i[live], j[live]
                ai, aj = ai[live], aj[live]
                alpha, beta, gamma = alpha[live], beta[live], gamma[live]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta == 0, 1.0, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            sn = c * t[:, None]
            a[i] = c * ai - sn * aj
            a[j] = sn * ai + c * aj
            vi, vj = v[i], v[j]
            v[i] = c * vi - sn * vj
            v[j] = sn * vi + c * vj
        if residual == 0.0:
            break
    else:
        raise IterationLimitError(f"Jacobi SVD did not converge in {max_sweeps} sweeps", residual)

    a, v = a[:q].T, v[:q, :q].T
    s = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]
    u = np.zeros((p, q))
    live = s > np.sqrt(floor) if fro2 > 0 else np.zeros(q, dtype=bool)
    u[:, live] = a[:, live] / s[live]
    s[~live] = 0.0
    _complete_basis(u, live)
    return u, s, v


def _complete_basis(u: np.ndarray, live: np.ndarray) -> None:
    """Fill the columns of ``u`` not flagged ``live`` with orthonormal vectors."""
    live = live.copy()
    e = 0
    for col in np.flatnonzero(~live):
        while True:
            cand = np.zeros(u.shape[0])
            cand[e] = 1.0
            e += 1
            known = u[:, live]
            for _ in range(2):
                cand -= known @ (known.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 1e-8:
                u[:, col] = cand / norm
                live[col] = True
                break


def svd_truncate(m: np.ndarray, rank: int, max_sweeps: int = 60, tol: float = 1e-12):
    """Best rank-``rank`` factors ``(u[p,k], s[k], v[q,k])`` of ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if not 1 <= rank <= min(m.shape):
        raise ValueError(f"rank must lie in [1, {min(m.shape)}], got {rank}")
    u, s, v = jacobi_svd(m, max_sweeps, tol)
    return u[:, :rank], s[:rank], v[:, :rank]
