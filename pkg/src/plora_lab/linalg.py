"""Dense float64 matrix helpers, a counter-based RNG and a one-sided Jacobi SVD.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (C order).
Everything else in the package builds on the functions here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray

DEFAULT_RANK_TOL = 1e-8
JACOBI_MAX_SWEEPS = 60
JACOBI_TOL = 1e-12

_U53 = 2.0 ** -53
_UINT64_MAX = 2 ** 64 - 1


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NumericFailure(ArithmeticError):
    """An iterative routine failed to converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def as_matrix(x, name: str = "matrix") -> Matrix:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return a + b


def scale(a: Matrix, factor: float) -> Matrix:
    return a * float(factor)


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(a * a)))


class SeededRng:
    """Deterministic generator on top of the Philox-4x64 counter-based bit generator.

    The Philox key is ``(seed, stream)``, so independent streams can be derived
    from one seed without sharing state.  Raw 64-bit words are turned into
    uniforms as ``(word >> 11) * 2**-53`` and normals are produced with the
    Box-Muller transform: consecutive words ``(w0, w1)`` give
    ``u1 = ((w0 >> 11) + 1) * 2**-53`` in (0, 1] and ``u2`` from ``w1``, then
    ``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln u1)`` are emitted in
    that order.  An odd request drops the trailing sine deviate.  Matrices are
    filled row-major from this stream.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= int(seed) <= _UINT64_MAX or not 0 <= int(stream) <= _UINT64_MAX:
            raise ValueError("seed and stream must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.stream = int(stream)
        self._bg = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def spawn(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return self._bg.random_raw(n)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        words = self.raw(2 * pairs) >> np.uint64(11)
        u1 = (words[0::2].astype(np.float64) + 1.0) * _U53
        u2 = words[1::2].astype(np.float64) * _U53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of ``range(n)``: stable argsort of ``n`` uniforms."""
        return np.argsort(self.uniform(n), kind="stable")

    def get_state(self) -> dict:
        st = self._bg.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._bg = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self._bg.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array([self.seed, self.stream], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], state["stream"])
        rng.set_state(state)
        return rng


def gaussian_matrix(rows: int, cols: int, std: float, rng: SeededRng) -> Matrix:
    """``rows x cols`` matrix of N(0, std^2) entries, filled row-major from ``rng``."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = rng.normal(rows * cols).reshape(rows, cols)
    return z * float(std)


@dataclass
class SvdResult:
    u: Matrix  # d x p
    s: np.ndarray  # p, non-increasing
    v: Matrix  # k x p

    def reconstruct(self) -> Matrix:
        return (self.u * self.s) @ self.v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle-method tournament: n-1 rounds of n/2 disjoint pairs, n even
    idx = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([idx[i] for i in range(n // 2)])
        q = np.array([idx[n - 1 - i] for i in range(n // 2)])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _jacobi_tall(a: Matrix) -> tuple[Matrix, np.ndarray, Matrix]:
    """One-sided Jacobi on a tall (rows >= cols) matrix. Returns unsorted (u, s, v)."""
    m, n = a.shape
    work = a.copy()
    if n % 2:
        work = np.hstack([work, np.zeros((m, 1))])
    n_pad = work.shape[1]
    v = np.eye(n_pad)
    fro = frobenius_norm(a)
    # columns at rounding-noise level carry no spectrum; their mutual angles never settle
    negligible = (np.finfo(np.float64).eps * m * n_pad * fro) ** 2
    rounds = _round_robin(n_pad) if n_pad > 1 else []

    off = 0.0
    for _ in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            norm_pq = np.sqrt(alpha * beta)
            live = (alpha > negligible) & (beta > negligible)
            if not live.any():
                continue
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / norm_pq[live]
            off = max(off, float(ratio.max()))
            rot = live & (ratio > JACOBI_TOL)
            if not rot.any():
                continue
            p, q = p[rot], q[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= JACOBI_TOL:
            break
    else:
        raise NumericFailure(
            f"one-sided Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps", off
        )

    work, v = work[:, :n], v[:n, :n]
    sv = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sv, kind="stable")
    sv, work, v = sv[order], work[:, order], v[:, order]

    smax = sv[0] if n else 0.0
    null_cut = np.finfo(np.float64).eps * max(m, n) * smax
    good = sv > null_cut if smax > 0 else np.zeros(n, dtype=bool)
    u = np.zeros((m, n))
    u[:, good] = work[:, good] / sv[good]
    n_good = int(good.sum())
    if n_good < n:
        # orthonormal completion for numerically null directions
        basis = u[:, :n_good]
        q_full, _ = np.linalg.qr(np.hstack([basis, np.eye(m)]) if n_good else np.eye(m))
        u[:, n_good:] = q_full[:, n_good:n]
    return u, sv, v


def svd(m: Matrix) -> SvdResult:
    """Thin SVD ``m = u @ diag(s) @ v.T`` via one-sided (Hestenes) Jacobi.

    Column pairs are swept in parallel round-robin order; a pair is rotated
    while ``|a_p . a_q| / (|a_p| |a_q|) > 1e-12``.  Raises ``NumericFailure``
    when that residual is still above threshold after 60 sweeps.
    """
    m = as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    rows, cols = m.shape
    if rows >= cols:
        u, s, v = _jacobi_tall(m)
    else:
        v, s, u = _jacobi_tall(np.ascontiguousarray(m.T))
    return SvdResult(u=u, s=s, v=v)


def singular_values(m: Matrix) -> np.ndarray:
    return svd(m).s


def numerical_rank(m: Matrix, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values strictly above ``rel_tol * s_max`` (0 for the zero matrix)."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
