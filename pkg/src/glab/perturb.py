"""Norm-preserving perturbations of the token axis.

Activations inside the denoiser are (batch, tokens, channels) tensors.  The
operators here rewrite such a tensor by an orthonormal map along the token
axis, so the Frobenius norm is preserved exactly (up to float rounding) while
the arrangement of information across tokens is destroyed to varying
degrees.  Four kinds are provided:

* shuffle: a random permutation of the token rows,
* sign_flip: an independent random sign per token row,
* walsh_hadamard: the orthonormal Walsh-Hadamard transform, which mixes
  every token into every other with +-1/sqrt(N) weights,
* haar: a dense rotation drawn uniformly from the orthogonal group.

All constructors draw from a SeededRng stream, so an operator keyed by
(seed, layer, timestep) is reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DecompositionFailed,
    InvalidPermutation,
    InvalidSize,
    NotPowerOfTwo,
    ShapeMismatch,
)
from .rng import SeededRng


class PerturbKind(str, Enum):
    SHUFFLE = "shuffle"
    SIGN_FLIP = "sign_flip"
    WALSH_HADAMARD = "walsh_hadamard"
    HAAR = "haar"


def _check_size(n: int) -> int:
    n = int(n)
    if n < 1:
        raise InvalidSize(f"token count must be >= 1, got {n}")
    return n


def _check_tokens(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.ndim != 3:
        raise ShapeMismatch(f"expected (batch, tokens, channels), got shape {h.shape}")
    return h


def make_permutation(n: int, rng: SeededRng) -> np.ndarray:
    """Uniform random permutation of 0..n-1 via the Fisher-Yates walk."""
    n = _check_size(n)
    gen = rng.generator()
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(gen.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def _check_permutation(perm: np.ndarray, n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,):
        raise InvalidPermutation(f"permutation has shape {perm.shape}, expected ({n},)")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidPermutation("index vector is not a permutation of 0..n-1")
    return perm


def apply_shuffle(h: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Reorder token rows: output row j is input row perm[j]."""
    h = _check_tokens(h)
    perm = _check_permutation(perm, h.shape[1])
    return h[:, perm, :]


def make_sign_flip(n: int, rng: SeededRng) -> np.ndarray:
    """Independent +-1 per token row, each sign a fair coin."""
    n = _check_size(n)
    gen = rng.generator()
    return (2 * gen.integers(0, 2, size=n) - 1).astype(np.float64)


def apply_sign_flip(h: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Scale token row j by signs[j]."""
    h = _check_tokens(h)
    signs = np.asarray(signs, dtype=np.float64)
    if signs.shape != (h.shape[1],):
        raise ShapeMismatch(f"signs has shape {signs.shape}, expected ({h.shape[1]},)")
    if not np.all(np.abs(signs) == 1.0):
        raise ShapeMismatch("sign vector entries must be exactly +-1")
    return h * signs[None, :, None]


def apply_wht(h: np.ndarray) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform along the token axis.

    Runs log2(N) butterfly stages; stage s adds and subtracts rows that are
    2**(s-1) apart inside blocks of 2**s, then the result is scaled by
    1/sqrt(N) so the whole map is orthonormal.  Requires N to be a power of
    two.
    """
    h = _check_tokens(h)
    b, n, c = h.shape
    if n & (n - 1) != 0:
        raise NotPowerOfTwo(f"token count {n} is not a power of two")
    out = np.array(h, dtype=np.float64, copy=True)
    half = 1
    while half < n:
        view = out.reshape(b, n // (2 * half), 2, half, c)
        top = view[:, :, 0] + view[:, :, 1]
        bot = view[:, :, 0] - view[:, :, 1]
        out = np.stack([top, bot], axis=2).reshape(b, n, c)
        half *= 2
    return out / np.sqrt(n)


def hadamard_matrix(n: int) -> np.ndarray:
    """Explicit n x n orthonormal Hadamard matrix (entries +-1/sqrt(n)).

    Built by the doubling construction; used to cross-check the butterfly
    and to materialize the transform as a matrix.
    """
    n = _check_size(n)
    if n & (n - 1) != 0:
        raise NotPowerOfTwo(f"size {n} is not a power of two")
    mat = np.array([[1.0]])
    while mat.shape[0] < n:
        mat = np.block([[mat, mat], [mat, -mat]])
    return mat / np.sqrt(n)


def make_haar(n: int, rng: SeededRng) -> np.ndarray:
    """Rotation drawn uniformly (Haar measure) from the orthogonal group.

    QR-decomposes a square Gaussian matrix and corrects each column of Q by
    the sign of the matching diagonal entry of R; without that correction
    the factorization's sign conventions bias the distribution.  If the
    decomposition returns non-finite values the draw is retried once from
    the same stream before giving up.
    """
    n = _check_size(n)
    gen = rng.generator()
    for attempt in range(2):
        gauss = gen.standard_normal((n, n))
        q, r = np.linalg.qr(gauss)
        if np.all(np.isfinite(q)) and np.all(np.isfinite(r)):
            diag = np.diagonal(r)
            signs = np.where(diag >= 0.0, 1.0, -1.0)
            return q * signs[None, :]
    raise DecompositionFailed(f"QR produced non-finite factors twice for n={n}")


def apply_orthogonal(h: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mix token rows by the square matrix q: out[:, j, :] = sum_i q[j, i] h[:, i, :]."""
    h = _check_tokens(h)
    q = np.asarray(q, dtype=np.float64)
    n = h.shape[1]
    if q.shape != (n, n):
        raise ShapeMismatch(f"matrix has shape {q.shape}, expected ({n}, {n})")
    return np.einsum("ji,bic->bjc", q, h, optimize=True)


@dataclass(frozen=True)
class PerturbOp:
    """A materialized token perturbation: kind, size, and payload.

    The payload is whatever the kind needs to apply itself (an index vector,
    a sign vector, a dense matrix, or nothing for the fixed transform).
    Construction via ``make`` is deterministic in the given stream.
    """

    kind: PerturbKind
    n: int
    payload: np.ndarray | None

    @classmethod
    def make(cls, kind: PerturbKind, n: int, rng: SeededRng) -> "PerturbOp":
        kind = PerturbKind(kind)
        n = _check_size(n)
        if kind is PerturbKind.SHUFFLE:
            payload = make_permutation(n, rng)
        elif kind is PerturbKind.SIGN_FLIP:
            payload = make_sign_flip(n, rng)
        elif kind is PerturbKind.WALSH_HADAMARD:
            if n & (n - 1) != 0:
                raise NotPowerOfTwo(f"token count {n} is not a power of two")
            payload = None
        else:
            payload = make_haar(n, rng)
        return cls(kind=kind, n=n, payload=payload)

    @classmethod
    def identity(cls, n: int) -> "PerturbOp":
        """The do-nothing perturbation (identity permutation)."""
        return cls(kind=PerturbKind.SHUFFLE, n=_check_size(n), payload=np.arange(n))

    def apply(self, h: np.ndarray) -> np.ndarray:
        h = _check_tokens(h)
        if h.shape[1] != self.n:
            raise ShapeMismatch(f"operator built for {self.n} tokens, tensor has {h.shape[1]}")
        if self.kind is PerturbKind.SHUFFLE:
            return apply_shuffle(h, self.payload)
        if self.kind is PerturbKind.SIGN_FLIP:
            return apply_sign_flip(h, self.payload)
        if self.kind is PerturbKind.WALSH_HADAMARD:
            return apply_wht(h)
        return apply_orthogonal(h, self.payload)

    def matrix(self) -> np.ndarray:
        """The n x n matrix m with apply(h)[:, j] = sum_i m[j, i] h[:, i]."""
        if self.kind is PerturbKind.SHUFFLE:
            return np.eye(self.n)[self.payload]
        if self.kind is PerturbKind.SIGN_FLIP:
            return np.diag(self.payload)
        if self.kind is PerturbKind.WALSH_HADAMARD:
            return hadamard_matrix(self.n)
        return np.array(self.payload, copy=True)
