"""Small numerical helpers shared by the estimators."""
import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


def tree_sum(terms):
    """Pairwise sum over axis 0.

    The reduction order depends only on the number of terms, so results are
    reproducible bit-for-bit and do not depend on how callers chunk work.
    """
    a = np.asarray(terms, dtype=float)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            a = np.concatenate([a[:-1:2] + a[1::2], a[-1:]], axis=0)
        else:
            a = a[0::2] + a[1::2]
    return a[0]


def tree_gram(A, b=None, chunk=256):
    """``A^T A`` (and ``A^T b``) summed over fixed row chunks with :func:`tree_sum`.

    The chunk grid depends only on the row count, so the reduction order is
    fixed regardless of how the rows were produced.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    starts = range(0, max(n, 1), chunk)
    G = tree_sum([A[i:i + chunk].T @ A[i:i + chunk] for i in starts])
    if b is None:
        return G
    b = np.asarray(b, dtype=float)
    return G, tree_sum([A[i:i + chunk].T @ b[i:i + chunk] for i in starts])


def solve_spd(A, b, rcond=1e-12):
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    Raises :class:`RankDeficiencyError` when ``A`` is singular to ``rcond``.
    """
    A = 0.5 * (A + A.T)
    d = np.diag(A)
    if np.any(d <= 0) or np.min(d) <= rcond * np.max(d):
        raise RankDeficiencyError("normal equations are rank deficient")
    # Jacobi scaling keeps the conditioning check unit-independent
    s = 1.0 / np.sqrt(d)
    As = A * s[:, None] * s[None, :]
    try:
        c = cho_factor(As, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise RankDeficiencyError("normal equations are rank deficient") from exc
    piv = np.diag(c[0]) ** 2
    if np.min(piv) <= rcond * np.max(piv):
        raise RankDeficiencyError("normal equations are rank deficient")
    return s * cho_solve(c, s * b)


def schur_marginal(A, keep):
    """Information of the ``keep`` block after marginalising everything else."""
    keep = np.asarray(keep)
    drop = np.setdiff1d(np.arange(A.shape[0]), keep)
    Akk = A[np.ix_(keep, keep)]
    if drop.size == 0:
        return Akk
    Akd = A[np.ix_(keep, drop)]
    Add = A[np.ix_(drop, drop)]
    out = Akk - Akd @ np.linalg.solve(Add, Akd.T)
    return 0.5 * (out + out.T)
