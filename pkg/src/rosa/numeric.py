"""Dense linear algebra and Gaussian special functions.

Matrices are plain ``numpy.ndarray`` objects in float64. The storage layout is
the array's own C/F flag; ``W.T`` is the layout relabel (same buffer, swapped
dimensions). Vectors are 1-D arrays.
"""

import math

import numpy as np

from rosa import _kernels
from rosa.errors import ConvergenceError, InputError

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_vector(x, name="vector"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"{name} must be 1-D, got shape {x.shape}")
    return x


def gemv_dense(w, x):
    """Return ``y = W x`` with each ``y[i]`` summed over ``j`` in ascending order.

    The result is bitwise identical for row-major and column-major ``W``.
    """
    w = as_matrix(w, "W")
    x = as_vector(x, "x")
    if w.shape[1] != x.shape[0]:
        raise InputError(f"W has {w.shape[1]} columns but x has dimension {x.shape[0]}")
    out = np.empty(w.shape[0])
    x = np.ascontiguousarray(x)
    if w.flags.f_contiguous and not w.flags.c_contiguous:
        return _kernels.dense_columns(w, x, out)
    return _kernels.dense_rows(np.ascontiguousarray(w), x, out)


def _round_robin(n):
    """Pairings for one cyclic Jacobi sweep: n-1 rounds of disjoint (p, q) pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_norm(a):
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs that are rotated simultaneously. Iteration stops once the
    off-diagonal Frobenius norm is at most ``tol * ||A||_F``.

    Returns:
        (eigvals, eigvecs): eigenvalues in descending order and the matching
        orthonormal eigenvectors as columns. Each eigenvector is signed so its
        largest-magnitude entry is positive.

    Raises:
        InputError: ``a`` is not square or not symmetric within 1e-10 relative.
        ConvergenceError: the sweep cap was reached first.
    """
    a = as_matrix(a, "A")
    n, m = a.shape
    if n != m:
        raise InputError(f"matrix must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix has non-finite entries")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale > 0 and float(np.max(np.abs(a - a.T))) > 1e-10 * scale:
        raise InputError("matrix is not symmetric")

    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    if n > 1 and norm > 0:
        rounds = _round_robin(n)
        for _ in range(max_sweeps):
            if _off_norm(a) <= tol * norm:
                break
            for p, q in rounds:
                apq = a[p, q]
                active = apq != 0.0
                if not np.any(active):
                    continue
                p, q, apq = p[active], q[active], apq[active]
                with np.errstate(over="ignore"):
                    # overflowing theta**2 gives t = 0: the pair is already negligible
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t[theta == 0.0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                rp, rq = a[p, :], a[q, :]
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p], a[:, q]
                a[:, p] = cp * c - cq * s
                a[:, q] = cp * s + cq * c
                a[p, q] = 0.0
                a[q, p] = 0.0

                vp, vq = v[:, p], v[:, q]
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
        else:
            off = _off_norm(a)
            if off > tol * norm:
                raise ConvergenceError(
                    f"Jacobi did not converge in {max_sweeps} sweeps", residual=off / norm
                )

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivots, np.arange(n)] < 0, -1.0, 1.0)
    return w, v * signs


def std_normal_pdf(t):
    return INV_SQRT_2PI * math.exp(-0.5 * t * t)


def std_normal_cdf(t):
    return 0.5 * math.erfc(-t / SQRT2)


# Rational approximation coefficients (P. J. Acklam), relative error ~1.15e-9.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _initial_guess(u):
    # u <= 0.5 here
    if u < _P_LOW:
        q = math.sqrt(-2.0 * math.log(u))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    q = u - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def std_normal_inv_cdf(u):
    """Quantile of the standard normal distribution.

    A rational initial guess is polished with two Newton steps against the
    erfc-based CDF. The lower half is computed directly and the upper half by
    reflection, which keeps ``inv_cdf(u) == -inv_cdf(1 - u)`` exact whenever
    ``1 - u`` is computed in floating point.
    """
    u = float(u)
    if not 0.0 < u < 1.0:
        raise InputError(f"probability must lie in (0, 1), got {u}")
    if u > 0.5:
        return -std_normal_inv_cdf(1.0 - u)
    if u == 0.5:
        return 0.0
    x = _initial_guess(u)
    for _ in range(2):
        x -= (std_normal_cdf(x) - u) / std_normal_pdf(x)
    return x


def rmsnorm(x, gain, eps=1e-6):
    """RMS normalization along the last axis, scaled by ``gain``."""
    x = np.asarray(x, dtype=np.float64)
    gain = as_vector(gain, "gain")
    if x.shape[-1] != gain.shape[0]:
        raise InputError(f"activation dim {x.shape[-1]} != gain dim {gain.shape[0]}")
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x / rms)


def random_orthogonal(n, rng):
    """Haar-distributed orthogonal matrix via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def orthogonality_error(q):
    """Frobenius norm of ``Q^T Q - I``."""
    q = as_matrix(q, "Q")
    return float(np.linalg.norm(q.T @ q - np.eye(q.shape[1])))
