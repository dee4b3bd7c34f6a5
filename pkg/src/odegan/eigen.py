"""Dense eigenvalues of small real matrices.

Householder reduction to upper Hessenberg form followed by the Francis
double-shift QR iteration with deflation on negligible subdiagonals. A
subdiagonal entry counts as negligible once it drops below machine epsilon
times the magnitude of its diagonal neighbours, which in practice gives
eigenvalues accurate to about 1e-10 relative to ``||H||`` for the
well-conditioned matrices used here.
"""

from __future__ import annotations

import numpy as np

MAX_DIM = 512
EPS = np.finfo(np.float64).eps


class EigenConvergenceError(RuntimeError):
    pass


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Orthogonally similar upper Hessenberg matrix (Householder reflections)."""
    h = np.array(a, dtype=np.float64, copy=True)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += np.copysign(alpha, x[0]) if x[0] != 0 else alpha
        v /= np.linalg.norm(v)
        h[k + 1:, k:] -= 2.0 * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def _hqr(h: np.ndarray, max_iter_per_eig: int) -> np.ndarray:
    n = h.shape[0]
    wr = np.zeros(n)
    wi = np.zeros(n)
    anorm = np.abs(h).sum() if n else 0.0
    nn = n - 1
    t = 0.0
    p = q = r = 0.0
    while nn >= 0:
        its = 0
        while True:
            # look for a single small subdiagonal element
            l = nn
            while l >= 1:
                s = abs(h[l - 1, l - 1]) + abs(h[l, l])
                if s == 0.0:
                    s = anorm
                if abs(h[l, l - 1]) <= EPS * s:
                    h[l, l - 1] = 0.0
                    break
                l -= 1
            x = h[nn, nn]
            if l == nn:
                # one root found
                wr[nn] = x + t
                wi[nn] = 0.0
                nn -= 1
                break
            y = h[nn - 1, nn - 1]
            w = h[nn, nn - 1] * h[nn - 1, nn]
            if l == nn - 1:
                # two roots found
                p = 0.5 * (y - x)
                q = p * p + w
                z = np.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + np.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z != 0.0:
                        wr[nn] = x - w / z
                    wi[nn - 1] = wi[nn] = 0.0
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1] = -z
                    wi[nn] = z
                nn -= 2
                break
            if its == max_iter_per_eig:
                raise EigenConvergenceError(
                    f"QR iteration did not converge after {its} iterations (active block ends at {nn})"
                )
            if its in (10, 20):
                # exceptional shift
                t += x
                for i in range(nn + 1):
                    h[i, i] -= x
                s = abs(h[nn, nn - 1]) + abs(h[nn - 1, nn - 2])
                y = x = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            # form shift and look for two consecutive small subdiagonal elements
            m = nn - 2
            while m >= l:
                z = h[m, m]
                r = x - z
                s = y - z
                p = (r * s - w) / h[m + 1, m] + h[m, m + 1]
                q = h[m + 1, m + 1] - z - r - s
                r = h[m + 2, m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(h[m, m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(h[m - 1, m - 1]) + abs(z) + abs(h[m + 1, m + 1]))
                if u <= EPS * v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                h[i, i - 2] = 0.0
                if i != m + 2:
                    h[i, i - 3] = 0.0
            # double QR step on rows l..nn and columns m..nn
            k = m
            while k <= nn - 1:
                if k != m:
                    p = h[k, k - 1]
                    q = h[k + 1, k - 1]
                    r = h[k + 2, k - 1] if k != nn - 1 else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = np.copysign(np.sqrt(p * p + q * q + r * r), p)
                if s != 0.0:
                    if k == m:
                        if l != m:
                            h[k, k - 1] = -h[k, k - 1]
                    else:
                        h[k, k - 1] = -s * x
                    p += s
                    x = p / s
                    y = q / s
                    z = r / s
                    q /= p
                    r /= p
                    # row modification
                    cols = slice(k, nn + 1)
                    pv = h[k, cols] + q * h[k + 1, cols]
                    if k != nn - 1:
                        pv += r * h[k + 2, cols]
                        h[k + 2, cols] -= pv * z
                    h[k + 1, cols] -= pv * y
                    h[k, cols] -= pv * x
                    # column modification
                    rows = slice(l, min(nn, k + 3) + 1)
                    pv = x * h[rows, k] + y * h[rows, k + 1]
                    if k != nn - 1:
                        pv += z * h[rows, k + 2]
                        h[rows, k + 2] -= pv * r
                    h[rows, k + 1] -= pv * q
                    h[rows, k] -= pv
                k += 1
    return wr + 1j * wi


def eigvals(a, max_iter_per_eig: int = 60) -> np.ndarray:
    """Eigenvalues of a real square matrix as a complex array (unordered)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"need a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > MAX_DIM:
        raise ValueError(f"dimension {n} exceeds dense limit {MAX_DIM}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=np.complex128)
    return _hqr(hessenberg(a), max_iter_per_eig)
