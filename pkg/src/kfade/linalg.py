"""Dense float64 linear algebra used by the curvature code.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64`` stored in
C (row-major) order. This module adds the few operations the rest of the
package needs on top of numpy: a checked matrix product, a symmetric
eigendecomposition with a deterministic output convention, the
Kronecker-structured basis-change product, and seeded random streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12


class LinalgError(ValueError):
    """Raised on malformed inputs to the linear algebra helpers."""


class ConvergenceError(ArithmeticError):
    """Raised when an iterative eigensolver exceeds its sweep budget."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (copying only if needed)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise LinalgError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SymEigen:
    """Spectral decomposition ``m = Q diag(eigenvalues) Q^T``.

    Eigenvalues are sorted ascending and the columns of ``Q`` are the
    matching unit eigenvectors.
    """

    Q: np.ndarray
    eigenvalues: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.Q * self.eigenvalues) @ self.Q.T


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError("matrix has non-finite entries")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > SYMMETRY_TOL:
        raise LinalgError(f"matrix is not symmetric (max |m - m^T| = {asym:.3e})")
    return m


def _canonical_signs(q: np.ndarray) -> np.ndarray:
    # Flip each column so its largest-magnitude entry is positive.
    if q.size == 0:
        return q
    idx = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[idx, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return q * signs


def sym_eigen(m: np.ndarray, method: str = "lapack") -> SymEigen:
    """Eigendecomposition of a symmetric matrix.

    ``method="lapack"`` calls the LAPACK tridiagonal solver behind
    ``numpy.linalg.eigh``; ``method="jacobi"`` runs the pure-numpy cyclic
    Jacobi solver. Both return ascending eigenvalues with eigenvector signs
    fixed so that each column's largest-magnitude entry is positive.
    """
    m = _check_symmetric(m)
    # Exact symmetrization so both triangles agree bit-for-bit.
    m = 0.5 * (m + m.T)
    if method == "lapack":
        try:
            w, q = np.linalg.eigh(m)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
            raise ConvergenceError(str(exc)) from exc
    elif method == "jacobi":
        w, q = jacobi_eigen(m)
    else:
        raise LinalgError(f"unknown eigensolver {method!r}")
    return SymEigen(Q=np.ascontiguousarray(_canonical_signs(q)), eigenvalues=w)


def jacobi_eigen(m: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int | None = None):
    """Cyclic Jacobi eigenvalue iteration for a symmetric matrix.

    Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
    drops below ``tol * max(1, ||m||_F)``. The sweep cap defaults to
    ``100 * n``. Returns ``(eigenvalues, Q)`` sorted ascending.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    if max_sweeps is None:
        max_sweeps = 100 * max(n, 1)
    scale = max(1.0, float(np.linalg.norm(a)))

    def off_norm(x):
        # direct sum over off-diagonal entries; ||x||^2 - ||diag||^2 cancels
        return float(np.linalg.norm(x - np.diag(np.diag(x))))

    sweeps = 0
    while off_norm(a) > tol * scale:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = a[:, p].copy()
                rot_q = a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p = a[p, :].copy()
                rot_q = a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def kron_quadratic_apply(
    Qr: np.ndarray, Ql: np.ndarray, scale: np.ndarray, V: np.ndarray
) -> np.ndarray:
    """Apply ``(Ql kron Qr) diag(vec(scale)) (Ql kron Qr)^T`` to ``vec(V)``.

    ``vec`` is row-major, so the product is carried out on matrices as
    ``Ql @ ((Ql^T V Qr) * scale) @ Qr^T`` without ever forming the
    Kronecker product.
    """
    Qr, Ql, scale, V = (as_tensor(t) for t in (Qr, Ql, scale, V))
    d_out, d_in = V.shape if V.ndim == 2 else (None, None)
    if V.ndim != 2 or Ql.shape != (d_out, d_out) or Qr.shape != (d_in, d_in):
        raise LinalgError(
            f"shape mismatch: V {V.shape}, Ql {Ql.shape}, Qr {Qr.shape}"
        )
    if scale.shape != V.shape:
        raise LinalgError(f"scale shape {scale.shape} != V shape {V.shape}")
    return Ql @ ((Ql.T @ V @ Qr) * scale) @ Qr.T


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator: PCG64 keyed by ``(seed, *stream)`` via SeedSequence.

    Distinct ``stream`` tuples give independent sub-streams for the same run
    seed (initialisation, shuffling, label sampling, ...).
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
