"""Dense matrix-algebra kernels used throughout the package.

Provides vec/vech half-vectorization operators, the expansion, contraction
and commutation matrices that relate them, projections, Moore-Penrose
pseudo-inverses with a shared rank tolerance, and a determinant taken over
nonzero eigenvalues only.
"""

import numpy as np

RANK_TOL = 1e-10
SYM_TOL = 1e-8


class SymmetryError(ValueError):
    """Raised when an operation requiring a symmetric matrix gets one that is not."""


def sym(a):
    """Symmetrize a square matrix, averaging away roundoff asymmetry."""
    a = np.asarray(a, dtype=float)
    return (a + a.T) / 2.0


def check_symmetric(a, tol=SYM_TOL, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SymmetryError(f"{name} must be square, got shape {a.shape}")
    if a.size:
        scale = max(1.0, float(np.abs(a).max()))
        if float(np.abs(a - a.T).max()) > tol * scale:
            raise SymmetryError(f"{name} is not symmetric within tolerance {tol}")
    return a


def vec(a):
    """Stack the columns of a matrix into a single vector."""
    return np.asarray(a, dtype=float).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of vec for a matrix of known shape."""
    v = np.asarray(v, dtype=float)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape length {v.size} into {rows}x{cols}")
    return v.reshape(rows, cols, order="F")


def vech(a):
    """Half-vectorize a symmetric matrix: lower triangle, column by column."""
    a = check_symmetric(a, name="vech input")
    i, j = np.tril_indices(a.shape[0])
    # tril_indices walks rows first; reorder column by column
    order = np.lexsort((i, j))
    return a[i[order], j[order]]


def unvech(v, r):
    """Rebuild the symmetric r x r matrix whose half-vectorization is v."""
    v = np.asarray(v, dtype=float)
    if v.size != r * (r + 1) // 2:
        raise ValueError(f"length {v.size} is not r(r+1)/2 for r={r}")
    out = np.zeros((r, r))
    k = 0
    for j in range(r):
        for i in range(j, r):
            out[i, j] = v[k]
            out[j, i] = v[k]
            k += 1
    return out


def _vech_index_pairs(r):
    pairs = []
    for j in range(r):
        for i in range(j, r):
            pairs.append((i, j))
    return pairs


def expansion_matrix(r):
    """E_r with vec(A) = E_r . vech(A) for symmetric A. Shape r^2 x r(r+1)/2."""
    cols = _vech_index_pairs(r)
    e = np.zeros((r * r, len(cols)))
    for k, (i, j) in enumerate(cols):
        e[j * r + i, k] = 1.0
        e[i * r + j, k] = 1.0
    return e


def contraction_matrix(r):
    """C_r with C_r . vec(A) = vech(A) for symmetric A.

    Built as the Moore-Penrose inverse of E_r, so C_r symmetrizes first:
    applied to a nonsymmetric matrix it returns vech((A + A')/2). This is
    the convention required by the identity E_r' E_r C_r = E_r'.
    """
    rows = _vech_index_pairs(r)
    c = np.zeros((len(rows), r * r))
    for k, (i, j) in enumerate(rows):
        if i == j:
            c[k, j * r + i] = 1.0
        else:
            c[k, j * r + i] = 0.5
            c[k, i * r + j] = 0.5
    return c


def commutation_matrix(m, n):
    """K_mn with K_mn . vec(A) = vec(A') for A of shape m x n."""
    k = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            k[i * n + j, j * m + i] = 1.0
    return k


def det0(a, rank_tol=RANK_TOL):
    """Determinant over the nonzero eigenvalues of a symmetric matrix.

    Eigenvalues below rank_tol times the largest magnitude count as zero.
    An all-zero (or empty) matrix has no nonzero eigenvalues and yields 1.
    """
    a = check_symmetric(a, name="det0 input")
    if a.size == 0:
        return 1.0
    w = np.linalg.eigvalsh(a)
    scale = float(np.abs(w).max())
    if scale == 0.0:
        return 1.0
    keep = np.abs(w) > rank_tol * scale
    if not keep.any():
        return 1.0
    return float(np.prod(w[keep]))


def logdet0(a, rank_tol=RANK_TOL):
    """log of det0 for a positive semidefinite matrix, summed over nonzero eigenvalues."""
    a = check_symmetric(a, name="logdet0 input")
    if a.size == 0:
        return 0.0
    w = np.linalg.eigvalsh(a)
    scale = float(np.abs(w).max())
    if scale == 0.0:
        return 0.0
    keep = w > rank_tol * scale
    if not keep.any():
        return 0.0
    return float(np.log(w[keep]).sum())


def pinv(a, rank_tol=RANK_TOL):
    """Moore-Penrose pseudo-inverse with the package-wide relative rank tolerance."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    return np.linalg.pinv(a, rcond=rank_tol)


def proj(b, rank_tol=RANK_TOL):
    """Orthogonal projection onto the column span of b."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise ValueError("proj expects a matrix")
    if b.size == 0:
        return np.zeros((b.shape[0], b.shape[0]))
    return sym(b @ pinv(b, rank_tol))


def qproj(b, rank_tol=RANK_TOL):
    """Orthogonal projection onto the orthogonal complement of the column span of b."""
    b = np.asarray(b, dtype=float)
    return np.eye(b.shape[0]) - proj(b, rank_tol)


def orth_complement(gamma, tol=SYM_TOL):
    """Orthonormal basis of the orthogonal complement of a semi-orthogonal basis.

    gamma must be r x u with orthonormal columns; the result is r x (r - u).
    The completion comes from a full QR factorization and is deterministic.
    """
    gamma = np.asarray(gamma, dtype=float)
    r, u = gamma.shape
    if u > r:
        raise ValueError(f"basis has more columns ({u}) than rows ({r})")
    if u and float(np.abs(gamma.T @ gamma - np.eye(u)).max()) > tol:
        raise ValueError("basis columns are not orthonormal")
    if u == r:
        return np.zeros((r, 0))
    if u == 0:
        return np.eye(r)
    q, _ = np.linalg.qr(gamma, mode="complete")
    comp = q[:, u:]
    # make the completion independent of QR sign quirks
    comp = comp - gamma @ (gamma.T @ comp)
    q2, rr = np.linalg.qr(comp)
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return q2 * signs


def eigh_fixed(a):
    """Symmetric eigendecomposition with deterministic eigenvector signs.

    Eigenvalues ascend; each eigenvector is flipped so its first entry of
    largest magnitude is positive.
    """
    a = check_symmetric(a, name="eigh input")
    w, v = np.linalg.eigh(a)
    for k in range(v.shape[1]):
        idx = int(np.argmax(np.abs(v[:, k])))
        if v[idx, k] < 0:
            v[:, k] = -v[:, k]
    return w, v
