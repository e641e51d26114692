"""Group vectors summarizing each sensitive group's training ratings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GroupAssignment, GroupError


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class GroupVectors:
    a: np.ndarray
    b: np.ndarray
    method: str
    degenerate: tuple[bool, bool] = (False, False)

    def to_text(self) -> tuple[str, str]:
        return tuple("\n".join(f"{v:.17g}" for v in vec) + "\n" for vec in (self.a, self.b))


def _columns(R_train: np.ndarray, groups: GroupAssignment):
    if R_train.shape[1] != len(groups.s):
        raise ValueError(f"matrix has {R_train.shape[1]} users, assignment has {len(groups.s)}")
    A, B = groups.group_a, groups.group_b
    if len(A) == 0 or len(B) == 0:
        raise GroupError("both groups need at least one user")
    return R_train[:, A], R_train[:, B]


def mean_pool(R_train: np.ndarray, groups: GroupAssignment) -> GroupVectors:
    """Column mean of each group's training ratings (pass ``R * train_mask``)."""
    RA, RB = _columns(R_train, groups)
    return GroupVectors(RA.mean(axis=1), RB.mean(axis=1), "mean_pool")


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if len(nz) and v[nz[0]] < 0:
        return -v
    return v


def top_eigenvector(X: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000,
                    degeneracy_tol: float = 1e-10) -> tuple[np.ndarray, float, bool]:
    """Dominant eigenvector of C = Xc Xc^T / (n - 1), Xc the row-centered ``X``.

    ``X`` is items x samples. C is never formed; each product is computed as
    Xc (Xc^T v). Iteration stops once the extrapolated distance to the fixed
    point, d_k * r / (1 - r) with r = d_k / d_{k-1}, drops below ``tol / 10``.
    Returns (vector, eigenvalue, degenerate). When the top two eigenvalues
    agree to ``degeneracy_tol`` (relative) the direction is arbitrary, and
    e_1 is returned with ``degenerate=True``.
    """
    m, n = X.shape
    if n < 2:
        raise GroupError("a principal component needs at least two users")
    Xc = X - X.mean(axis=1, keepdims=True)
    denom = n - 1

    def matvec(v):
        return Xc @ (Xc.T @ v) / denom

    e1 = np.zeros(m)
    e1[0] = 1.0
    v = np.random.default_rng(0).standard_normal(m)
    v /= np.linalg.norm(v)
    w = matvec(v)
    if np.linalg.norm(w) == 0.0:
        return e1, 0.0, True
    prev_d = None
    d = np.inf
    for _ in range(max_iter):
        w = matvec(v)
        v_new = w / np.linalg.norm(w)
        if v_new @ v < 0:
            v_new = -v_new
        d = float(np.linalg.norm(v_new - v))
        v = v_new
        if d == 0.0:
            break
        if prev_d is not None and prev_d > 0:
            r = min(d / prev_d, 0.999999)
            if d * r / (1.0 - r) < 0.1 * tol and d < tol:
                break
        elif d < tol * 1e-3:
            break
        prev_d = d
    else:
        raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", d)
    lam = float(v @ matvec(v))
    if _second_eigenvalue(matvec, v, lam, m) >= lam * (1.0 - degeneracy_tol):
        return e1, lam, True
    return _sign_normalize(v), lam, False


def _second_eigenvalue(matvec, v1: np.ndarray, lam1: float, m: int, iters: int = 200) -> float:
    """Rayleigh-quotient estimate of the next eigenvalue after deflating v1."""
    if m < 2:
        return -np.inf
    u = np.random.default_rng(1).standard_normal(m)
    u -= (u @ v1) * v1
    nu = np.linalg.norm(u)
    if nu == 0.0:
        return -np.inf
    u /= nu
    mu = float(u @ matvec(u))
    for _ in range(iters):
        w = matvec(u)
        w -= (w @ v1) * v1
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        u = w / nw
        mu_new = float(u @ matvec(u))
        if abs(mu_new - mu) <= 1e-14 * max(abs(lam1), 1e-300):
            return mu_new
        mu = mu_new
    return mu


def pca_first_pc(R_train: np.ndarray, groups: GroupAssignment, tol: float = 1e-8,
                 max_iter: int = 10_000) -> GroupVectors:
    """First principal component of each group's item-by-item covariance."""
    RA, RB = _columns(R_train, groups)
    a, _, deg_a = top_eigenvector(RA, tol, max_iter)
    b, _, deg_b = top_eigenvector(RB, tol, max_iter)
    return GroupVectors(a, b, "pca", (deg_a, deg_b))


def build_group_vectors(R_train: np.ndarray, groups: GroupAssignment, method: str) -> GroupVectors:
    if method == "mean_pool":
        return mean_pool(R_train, groups)
    if method == "pca":
        return pca_first_pc(R_train, groups)
    raise ValueError(f"unknown group-vector method {method!r}")


def counterfactual_targets(groups: GroupAssignment, vectors: GroupVectors) -> np.ndarray:
    """Items x users matrix whose column j is the *other* group's vector."""
    if len(vectors.a) != len(vectors.b):
        raise ValueError("group vectors differ in length")
    G = np.empty((len(vectors.a), len(groups.s)))
    G[:, groups.s == 0] = vectors.b[:, None]
    G[:, groups.s == 1] = vectors.a[:, None]
    return G
