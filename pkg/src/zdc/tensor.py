"""Dense float64 linear algebra used by the rest of the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
helpers here fix summation order and algorithm choice so that results are
bit-stable across runs and across data layouts (row-splitting an operand
never changes the value of any output entry).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ZDCM"


class ShapeError(ValueError):
    pass


class SvdConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"one-sided Jacobi did not converge after {sweeps} sweeps "
                         f"(residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with left-to-right accumulation over the inner index.

    Entry (i, j) is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)`` exactly as a
    scalar triple loop computes it. Each entry depends only on row i of ``a``
    and column j of ``b``, so slicing either operand commutes with the product
    bit for bit.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    r_mat: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.r_mat.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: every unordered pair appears exactly once per sweep,
    # pairs within a round are disjoint so they can be rotated together.
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = idx[i], idx[m - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    out = u.copy()
    cand = iter(range(m))
    for j in range(u.shape[1]):
        if good[j]:
            continue
        for e in cand:
            v = np.zeros(m)
            v[e] = 1.0
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                basis.append(v)
                out[:, j] = v
                break
    return out


def svd(a, tol: float = 1e-12, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ r_mat.T`` by one-sided Jacobi.

    Column pairs are orthogonalized in a fixed round-robin order until every
    pair satisfies ``|a_p . a_q| <= tol * |a_p| |a_q|``.
    """
    a = as_matrix(a)
    if min(a.shape) < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input has non-finite entries")
    m, n = a.shape
    if m < n:
        t = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=t.r_mat, sigma=t.sigma, r_mat=t.u, sweeps=t.sweeps)

    work = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    residual = 0.0
    sweeps = 0
    converged = n == 1
    while not converged:
        if sweeps >= max_sweeps:
            raise SvdConvergenceError(residual, sweeps)
        sweeps += 1
        residual = 0.0
        rotated = False
        for ps, qs in rounds:
            wp, wq = work[:, ps], work[:, qs]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            residual = max(residual, float(ratio.max(initial=0.0)))
            hit = (ratio > tol) & (gamma != 0)
            if not hit.any():
                continue
            rotated = True
            g = np.where(hit, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(hit, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(hit, c * t, 0.0)
            work[:, ps], work[:, qs] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, ps], v[:, qs]
            v[:, ps], v[:, qs] = c * vp - s * vq, s * vp + c * vq
        converged = not rotated

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    good = sigma > 0
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sigma[good]
    if not good.all():
        u = _complete_basis(u, good)
    return SvdResult(u=u, sigma=sigma, r_mat=v, sweeps=sweeps)


def softmax_rows(a, causal: bool = False, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax returning the probabilities and the raw row denominators.

    ``denoms[i]`` is ``sum_k exp(a[i, k])`` over visible k, computed with a
    max shift and rescaled by ``exp(max)``. With ``causal`` the last row sees
    every column and earlier rows see one column fewer each (this covers both
    square prefill scores and the trailing rows of a decode step).
    """
    a = as_matrix(a)
    rows, cols = a.shape
    visible = np.ones((rows, cols), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    if causal:
        offset = cols - rows
        visible &= np.arange(cols)[None, :] <= (np.arange(rows)[:, None] + offset)
    if rows and not visible.any(axis=1).all():
        bad = int(np.flatnonzero(~visible.any(axis=1))[0])
        raise ValueError(f"row {bad} is fully masked")
    shifted = np.where(visible, a, -np.inf)
    top = shifted.max(axis=1, keepdims=True)
    ex = np.where(visible, np.exp(shifted - top), 0.0)
    partial = ex.sum(axis=1, keepdims=True)
    probs = ex / partial
    denoms = (partial * np.exp(top))[:, 0]
    return probs, denoms


def kept_width(n: int, p: float) -> int:
    """Number of leading dimensions kept when dropping a fraction ``p`` of ``n``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop ratio must lie in [0, 1), got {p}")
    # round() absorbs float noise such as (1 - 0.7) * 10 = 3.0000000000000004
    return max(1, math.ceil(round((1.0 - p) * n, 9)))


def truncate_columns(a, p: float) -> np.ndarray:
    a = as_matrix(a)
    return a[:, :kept_width(a.shape[1], p)].copy()


def pad_columns(a, width: int) -> np.ndarray:
    a = as_matrix(a)
    if a.shape[1] > width:
        raise ShapeError(f"cannot pad {a.shape[1]} columns down to {width}")
    out = np.zeros((a.shape[0], width))
    out[:, :a.shape[1]] = a
    return out


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# ---- serialization -------------------------------------------------------

def write_matrix(path, a) -> None:
    a = as_matrix(a)
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def matrix_to_json(a) -> dict:
    a = as_matrix(a)
    return {"rows": a.shape[0], "cols": a.shape[1], "data": a.ravel().tolist()}


def matrix_from_json(obj) -> np.ndarray:
    if isinstance(obj, str):
        obj = json.loads(obj)
    rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    if len(data) != rows * cols:
        raise ValueError(f"json matrix has {len(data)} values for {rows}x{cols}")
    return np.asarray(data, dtype=np.float64).reshape(rows, cols)
