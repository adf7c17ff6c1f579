"""Offline work done before serving: activations, k-means, rotations, folding, grouping."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, prune_corpus
from .engine import BASELINE, forward, important_sets
from .model import FoldedModel, RotationSet, ToyModel
from .tensor import as_matrix, matmul, svd

log = logging.getLogger(__name__)


class InsufficientSamples(ValueError):
    pass


@dataclass
class ActivationBank:
    """Per (layer, head) q/k/v rows collected over every corpus token."""

    q: list[list[np.ndarray]]
    k: list[list[np.ndarray]]
    v: list[list[np.ndarray]]

    @property
    def n_rows(self) -> int:
        return self.q[0][0].shape[0]

    def select(self, rows) -> "ActivationBank":
        pick = lambda grid: [[m[rows] for m in heads] for heads in grid]
        return ActivationBank(pick(self.q), pick(self.k), pick(self.v))


def collect_activations(model: ToyModel, corpus: Corpus | list) -> ActivationBank:
    """Uncompressed forward over every sequence; keep the per-head q, k, v rows."""
    seqs = corpus.sequences() if isinstance(corpus, Corpus) else list(corpus)
    if isinstance(corpus, Corpus) and corpus.vocab > model.vocab:
        raise ValueError(f"corpus vocabulary {corpus.vocab} exceeds model vocabulary {model.vocab}")
    seqs = [s for s in seqs if len(s)]
    if not seqs:
        raise ValueError("no tokens")
    nl, nh = model.n_layers, model.n_heads
    parts = {key: [[[] for _ in range(nh)] for _ in range(nl)] for key in "qkv"}
    for seq in seqs:
        res = forward(model, seq, mode=BASELINE, capture=True)
        for l in range(nl):
            for h in range(nh):
                for key in "qkv":
                    parts[key][l][h].append(res.captured[l][h][key])
    stack = lambda key: [[np.vstack(parts[key][l][h]) for h in range(nh)] for l in range(nl)]
    return ActivationBank(stack("q"), stack("k"), stack("v"))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_reduce(vectors, k: int, iters: int = 25, seed: int = 0, tol: float = 1e-9) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns the k centroids.

    An empty cluster is re-seeded at the point farthest from its own centroid.
    """
    x = as_matrix(vectors)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]])[:, 0])
    centroids = x[chosen].copy()

    for _ in range(iters):
        dist = _sq_dists(x, centroids)
        labels = dist.argmin(1)
        new = np.zeros_like(centroids)
        counts = np.bincount(labels, minlength=k)
        np.add.at(new, labels, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            own = dist[np.arange(n), labels]
            for j in np.flatnonzero(~nonempty):
                far = int(own.argmax())
                new[j] = x[far]
                own[far] = -1.0
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    return centroids


def compute_rotation_qk(q_rows, k_rows) -> tuple[np.ndarray, np.ndarray]:
    """Right singular vectors of [Q; K], so one rotation serves both."""
    q_rows, k_rows = as_matrix(q_rows), as_matrix(k_rows)
    if q_rows.shape[1] != k_rows.shape[1]:
        raise ValueError(f"column counts differ: {q_rows.shape[1]} vs {k_rows.shape[1]}")
    stacked = np.vstack([q_rows, k_rows])
    if stacked.shape[0] < stacked.shape[1]:
        raise InsufficientSamples(f"insufficient samples: {stacked.shape[0]} rows for "
                                  f"{stacked.shape[1]} dimensions")
    res = svd(stacked)
    return res.r_mat, res.sigma


def compute_rotation_vl(v_rows, w_l_head) -> tuple[np.ndarray, np.ndarray]:
    """Same as the QK pair on [V; W_L^h] with W_L^h laid out d x head_dim."""
    return compute_rotation_qk(v_rows, w_l_head)


def _head_rotations(bank: ActivationBank, model: ToyModel, l: int, h: int, k: int | None,
                    iters: int, seed: int):
    q, kk, v = bank.q[l][h], bank.k[l][h], bank.v[l][h]
    if k is not None:
        n = q.shape[0]
        kk_eff = min(k, n)
        sub = seed + 7919 * (l * model.n_heads + h)
        q = kmeans_reduce(q, kk_eff, iters, sub)
        kk = kmeans_reduce(kk, kk_eff, iters, sub + 1)
        v = kmeans_reduce(v, kk_eff, iters, sub + 2)
    r_qk, sv_qk = compute_rotation_qk(q, kk)
    r_vl, sv_vl = compute_rotation_vl(v, model.wl_head(l, h))
    return r_qk, sv_qk, r_vl, sv_vl


def rotations_from_bank(bank: ActivationBank, model: ToyModel, k: int | None = None,
                        iters: int = 25, seed: int = 0, workers: int = 1) -> RotationSet:
    """Rotations for every (layer, head); ``k=None`` skips k-means.

    Head tasks share nothing, so ``workers > 1`` gives the same result.
    """
    nl, nh = model.n_layers, model.n_heads
    jobs = [(l, h) for l in range(nl) for h in range(nh)]
    run = lambda lh: _head_rotations(bank, model, lh[0], lh[1], k, iters, seed)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    grid = lambda i: [[results[l * nh + h][i] for h in range(nh)] for l in range(nl)]
    return RotationSet(grid(0), grid(2), grid(1), grid(3),
                       meta={"kmeans_k": k, "kmeans_iters": iters, "seed": seed,
                             "bank_rows": bank.n_rows})


def default_k(n_rows: int) -> int:
    return max(1, min(4096, n_rows // 4))


def build_rotations(model: ToyModel, corpus: Corpus, prune: float = 0.5, kmeans_k: int | None = -1,
                    iters: int = 25, seed: int = 0, workers: int = 1) -> RotationSet:
    """Prune per topic, collect activations, reduce by k-means, then SVD per head.

    ``kmeans_k=-1`` picks the default size, ``None`` disables clustering.
    """
    pruned = prune_corpus(corpus, prune, seed) if prune > 0 else corpus
    bank = collect_activations(model, pruned)
    k = default_k(bank.n_rows) if kmeans_k == -1 else kmeans_k
    log.info("rotations: %d activation rows, k=%s", bank.n_rows, k)
    rot = rotations_from_bank(bank, model, k, iters, seed, workers)
    rot.meta.update({"prune": prune, "dims": model.dims(),
                     "sv_below_1": singular_value_profile(rot, 1.0)})
    return rot


def fold_parameters(model: ToyModel, rotations: RotationSet, atol: float = 1e-8) -> FoldedModel:
    """Multiply every head's rotation into W_Q, W_K, W_V and the rows of W_L."""
    if (rotations.n_layers, rotations.n_heads) != (model.n_layers, model.n_heads):
        raise ValueError(f"rotations cover {rotations.n_layers}x{rotations.n_heads} (layer x head), "
                         f"model has {model.n_layers}x{model.n_heads}")
    err = rotations.max_orthogonality_error()
    if err > atol:
        raise ValueError(f"rotation matrices are not orthogonal (max |R^T R - I| = {err:.2e})")
    dh = model.head_dim
    wq_r, wk_r, wv_r, wl_r = [], [], [], []
    for l in range(model.n_layers):
        r_qk, r_vl = rotations.r_qk[l], rotations.r_vl[l]
        for r in r_qk + r_vl:
            if r.shape != (dh, dh):
                raise ValueError(f"rotation shape {r.shape} != {(dh, dh)}")
        wq_r.append([matmul(model.wq[l][h], r_qk[h]) for h in range(model.n_heads)])
        wk_r.append([matmul(model.wk[l][h], r_qk[h]) for h in range(model.n_heads)])
        wv_r.append([matmul(model.wv[l][h], r_vl[h]) for h in range(model.n_heads)])
        blocks = [matmul(r_vl[h].T, model.wl[l][h * dh:(h + 1) * dh]) for h in range(model.n_heads)]
        wl_r.append(np.vstack(blocks))
    return FoldedModel(model, wq_r, wk_r, wv_r, wl_r, rotations)


def repetition_ratio(a: set, b: set) -> float:
    return len(a & b) / len(a) if a else 1.0


def identify_layer_groups(importance_sets: list[set], threshold: float = 0.95) -> list[int]:
    """Greedy scan: a layer joins the open group while it shares > threshold of
    the group's first layer's set. Returns layer -> representative layer."""
    group_map = []
    first = 0
    for l, s in enumerate(importance_sets):
        if l > 0 and not repetition_ratio(importance_sets[first], s) > threshold:
            first = l
        group_map.append(first)
    return group_map


def calibrate_groups(model: ToyModel, sequences: list, fraction: float = 0.5,
                     threshold: float = 0.95, normalize: bool = True) -> list[int]:
    """Layer groups from the uncompressed model on calibration sequences.

    Token positions of all sequences are concatenated, so a set holds
    (sequence, position) pairs.
    """
    per_layer = [set() for _ in range(model.n_layers)]
    for si, seq in enumerate(sequences):
        res = forward(model, seq, mode=BASELINE, normalize=normalize)
        for l, s in enumerate(important_sets(res.state, fraction)):
            per_layer[l] |= {(si, t) for t in s}
    return identify_layer_groups(per_layer, threshold)


def singular_value_profile(rotations: RotationSet, threshold: float = 1.0) -> dict[str, float]:
    """Fraction of all QK and V-W_L singular values below ``threshold``."""
    out = {}
    for name, svs in (("qk", rotations.sv_qk), ("vl", rotations.sv_vl)):
        vals = np.concatenate([s for heads in svs for s in heads])
        out[name] = float(np.mean(vals < threshold)) if len(vals) else 0.0
    return out


def group_agreement(model: ToyModel, sequences: list, group_map, fraction: float = 0.5,
                    normalize: bool = True) -> float:
    """Share of (reused layer, token) pairs whose reused class equals the fresh one.

    Fresh classes come from each layer's own ranking in an uncompressed run.
    Returns 1.0 when no layer reuses another's classes.
    """
    agree = total = 0
    for seq in sequences:
        res = forward(model, seq, mode=BASELINE, normalize=normalize)
        sets = important_sets(res.state, fraction)
        n = len(seq)
        for l, rep in enumerate(group_map):
            if rep == l:
                continue
            fresh, reused = sets[l], sets[rep]
            agree += n - len(fresh ^ reused)
            total += n
    return agree / total if total else 1.0
