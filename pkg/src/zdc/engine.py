"""Online inference path: compressed QKV generation, attention, KV cache, importance.

The zdc modes run on a :class:`FoldedModel`. Compression is nothing more than
using the leading columns of the folded projection weights, and
decompression is nothing more than using the leading rows of each head's
block of the folded post-attention linear, so neither step exists as a
separate operation.

Per layer and per request the tokens are split into important and
unimportant classes. Unimportant tokens keep fewer rotated dimensions; their
vectors are zero-filled up to the important width, which makes every dot
product equal to the one over their kept dimensions. A representative layer
ranks tokens by the softmax row denominators of a first scoring pass at the
unimportant width (every token has those dimensions), then the trailing
dimensions of important tokens are added onto the same accumulators. Other
layers of the group reuse the representative's classes.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .model import FoldedModel
from .plan import CompressionPlan
from .tensor import ShapeError, as_matrix, kept_width, matmul, softmax_rows, truncate_columns

BASELINE = "baseline"
ZDC = "zdc"
ZO = "zdc/ZO"
DT = "zdc/DT"
DL = "zdc/DL"
LT = "zdc/LT"
MODES = (BASELINE, ZDC, ZO, DT, DL, LT)

FLOP_CATEGORIES = ("qkv", "attn", "linear", "mlp", "head", "compress", "decompress", "importance")


class FlopLedger:
    """Multiply-accumulate and exp counts per category; safe to share across threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = dict.fromkeys(FLOP_CATEGORIES, 0)

    def add(self, category: str, n) -> None:
        with self._lock:
            self.counts[category] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict:
        return dict(self.counts, total=self.total)


@dataclass
class Ablation:
    """Knobs for the ablation modes.

    ``dt_drop`` is the shared ratio under /DT (None keeps each pair's
    important ratio for every token); ``dl_g`` the uniform important fraction
    under /DL and ``dl_p`` optional explicit (p_qk_i, p_qk_u, p_vl_i, p_vl_u).
    """

    dt_drop: float | None = 0.35
    dl_g: float = 0.5
    dl_p: tuple[float, float, float, float] | None = None


def effective_plan(plan: CompressionPlan, mode: str, ablation: Ablation | None = None) -> CompressionPlan:
    ab = ablation or Ablation()
    if mode == DT:
        if ab.dt_drop is None:
            return CompressionPlan(plan.g, plan.p_qk_i, plan.p_qk_i, plan.p_vl_i, plan.p_vl_i, plan.group_map)
        p = ab.dt_drop
        return CompressionPlan(plan.g, p, p, p, p, plan.group_map)
    if mode == DL:
        ps = ab.dl_p or plan.ratios()
        return CompressionPlan((ab.dl_g,) * plan.n_layers, *ps, group_map=plan.group_map)
    return plan


# ---- importance ---------------------------------------------------------------

class ImportanceState:
    """Per-layer accumulated denominator scores and write-time token classes."""

    def __init__(self, n_layers: int):
        self.scores = [np.zeros(0) for _ in range(n_layers)]
        self.classes = [np.zeros(0, dtype=bool) for _ in range(n_layers)]

    def n_tokens(self, layer: int) -> int:
        return len(self.scores[layer])

    def ranking(self, layer: int) -> np.ndarray:
        """Token indices from most to least important; lower index wins ties."""
        s = self.scores[layer]
        return np.lexsort((np.arange(len(s)), -s))


def n_important(g: float, n: int) -> int:
    return min(n, max(1, math.ceil(round(g * n, 9)))) if n else 0


def token_importance_update(state: ImportanceState, layer: int, denoms, normalize: bool = True,
                            start: int | None = None, counts=None) -> ImportanceState:
    """Add ``sum_h denoms[h, i]`` to the score of token ``start + i``.

    ``denoms`` is (heads x tokens). With ``normalize`` each denominator is
    first divided by its row's visible key count (causal: start + i + 1).
    """
    denoms = np.atleast_2d(np.asarray(denoms, dtype=np.float64))
    n = denoms.shape[1]
    cur = state.scores[layer]
    start = len(cur) if start is None else start
    if start + n > len(cur):
        grown = np.zeros(start + n)
        grown[:len(cur)] = cur
        cur = grown
    if counts is None:
        counts = np.arange(start + 1, start + n + 1, dtype=np.float64)
    for row in denoms:
        cur[start:start + n] += row / counts if normalize else row
    state.scores[layer] = cur
    return state


def classify_tokens(state: ImportanceState, layer: int, g_l: float, group_map=None) -> np.ndarray:
    """Fresh important/unimportant split of all tokens seen at ``layer``.

    Layers that are not their group's representative return the
    representative's recorded classes unchanged.
    """
    if not 0.0 < g_l <= 1.0:
        raise ValueError(f"g must lie in (0, 1], got {g_l}")
    rep = layer if group_map is None else group_map[layer]
    if rep != layer:
        return state.classes[rep].copy()
    n = state.n_tokens(layer)
    out = np.zeros(n, dtype=bool)
    out[state.ranking(layer)[:n_important(g_l, n)]] = True
    return out


def explicit_importance(q, k, scale: float, causal: bool = True, normalize: bool = True) -> np.ndarray:
    """Recompute one head's per-row sum of exp(scores) from the raw vectors."""
    scores = matmul(q, as_matrix(k).T) * scale
    _, denoms = softmax_rows(scores, causal=causal)
    if normalize:
        denoms = denoms / np.arange(scores.shape[1] - scores.shape[0] + 1, scores.shape[1] + 1)
    return denoms


def important_sets(state: ImportanceState, fraction: float) -> list[set[int]]:
    """Top-``fraction`` token sets per layer from accumulated scores."""
    out = []
    for layer in range(len(state.scores)):
        k = n_important(fraction, state.n_tokens(layer))
        out.append(set(int(i) for i in state.ranking(layer)[:k]))
    return out


# ---- KV cache -----------------------------------------------------------------

class CompressedKVCache:
    """Per (layer, head) K and V rows stored at their class width."""

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, plan: CompressionPlan):
        self.n_layers, self.n_heads, self.head_dim = n_layers, n_heads, head_dim
        self.plan = plan
        self.widths = plan.widths(head_dim)
        self._k = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._v = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self.important = [[] for _ in range(n_layers)]
        self.floats = 0
        self._lock = threading.Lock()

    def n_tokens(self, layer: int = 0) -> int:
        return len(self._k[layer][0])

    def write(self, layer: int, head: int, token: int, k_row, v_row, important: bool) -> None:
        wk = self.widths["qk_i" if important else "qk_u"]
        wv = self.widths["vl_i" if important else "vl_u"]
        k_row = np.asarray(k_row, dtype=np.float64).ravel()
        v_row = np.asarray(v_row, dtype=np.float64).ravel()
        if len(k_row) != wk or len(v_row) != wv:
            cls = "important" if important else "unimportant"
            raise ShapeError(f"{cls} token expects widths ({wk}, {wv}), got ({len(k_row)}, {len(v_row)})")
        if token != len(self._k[layer][head]):
            raise ValueError(f"token {token} written out of order at layer {layer} head {head}")
        self._k[layer][head].append(k_row.copy())
        self._v[layer][head].append(v_row.copy())
        if head == 0:
            self.important[layer].append(bool(important))
        with self._lock:
            self.floats += wk + wv

    def read(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        """K and V at the important widths, missing trailing dims filled with 0."""
        rows_k, rows_v = self._k[layer][head], self._v[layer][head]
        k = np.zeros((len(rows_k), self.widths["qk_i"]))
        v = np.zeros((len(rows_v), self.widths["vl_i"]))
        for i, (kr, vr) in enumerate(zip(rows_k, rows_v)):
            k[i, :len(kr)] = kr
            v[i, :len(vr)] = vr
        return k, v


def expected_kvc_floats(classes_per_layer, n_heads: int, head_dim: int, plan: CompressionPlan) -> int:
    w = plan.widths(head_dim)
    total = 0
    for classes in classes_per_layer:
        n_imp = int(np.sum(classes))
        n_un = len(classes) - n_imp
        total += n_heads * (n_imp * (w["qk_i"] + w["vl_i"]) + n_un * (w["qk_u"] + w["vl_u"]))
    return total


# ---- single-head building blocks ---------------------------------------------

def qkv_generate_compressed(e, folded: FoldedModel, layer: int, head: int,
                            p_qk: float = 0.0, p_vl: float = 0.0):
    """Compressed q', k', v' straight from the column-dropped folded weights."""
    e = as_matrix(e)
    if e.shape[1] != folded.d_model:
        raise ShapeError(f"embedding width {e.shape[1]} != model dim {folded.d_model}")
    q = matmul(e, truncate_columns(folded.wq_r[layer][head], p_qk))
    k = matmul(e, truncate_columns(folded.wk_r[layer][head], p_qk))
    v = matmul(e, truncate_columns(folded.wv_r[layer][head], p_vl))
    return q, k, v


def attention_compressed(q, k, v, scale: float, causal: bool = True):
    """softmax(q k^T * scale) v on compressed operands; returns (o', row denominators).

    ``scale`` stays 1/sqrt(original head dim) whatever the kept width.
    """
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q width {q.shape[1]} != k width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    probs, denoms = softmax_rows(matmul(q, k.T) * scale, causal=causal)
    return matmul(probs, v), denoms


def linear_weight(folded: FoldedModel, layer: int, width: int) -> np.ndarray:
    """Leading ``width`` rows of every head block of the folded W_L, stacked."""
    dh = folded.head_dim
    wl = folded.wl_r[layer]
    return np.vstack([wl[h * dh:h * dh + width] for h in range(folded.n_heads)])


def linear_decompress(o_heads, folded: FoldedModel, layer: int, p_vl: float = 0.0) -> np.ndarray:
    o_heads = as_matrix(o_heads)
    width = kept_width(folded.head_dim, p_vl)
    if o_heads.shape[1] != width * folded.n_heads:
        raise ShapeError(f"head outputs have {o_heads.shape[1]} columns, expected "
                         f"{folded.n_heads} x {width}")
    return matmul(o_heads, linear_weight(folded, layer, width))


# ---- forward ------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    layer_outputs: list[np.ndarray]
    head_outputs: list[list[np.ndarray]]
    stats: dict
    cache: CompressedKVCache
    state: ImportanceState
    captured: list[list[dict]] | None = None


def _accumulate(out: np.ndarray, a: np.ndarray, b: np.ndarray, rows, cols, k0: int, k1: int) -> None:
    # Continues the left-to-right sums of matmul over inner indices k0..k1-1,
    # restricted to the given rows/cols of ``out``.
    if k1 <= k0 or not len(rows) or not len(cols):
        return
    sub = out[np.ix_(rows, cols)]
    for k in range(k0, k1):
        sub += np.multiply.outer(a[rows, k], b[k, cols])
    out[np.ix_(rows, cols)] = sub


class _Runner:
    def __init__(self, model, plan, mode, ablation, normalize, cache, state, capture):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        if mode == BASELINE:
            self.model = model.base if isinstance(model, FoldedModel) else model
            self.folded = None
        else:
            if not isinstance(model, FoldedModel):
                raise TypeError(f"mode {mode} needs a FoldedModel")
            self.folded = model
            self.model = model.base
        m = self.model
        if cache is not None:
            # continuing a request: the plan fixed at prefill time stays in force
            plan = cache.plan
        else:
            plan = plan or CompressionPlan.zero(m.n_layers)
            if plan.n_layers != m.n_layers:
                raise ValueError(f"plan has {plan.n_layers} layers, model has {m.n_layers}")
            if mode == BASELINE:
                plan = CompressionPlan(plan.g, group_map=plan.group_map)
            plan = effective_plan(plan, mode, ablation)
        bad = _range_violations(plan) + width_order_violations(plan, m.head_dim)
        if bad:
            raise ValueError("; ".join(bad))
        self.plan = plan
        self.normalize = normalize
        self.flops = FlopLedger()
        self.cache = cache or CompressedKVCache(m.n_layers, m.n_heads, m.head_dim, plan)
        self.state = state or ImportanceState(m.n_layers)
        self.capture = [[] for _ in range(m.n_layers)] if capture else None
        self.scale = 1.0 / math.sqrt(m.head_dim)

    # -- layers --

    def attn_baseline(self, l, x, pos0):
        m = self.model
        n, d, dh = x.shape[0], m.d_model, m.head_dim
        outs, denoms = [], []
        for h in range(m.n_heads):
            q = matmul(x, m.wq[l][h])
            k = matmul(x, m.wk[l][h])
            v = matmul(x, m.wv[l][h])
            self.flops.add("qkv", 3 * n * d * dh)
            k_past, v_past = self.cache.read(l, h)
            k_all, v_all = np.vstack([k_past, k]), np.vstack([v_past, v])
            nk = k_all.shape[0]
            probs, den = softmax_rows(matmul(q, k_all.T) * self.scale, causal=True)
            o = matmul(probs, v_all)
            self.flops.add("attn", n * nk * dh * 2 + n * nk)
            for i in range(n):
                self.cache.write(l, h, pos0 + i, k[i], v[i], True)
            if self.capture is not None:
                self.capture[l].append({"q": q, "k": k, "v": v})
            outs.append(o)
            denoms.append(den)
        token_importance_update(self.state, l, np.array(denoms), self.normalize, start=pos0)
        self.state.classes[l] = np.concatenate([self.state.classes[l], np.ones(n, dtype=bool)])
        o_cat = np.hstack(outs)
        o_l = matmul(o_cat, m.wl[l])
        self.flops.add("linear", n * d * d)
        return o_l, outs

    def attn_zdc(self, l, x, pos0):
        f, m, plan = self.folded, self.model, self.plan
        n, d, dh = x.shape[0], m.d_model, m.head_dim
        w = plan.widths(dh)
        wqi, wqu, wvi, wvu = w["qk_i"], w["qk_u"], w["vl_i"], w["vl_u"]
        zo = self.mode == ZO
        rep = plan.representative(l)
        n_tot = pos0 + n
        # ZO works at full head width throughout; trailing dims are zero.
        wq_work = dh if zo else wqi
        wv_work = dh if zo else wvi

        heads = []
        for h in range(m.n_heads):
            k_past, v_past = self.cache.read(l, h)
            if zo:
                full = [matmul(x, wm[l][h]) for wm in (f.wq_r, f.wk_r, f.wv_r)]
                self.flops.add("qkv", 3 * n * d * dh)
                self.flops.add("compress", 3 * n * dh * dh)
                head = [full[0][:, :wqu], full[1][:, :wqu], full[2][:, :wvu]]
            else:
                full = None
                head = [matmul(x, f.wq_r[l][h][:, :wqu]), matmul(x, f.wk_r[l][h][:, :wqu]),
                        matmul(x, f.wv_r[l][h][:, :wvu])]
                self.flops.add("qkv", n * d * (2 * wqu + wvu))
            heads.append({"k_past": k_past, "v_past": v_past, "full": full, "head": head})

        # head-width scores for every token; enough to rank a representative layer
        for hd in heads:
            q_h = hd["head"][0]
            k_h = np.vstack([hd["k_past"][:, :wqu], hd["head"][1]])
            hd["scores"] = matmul(q_h, k_h.T)
        self.flops.add("attn", m.n_heads * n * n_tot * wqu)

        if rep == l:
            denoms = []
            for hd in heads:
                _, den = softmax_rows(hd["scores"] * self.scale, causal=True)
                denoms.append(den)
            self.flops.add("attn", m.n_heads * n * n_tot)
            if self.mode == LT:
                denoms = []
                for hd in heads:
                    q_h = hd["head"][0]
                    k_h = np.vstack([hd["k_past"][:, :wqu], hd["head"][1]])
                    raw = explicit_importance(q_h, k_h, self.scale, causal=True, normalize=False)
                    denoms.append(raw)
                self.flops.add("importance", m.n_heads * (n * n_tot * wqu + n * n_tot))
            token_importance_update(self.state, l, np.array(denoms), self.normalize, start=pos0)
            fresh = classify_tokens(self.state, l, plan.g[l])
            imp_new = fresh[pos0:n_tot]
        else:
            if len(self.state.classes[rep]) < n_tot:
                raise RuntimeError(f"representative layer {rep} has no classes for layer {l}")
            imp_new = self.state.classes[rep][pos0:n_tot].copy()
        self.state.classes[l] = np.concatenate([self.state.classes[l][:pos0], imp_new])
        imp_all = self.state.classes[l]
        n_imp_new = int(imp_new.sum())
        n_imp_all = int(imp_all.sum())
        idx_new = np.flatnonzero(imp_new)
        idx_all = np.flatnonzero(imp_all)

        outs, denoms_final = [], []
        for h, hd in enumerate(heads):
            q = np.zeros((n, wq_work))
            k = np.zeros((n, wq_work))
            v = np.zeros((n, wv_work))
            q[:, :wqu], k[:, :wqu], v[:, :wvu] = hd["head"]
            if zo:
                fq, fk, fv = hd["full"]
                q[idx_new, wqu:wqi] = fq[idx_new, wqu:wqi]
                k[idx_new, wqu:wqi] = fk[idx_new, wqu:wqi]
                v[idx_new, wvu:wvi] = fv[idx_new, wvu:wvi]
                self.flops.add("decompress", 2 * (n_imp_new * wqi + (n - n_imp_new) * wqu) * dh
                               + (n_imp_new * wvi + (n - n_imp_new) * wvu) * dh)
            elif n_imp_new:
                xi = x[idx_new]
                if wqi > wqu:
                    q[idx_new, wqu:] = matmul(xi, f.wq_r[l][h][:, wqu:wqi])
                    k[idx_new, wqu:] = matmul(xi, f.wk_r[l][h][:, wqu:wqi])
                if wvi > wvu:
                    v[idx_new, wvu:] = matmul(xi, f.wv_r[l][h][:, wvu:wvi])
                self.flops.add("qkv", n_imp_new * d * (2 * (wqi - wqu) + (wvi - wvu)))
            k_all = np.vstack([_pad(hd["k_past"], wq_work), k])
            v_all = np.vstack([_pad(hd["v_past"], wv_work), v])
            scores = hd["scores"]
            if zo:
                _accumulate(scores, q, k_all.T, np.arange(n), np.arange(n_tot), wqu, dh)
                self.flops.add("attn", n * n_tot * (dh - wqu))
            else:
                _accumulate(scores, q, k_all.T, idx_new, idx_all, wqu, wqi)
                self.flops.add("attn", n_imp_new * n_imp_all * (wqi - wqu))
            probs, den = softmax_rows(scores * self.scale, causal=True)
            o = matmul(probs, v_all)
            if zo:
                self.flops.add("attn", n * n_tot + n * n_tot * dh)
            else:
                self.flops.add("attn", n * n_tot + n * (n_imp_all * wvi + (n_tot - n_imp_all) * wvu))
            denoms_final.append(den)
            for i in range(n):
                imp = bool(imp_new[i])
                self.cache.write(l, h, pos0 + i, k[i, :wqi if imp else wqu], v[i, :wvi if imp else wvu], imp)
            outs.append(o)
            if self.capture is not None:
                self.capture[l].append({"q": q, "k": k, "v": v})
        if rep != l:
            token_importance_update(self.state, l, np.array(denoms_final), self.normalize, start=pos0)

        o_cat = np.hstack(outs)
        if zo:
            o_l = matmul(o_cat, f.wl_r[l])
            self.flops.add("linear", n * d * d)
            self.flops.add("decompress", m.n_heads * n * wvi * dh)
        else:
            o_l = matmul(o_cat, linear_weight(f, l, wvi))
            self.flops.add("linear", n * m.n_heads * wvi * d)
        return o_l, [o[:, :wvi] for o in outs]

    def run(self, tokens) -> ForwardResult:
        m = self.model
        tokens = np.asarray(tokens, dtype=np.intp).ravel()
        if len(tokens) == 0:
            raise ValueError("forward needs at least one token")
        if tokens.min() < 0 or tokens.max() >= m.vocab:
            raise ValueError(f"token ids must lie in [0, {m.vocab})")
        pos0 = self.cache.n_tokens(0)
        n, d = len(tokens), m.d_model
        x = m.embed[tokens].copy()
        layer_outputs, head_outputs = [], []
        for l in range(m.n_layers):
            if self.mode == BASELINE:
                o_l, outs = self.attn_baseline(l, x, pos0)
            else:
                o_l, outs = self.attn_zdc(l, x, pos0)
            layer_outputs.append(o_l)
            head_outputs.append(outs)
            x = x + o_l
            hidden = np.tanh(matmul(x, m.mlp_in[l]))
            x = x + matmul(hidden, m.mlp_out[l])
            self.flops.add("mlp", 2 * n * d * m.d_ff)
        logits = matmul(x, m.out_head)
        self.flops.add("head", n * d * m.vocab)
        return ForwardResult(logits, layer_outputs, head_outputs, self.stats(), self.cache,
                             self.state, self.capture)

    def stats(self) -> dict:
        plan = self.plan
        w = plan.widths(self.model.head_dim)
        layers = []
        for l in range(self.model.n_layers):
            cls = self.state.classes[l]
            layers.append({"layer": l, "g": plan.g[l], "representative": plan.representative(l),
                           "p_qk_i": plan.p_qk_i, "p_qk_u": plan.p_qk_u,
                           "p_vl_i": plan.p_vl_i, "p_vl_u": plan.p_vl_u,
                           "n_tokens": int(len(cls)), "n_important": int(cls.sum())})
        return {"mode": self.mode, "normalize": self.normalize, "flops": self.flops.as_dict(),
                "kvc_floats": self.cache.floats, "widths": w, "layers": layers}


def _pad(a: np.ndarray, width: int) -> np.ndarray:
    if a.shape[1] == width:
        return a
    out = np.zeros((a.shape[0], width))
    out[:, :a.shape[1]] = a
    return out


def _range_violations(plan: CompressionPlan) -> list[str]:
    out = [f"drop ratio {p} outside [0, 1)" for p in plan.ratios() if not 0.0 <= p < 1.0]
    out += [f"g={g} outside (0, 1]" for g in plan.g if not 0.0 < g <= 1.0]
    if plan.group_map is not None:
        if len(plan.group_map) != plan.n_layers:
            out.append("group_map length differs from layer count")
        elif any(r > l or plan.group_map[r] != r for l, r in enumerate(plan.group_map)):
            out.append("group_map must point each layer at an earlier representative")
    return out


def width_order_violations(plan: CompressionPlan, head_dim: int) -> list[str]:
    """Important tokens extend the unimportant prefix, so they may not be narrower."""
    w = plan.widths(head_dim)
    return [f"important {k} width {w[k + '_i']} below unimportant width {w[k + '_u']}"
            for k in ("qk", "vl") if w[k + "_i"] < w[k + "_u"]]


def forward(model, tokens, plan: CompressionPlan | None = None, mode: str = ZDC, *,
            ablation: Ablation | None = None, normalize: bool = True,
            cache: CompressedKVCache | None = None, state: ImportanceState | None = None,
            capture: bool = False) -> ForwardResult:
    """Run ``tokens`` through the model, appending to ``cache`` if one is given.

    ``baseline`` runs the plain projections of the (unfolded) model; every
    other mode runs the folded path under ``plan``.
    """
    runner = _Runner(model, plan, mode, ablation, normalize, cache, state, capture)
    return runner.run(tokens)


def generate(model, prompt, n_new: int, plan: CompressionPlan | None = None, mode: str = ZDC, *,
             ablation: Ablation | None = None, normalize: bool = True, return_stats: bool = False):
    """Greedy decoding; each step feeds one token and extends the compressed cache."""
    if n_new < 0:
        raise ValueError("n_new must be non-negative")
    res = forward(model, prompt, plan, mode, ablation=ablation, normalize=normalize)
    out: list[int] = []
    flops = res.stats["flops"]
    cache, state = res.cache, res.state
    while len(out) < n_new:
        nxt = int(np.argmax(res.logits[-1]))
        out.append(nxt)
        if len(out) == n_new:
            break
        res = forward(model, [nxt], mode=mode, normalize=normalize, cache=cache, state=state)
        flops = {k: flops[k] + res.stats["flops"][k] for k in flops}
    if not return_stats:
        return out
    stats = dict(res.stats, flops=flops, output_tokens=out, kvc_floats=cache.floats)
    return out, stats
