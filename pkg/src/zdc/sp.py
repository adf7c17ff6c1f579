"""In-process simulation of sequence-parallel attention with two all-to-alls.

Workers hold contiguous token shards. Each layer they project their rows to
compressed q', k', v', exchange them so every worker owns a contiguous block
of heads over the whole sequence, run attention there, and exchange the head
outputs back to token shards for the post-attention linear. Messages are
explicit objects; only elements crossing workers are charged to the ledger.

Class-dependent widths: leading (unimportant-width) dimensions of every
token travel first. A representative layer ranks tokens from those, the head
owners broadcast their per-head row denominators, and then only important
tokens send their remaining dimensions. Reusing layers know the classes up
front and send each row at its class width in one go. Either way the bytes
equal the class-weighted closed form in :func:`comm_bytes_model`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (ImportanceState, _accumulate, classify_tokens, linear_weight, n_important,
                     token_importance_update, width_order_violations)
from .model import FoldedModel
from .plan import CompressionPlan
from .tensor import matmul, softmax_rows


@dataclass
class SPConfig:
    n_workers: int = 4
    bytes_per_element: int = 8
    link_bandwidth: float = 25e9  # bytes/s, only used for the time estimate

    def validate(self, n_heads: int) -> None:
        if self.n_workers < 1:
            raise ValueError("need at least one worker")
        if n_heads % self.n_workers:
            raise ValueError(f"{self.n_workers} workers do not divide {n_heads} heads")


@dataclass
class CommLedger:
    a2a1_bytes: int = 0
    a2a2_bytes: int = 0
    kv_gather_bytes: int = 0
    denom_bytes: int = 0
    per_layer: list[dict] = field(default_factory=list)

    def charge(self, phase: str, layer: int | None, nbytes: int) -> None:
        setattr(self, f"{phase}_bytes", getattr(self, f"{phase}_bytes") + nbytes)
        if layer is None:
            return
        while len(self.per_layer) <= layer:
            self.per_layer.append({"a2a1": 0, "a2a2": 0, "kv_gather": 0, "denom": 0})
        self.per_layer[layer][phase] += nbytes

    @property
    def total_bytes(self) -> int:
        # kv_gather is the K/V share of a2a1, not extra traffic
        return self.a2a1_bytes + self.a2a2_bytes + self.denom_bytes

    def as_dict(self) -> dict:
        return {"a2a1_bytes": self.a2a1_bytes, "a2a2_bytes": self.a2a2_bytes,
                "kv_gather_bytes": self.kv_gather_bytes, "denom_bytes": self.denom_bytes,
                "total_bytes": self.total_bytes, "per_layer": [dict(p) for p in self.per_layer]}


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    head: int
    tensor: str
    tokens: tuple[int, ...]
    rows: tuple[np.ndarray, ...]

    @property
    def n_elements(self) -> int:
        return sum(len(r) for r in self.rows)


def partition_bounds(s: int, n_workers: int) -> list[tuple[int, int]]:
    """Contiguous blocks; the first ``s % n_workers`` blocks get one extra row."""
    if s < n_workers:
        raise ValueError(f"cannot split {s} tokens over {n_workers} workers")
    base, extra = divmod(s, n_workers)
    out, start = [], 0
    for w in range(n_workers):
        size = base + (1 if w < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def partition_sequence(e, n_workers: int) -> list[np.ndarray]:
    e = np.asarray(e)
    return [e[a:b] for a, b in partition_bounds(e.shape[0], n_workers)]


def head_owner(head: int, n_heads: int, n_workers: int) -> int:
    return head // (n_heads // n_workers)


def _deliver(messages, config: SPConfig, ledger: CommLedger, phase: str, layer):
    inbox: dict[int, list[Message]] = {}
    for msg in messages:
        if msg.src != msg.dst:
            nbytes = msg.n_elements * config.bytes_per_element
            ledger.charge(phase, layer, nbytes)
            if phase == "a2a1" and msg.tensor in ("k", "v"):
                ledger.charge("kv_gather", layer, nbytes)
        inbox.setdefault(msg.dst, []).append(msg)
    return inbox


def all_to_all_first(shards: list[dict], n_heads: int, config: SPConfig, ledger: CommLedger,
                     layer: int | None = None) -> list[dict]:
    """Token shards -> head owners.

    ``shards[w]`` is ``{"tokens": positions, "q"|"k"|"v": {head: [row, ...]}}``
    with one (possibly short) row per token. Each worker gets back, for each
    head it owns, ``{"tokens": sorted positions, tensor: [row, ...]}`` over
    every token in the sequence.
    """
    w = config.n_workers
    msgs = []
    for src, shard in enumerate(shards):
        toks = tuple(int(t) for t in shard["tokens"])
        for tensor in ("q", "k", "v"):
            for h, rows in shard.get(tensor, {}).items():
                if len(rows) != len(toks):
                    raise ValueError(f"worker {src} head {h} {tensor}: {len(rows)} rows for {len(toks)} tokens")
                msgs.append(Message(src, head_owner(h, n_heads, w), h, tensor, toks,
                                    tuple(np.asarray(r, dtype=np.float64) for r in rows)))
    inbox = _deliver(msgs, config, ledger, "a2a1", layer)
    out = []
    for dst in range(w):
        per_head: dict[int, dict] = {}
        for msg in sorted(inbox.get(dst, []), key=lambda m: (m.head, m.tensor, m.src)):
            entry = per_head.setdefault(msg.head, {"tokens": {}, "q": {}, "k": {}, "v": {}})
            for t, r in zip(msg.tokens, msg.rows):
                entry[msg.tensor][t] = r
                entry["tokens"][t] = True
        result = {}
        for h, entry in per_head.items():
            toks = sorted(entry["tokens"])
            result[h] = {"tokens": toks}
            for tensor in ("q", "k", "v"):
                if entry[tensor]:
                    result[h][tensor] = [entry[tensor][t] for t in toks]
        out.append(result)
    return out


def all_to_all_second(head_outputs: list[dict], bounds: list[tuple[int, int]], n_heads: int,
                      config: SPConfig, ledger: CommLedger, layer: int | None = None) -> list[np.ndarray]:
    """Head owners -> token shards: ``head_outputs[w][h]`` is (s x width) in token order.

    Returns each worker's token rows with all heads concatenated in head order.
    """
    msgs = []
    for src, heads in enumerate(head_outputs):
        for h, o in heads.items():
            for dst, (a, b) in enumerate(bounds):
                msgs.append(Message(src, dst, h, "o", tuple(range(a, b)), tuple(o[a:b])))
    inbox = _deliver(msgs, config, ledger, "a2a2", layer)
    out = []
    for dst, (a, b) in enumerate(bounds):
        by_head = {m.head: np.array(m.rows).reshape(b - a, -1) for m in inbox.get(dst, [])}
        out.append(np.hstack([by_head[h] for h in range(n_heads)]))
    return out


def _zero_fill(rows, width: int) -> np.ndarray:
    out = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def sp_forward(folded: FoldedModel, tokens, plan: CompressionPlan | None, config: SPConfig,
               normalize: bool = True) -> tuple[np.ndarray, CommLedger]:
    """Prefill ``tokens`` across simulated workers; returns (logits, ledger).

    The arithmetic per entry is the same as the single-worker zdc forward,
    so the logits match it exactly for any worker count.
    """
    m = folded.base
    config.validate(m.n_heads)
    plan = plan or CompressionPlan.zero(m.n_layers)
    bad = width_order_violations(plan, m.head_dim)
    if bad:
        raise ValueError("; ".join(bad))
    tokens = np.asarray(tokens, dtype=np.intp).ravel()
    s, dh, nh, nw = len(tokens), m.head_dim, m.n_heads, config.n_workers
    bounds = partition_bounds(s, nw)
    wd = plan.widths(dh)
    wqi, wqu, wvi, wvu = wd["qk_i"], wd["qk_u"], wd["vl_i"], wd["vl_u"]
    scale = 1.0 / math.sqrt(dh)
    ledger = CommLedger()
    state = ImportanceState(m.n_layers)
    x = [m.embed[tokens[a:b]].copy() for a, b in bounds]
    owned = [[h for h in range(nh) if head_owner(h, nh, nw) == w] for w in range(nw)]

    for l in range(m.n_layers):
        rep = plan.representative(l)
        known = rep != l
        classes = state.classes[rep].copy() if known else None

        # projections on token shards: leading dims for all, tails for important rows
        def project(widths_for, only_important=False):
            shards = []
            for w, (a, b) in enumerate(bounds):
                shard = {"tokens": list(range(a, b)), "q": {}, "k": {}, "v": {}}
                for h in range(nh):
                    for name, wm in (("q", folded.wq_r), ("k", folded.wk_r), ("v", folded.wv_r)):
                        lo, hi = widths_for(name)
                        if not only_important:
                            rows_sel = np.arange(b - a)
                        else:
                            rows_sel = np.flatnonzero(classes[a:b]) if hi > lo else np.arange(0)
                        block = matmul(x[w][rows_sel], wm[l][h][:, lo:hi]) if len(rows_sel) else None
                        rows = [np.zeros(0)] * (b - a)
                        for j, r in enumerate(rows_sel):
                            rows[r] = block[j]
                        shard[name][h] = rows
                shards.append(shard)
            return shards

        lead = lambda name: (0, wvu if name == "v" else wqu)
        tail = lambda name: (wvu, wvi) if name == "v" else (wqu, wqi)
        if known:
            # one message per row at its class width
            heads_in = all_to_all_first(_merge(project(lead), project(tail, True)), nh, config, ledger, l)
        else:
            heads_in = all_to_all_first(project(lead), nh, config, ledger, l)

        # head owners: leading-width scores
        work = {}
        for w in range(nw):
            for h in owned[w]:
                e = heads_in[w][h]
                q = _zero_fill(e["q"], wqi)
                k = _zero_fill(e["k"], wqi)
                v = _zero_fill(e["v"], wvi)
                work[h] = {"q": q, "k": k, "v": v, "scores": matmul(q[:, :wqu], k[:, :wqu].T)}

        if not known:
            denoms = {}
            for h in range(nh):
                _, denoms[h] = softmax_rows(work[h]["scores"] * scale, causal=True)
            # every owner broadcasts its heads' denominators
            for h in range(nh):
                ledger.charge("denom", l, (nw - 1) * s * config.bytes_per_element)
            token_importance_update(state, l, np.array([denoms[h] for h in range(nh)]), normalize, start=0)
            classes = classify_tokens(state, l, plan.g[l])
            state.classes[l] = classes
            tails = all_to_all_first(project(tail, True), nh, config, ledger, l)
            for w in range(nw):
                for h in owned[w]:
                    e = tails[w][h]
                    for name, (lo, hi) in (("q", tail("q")), ("k", tail("k")), ("v", tail("v"))):
                        for t, r in zip(e["tokens"], e[name]):
                            if len(r):
                                work[h][name][t, lo:hi] = r
        else:
            state.classes[l] = classes

        imp = np.flatnonzero(classes)
        outputs = [{} for _ in range(nw)]
        for w in range(nw):
            for h in owned[w]:
                hw = work[h]
                scores = hw["scores"]
                _accumulate(scores, hw["q"], hw["k"].T, imp, imp, wqu, wqi)
                probs, _ = softmax_rows(scores * scale, causal=True)
                outputs[w][h] = matmul(probs, hw["v"])
        o_rows = all_to_all_second(outputs, bounds, nh, config, ledger, l)
        wl = linear_weight(folded, l, wvi)
        for w in range(nw):
            xw = x[w] + matmul(o_rows[w], wl)
            x[w] = xw + matmul(np.tanh(matmul(xw, m.mlp_in[l])), m.mlp_out[l])

    logits = np.vstack([matmul(xw, m.out_head) for xw in x])
    return logits, ledger


def _merge(lead_shards, tail_shards):
    out = []
    for a, b in zip(lead_shards, tail_shards):
        shard = {"tokens": a["tokens"]}
        for name in ("q", "k", "v"):
            shard[name] = {h: [np.concatenate([r1, r2]) for r1, r2 in zip(a[name][h], b[name][h])]
                           for h in a[name]}
        out.append(shard)
    return out


def comm_bytes_model(plan: CompressionPlan | None, s: int, dims: dict, config: SPConfig) -> dict:
    """Closed-form byte counts matching :func:`sp_forward`'s ledger.

    Per layer, with n_i = ceil(g_rep * s) important tokens and head-block
    size N_h / w, every head's full-sequence tensors are sent by the w - 1
    non-owning shards, which hold a (w - 1)/w share of the tokens' elements
    in total over heads.
    """
    nl, nh, dh = dims["n_layers"], dims["n_heads"], dims["head_dim"]
    config.validate(nh)
    plan = plan or CompressionPlan.zero(nl)
    w, bpe = config.n_workers, config.bytes_per_element
    wd = plan.widths(dh)
    per_block = nh // w
    a2a1 = a2a2 = kv = denom = 0
    for l in range(nl):
        rep = plan.representative(l)
        ni = n_important(plan.g[rep], s)
        nu = s - ni
        qk = ni * wd["qk_i"] + nu * wd["qk_u"]
        vv = ni * wd["vl_i"] + nu * wd["vl_u"]
        a2a1 += per_block * (w - 1) * (2 * qk + vv) * bpe
        kv += per_block * (w - 1) * (qk + vv) * bpe
        a2a2 += per_block * (w - 1) * s * wd["vl_i"] * bpe
        if rep == l:
            denom += nh * (w - 1) * s * bpe
    total = a2a1 + a2a2 + denom
    return {"a2a1_bytes": a2a1, "a2a2_bytes": a2a2, "kv_gather_bytes": kv, "denom_bytes": denom,
            "total_bytes": total, "estimated_seconds": total / config.link_bandwidth}
