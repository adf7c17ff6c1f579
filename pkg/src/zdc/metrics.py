"""Quality and cost metrics plus the JSON experiment report."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import BASELINE, ZDC, forward
from .model import FoldedModel, ToyModel

SCHEMA_VERSION = 1


def degradation_detail(baseline_outputs, compressed_outputs, eps: float = 1e-12) -> tuple[float, int]:
    """Mean of |v - u| / |u| over all elements, skipping |u| < eps.

    Returns (D, number of skipped elements).
    """
    if len(baseline_outputs) != len(compressed_outputs):
        raise ValueError(f"{len(baseline_outputs)} baseline outputs vs {len(compressed_outputs)} compressed")
    total, count, skipped = 0.0, 0, 0
    for u, v in zip(baseline_outputs, compressed_outputs):
        u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        if u.shape != v.shape:
            raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
        keep = np.abs(u) >= eps
        skipped += int((~keep).sum())
        total += float(np.sum(np.abs(v[keep] - u[keep]) / np.abs(u[keep])))
        count += int(keep.sum())
    if count == 0:
        raise ValueError("every element has |u| below the exclusion threshold")
    return total / count, skipped


def degradation_D(baseline_outputs, compressed_outputs, eps: float = 1e-12) -> float:
    return degradation_detail(baseline_outputs, compressed_outputs, eps)[0]


def layer_outputs_over(model, sequences, plan=None, mode: str = ZDC) -> list[np.ndarray]:
    """Per-layer post-attention outputs for every sequence, flattened into one list."""
    out = []
    for seq in sequences:
        out.extend(forward(model, seq, plan, mode).layer_outputs)
    return out


def baseline_head_outputs(folded: FoldedModel, sequences) -> list[np.ndarray]:
    """Uncompressed per-head attention outputs rotated by each head's V rotation."""
    out = []
    for seq in sequences:
        b = forward(folded.base, seq, mode=BASELINE, capture=True)
        for l in range(folded.n_layers):
            for h in range(folded.n_heads):
                cap = b.captured[l][h]
                scores = (cap["q"] @ cap["k"].T) / np.sqrt(folded.head_dim)
                scores = np.where(np.tril(np.ones_like(scores, dtype=bool)), scores, -np.inf)
                p = np.exp(scores - scores.max(1, keepdims=True))
                p /= p.sum(1, keepdims=True)
                out.append((p @ cap["v"]) @ folded.rotations.r_vl[l][h])
    return out


def head_degradation(folded: FoldedModel, sequences, plan, baseline=None) -> float:
    """D over per-head attention outputs in the rotated basis.

    The baseline head output is cut to the kept width before comparison.
    ``baseline`` may carry :func:`baseline_head_outputs` for the same
    sequences to skip recomputing it.
    """
    if baseline is None:
        baseline = baseline_head_outputs(folded, sequences)
    comp = [o for seq in sequences for heads in forward(folded, seq, plan, ZDC).head_outputs for o in heads]
    if len(comp) != len(baseline):
        raise ValueError(f"{len(baseline)} baseline head outputs for {len(comp)} compressed ones")
    return degradation_D([b[:, :o.shape[1]] for b, o in zip(baseline, comp)], comp)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    return logits - top - np.log(np.exp(logits - top).sum(axis=1, keepdims=True))


def mean_cross_entropy(model, sequences, plan=None, mode: str | None = None, reference=None) -> float:
    """Mean next-token cross-entropy under teacher forcing.

    ``reference`` (one log-prob matrix per sequence) switches the targets from
    the observed next tokens to a full reference distribution.
    """
    if not sequences:
        raise ValueError("eval set is empty")
    if mode is None:
        mode = BASELINE if isinstance(model, ToyModel) else ZDC
    total, count = 0.0, 0
    for i, seq in enumerate(sequences):
        if len(seq) < 2:
            continue
        logp = log_softmax(forward(model, seq, plan, mode).logits[:-1])
        if reference is None:
            total -= float(logp[np.arange(len(seq) - 1), np.asarray(seq[1:])].sum())
        else:
            ref = reference[i]
            total -= float(np.sum(np.exp(ref) * logp))
        count += len(seq) - 1
    if count == 0:
        raise ValueError("eval set has no next-token predictions")
    return total / count


def baseline_log_probs(model: ToyModel, sequences) -> list[np.ndarray]:
    return [log_softmax(forward(model, seq, mode=BASELINE).logits[:-1]) for seq in sequences]


def perplexity_proxy(model, plan, eval_set, mode: str | None = None, reference=None) -> float:
    """exp(mean next-token cross-entropy) on the toy model."""
    return float(np.exp(mean_cross_entropy(model, eval_set, plan, mode, reference)))


# ---- report ---------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def empty_report() -> dict:
    return {"schema_version": SCHEMA_VERSION, "config": {}, "degradation": {"p": [], "D": [], "q_d": []},
            "flops": {}, "kvc_floats": 0, "comm": {}, "plan": None, "ablations": {}, "checks": {}}


def build_report(**sections) -> dict:
    report = empty_report()
    report.update(sections)
    return _jsonable(report)


def validate_report(report: dict) -> list[str]:
    problems = []
    for key in empty_report():
        if key not in report:
            problems.append(f"missing key {key!r}")
    if report.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"schema_version {report.get('schema_version')} != {SCHEMA_VERSION}")
    for mode, flops in report.get("flops", {}).items():
        parts = {k: v for k, v in flops.items() if k != "total"}
        if any(v < 0 for v in parts.values()):
            problems.append(f"negative flop counter in {mode}")
        if "total" in flops and flops["total"] != sum(parts.values()):
            problems.append(f"flop total for {mode} differs from the sum of its parts")
    for name, c in report.get("comm", {}).items():
        if isinstance(c, dict) and "total_bytes" in c:
            parts = sum(c.get(k, 0) for k in ("a2a1_bytes", "a2a2_bytes", "denom_bytes"))
            if c["total_bytes"] != parts:
                problems.append(f"comm total for {name} differs from its phases")
    return problems


def emit_report(report: dict, path) -> dict:
    report = _jsonable(report)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
