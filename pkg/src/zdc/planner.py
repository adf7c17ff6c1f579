"""Compression-ratio planning: objective, q_d measurement, grid oracle, regressor."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .engine import ZDC, forward
from .metrics import baseline_log_probs, log_softmax
from .model import FoldedModel, ToyModel
from .plan import AS_PRINTED, PROSE, CompressionPlan

log = logging.getLogger(__name__)

P_FIELDS = ("p_qk_i", "p_qk_u", "p_vl_i", "p_vl_u")


def objective(plan: CompressionPlan) -> float:
    """sum_l (p_qk_i + p_vl_i) g_l + (p_qk_u + p_vl_u)(1 - g_l)."""
    imp = plan.p_qk_i + plan.p_vl_i
    unimp = plan.p_qk_u + plan.p_vl_u
    return float(sum(imp * g + unimp * (1.0 - g) for g in plan.g))


@dataclass
class PlanSample:
    plan: CompressionPlan
    q_d: float
    objective: float

    def to_json(self) -> dict:
        return {"plan": self.plan.to_json(), "q_d": self.q_d, "objective": self.objective}


class QdEvaluator:
    """Measures q_d = (perp' - perp) / perp on a fixed eval set.

    The toy model is untrained, so observed next tokens say little about
    quality. By default perplexities are taken against the baseline model's
    own next-token distribution (``targets="baseline"``): perp is
    exp(entropy) and perp' exp(cross-entropy), so q_d = exp(KL) - 1 >= 0.
    ``targets="tokens"`` scores the observed next tokens instead.
    Results are memoized on the kept widths, which is all a plan changes.
    """

    def __init__(self, folded: FoldedModel, eval_set, targets: str = "baseline"):
        self.folded = folded
        self.eval_set = [list(s) for s in eval_set if len(s) >= 2]
        if not self.eval_set:
            raise ValueError("eval set is empty")
        if targets not in ("baseline", "tokens"):
            raise ValueError(f"unknown targets {targets!r}")
        self.targets = targets
        self.reference = baseline_log_probs(folded.base, self.eval_set)
        self.base_ce = self._ce(self.reference)
        self._memo: dict = {}
        self.evaluations = 0

    def _ce(self, logps) -> float:
        total, count = 0.0, 0
        for seq, logp, ref in zip(self.eval_set, logps, self.reference):
            if self.targets == "baseline":
                total -= float(np.sum(np.exp(ref) * logp))
            else:
                total -= float(logp[np.arange(len(seq) - 1), np.asarray(seq[1:])].sum())
            count += len(seq) - 1
        return total / count

    def key(self, plan: CompressionPlan):
        w = plan.widths(self.folded.head_dim)
        return (tuple(sorted(w.items())), plan.g, plan.group_map)

    def perplexity(self, plan: CompressionPlan | None) -> float:
        if plan is None:
            return float(np.exp(self.base_ce))
        logps = [log_softmax(forward(self.folded, s, plan, ZDC).logits[:-1]) for s in self.eval_set]
        return float(np.exp(self._ce(logps)))

    def __call__(self, plan: CompressionPlan) -> float:
        k = self.key(plan)
        if k not in self._memo:
            self.evaluations += 1
            perp = float(np.exp(self.base_ce))
            self._memo[k] = (self.perplexity(plan) - perp) / perp
        return self._memo[k]


def measure_qd(plan: CompressionPlan, model: ToyModel, folded: FoldedModel, eval_set,
               targets: str = "baseline") -> float:
    if folded.base is not model:
        raise ValueError("folded model was not built from this model")
    return QdEvaluator(folded, eval_set, targets)(plan)


@dataclass
class GridSpec:
    p_values: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    g_values: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    direction: str = PROSE
    strict_g: bool = False

    @classmethod
    def named(cls, name: str) -> "GridSpec":
        if name == "default":
            return cls()
        if name == "small":
            return cls(p_values=(0.0, 0.2, 0.4, 0.6), g_values=(0.2, 0.5, 0.8))
        if name == "tiny":
            return cls(p_values=(0.0, 0.25, 0.5), g_values=(0.3, 0.7))
        raise ValueError(f"unknown grid {name!r}")


def g_profile(first: float, last: float, n_layers: int) -> tuple[float, ...]:
    if n_layers == 1:
        return (first,)
    return tuple(float(first + (last - first) * l / (n_layers - 1)) for l in range(n_layers))


def grid_plans(grid: GridSpec, n_layers: int, group_map=None) -> list[CompressionPlan]:
    """Every grid plan meeting the ordering constraints, in lexicographic order."""
    plans = []
    for g0, g1 in itertools.product(grid.g_values, repeat=2):
        g = g_profile(g0, g1, n_layers)
        for ps in itertools.product(grid.p_values, repeat=4):
            plan = CompressionPlan(g, *ps, group_map=group_map)
            if plan.is_valid(grid.direction, grid.strict_g):
                plans.append(plan)
    return plans


def _order_key(plan: CompressionPlan):
    return (-round(objective(plan), 12), plan.g, plan.ratios())


@dataclass
class OracleResult:
    best: PlanSample | None
    feasible: bool
    evaluated: int
    min_qd: PlanSample | None = None


def enumerate_oracle(t_qd: float, evaluator: QdEvaluator, grid: GridSpec | None = None,
                     group_map=None, plans: list[CompressionPlan] | None = None,
                     tol: float = 1e-12) -> OracleResult:
    """Best-objective grid plan whose measured q_d stays within ``t_qd``.

    Plans are visited in descending objective (ties: lexicographic plan
    order), so the first feasible one is the answer. When nothing is feasible
    the result carries the plan with the smallest q_d instead. ``tol`` absorbs
    rounding noise, so a lossless plan meets a target of 0.
    """
    grid = grid or GridSpec()
    if plans is None:
        plans = grid_plans(grid, evaluator.folded.n_layers, group_map)
    ordered = sorted(plans, key=_order_key)
    min_sample = None
    for i, plan in enumerate(ordered):
        q = evaluator(plan)
        if q <= t_qd + tol:
            return OracleResult(PlanSample(plan, q, objective(plan)), True, i + 1)
        if min_sample is None or q < min_sample.q_d:
            min_sample = PlanSample(plan, q, objective(plan))
    return OracleResult(None, False, len(ordered), min_sample)


# ---- regressor ------------------------------------------------------------------

@dataclass
class Regressor:
    """Per-parameter least-squares polynomial in the q_d target."""

    degree: int
    n_layers: int
    coefs: np.ndarray  # (n_outputs, degree + 1), highest power first
    group_map: tuple[int, ...] | None = None
    p_max: float = 0.95
    t_range: tuple[float, float] = (0.0, 1.0)
    direction: str = PROSE

    def to_json(self) -> dict:
        return {"degree": self.degree, "n_layers": self.n_layers, "coefs": self.coefs.tolist(),
                "group_map": None if self.group_map is None else list(self.group_map),
                "p_max": self.p_max, "t_range": list(self.t_range), "direction": self.direction}

    @classmethod
    def from_json(cls, obj: dict) -> "Regressor":
        return cls(obj["degree"], obj["n_layers"], np.asarray(obj["coefs"]),
                   None if obj["group_map"] is None else tuple(obj["group_map"]),
                   obj["p_max"], tuple(obj["t_range"]), obj.get("direction", PROSE))


def _targets(plan: CompressionPlan) -> list[float]:
    return list(plan.g) + list(plan.ratios())


def fit_regressor(samples: list[PlanSample], degree: int = 3, min_samples: int = 20,
                  direction: str = PROSE) -> Regressor:
    """Fit each plan parameter as a polynomial (degree <= 3) of the measured q_d."""
    if len(samples) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(samples)}")
    if not 0 <= degree <= 3:
        raise ValueError("degree must lie in [0, 3]")
    t = np.array([s.q_d for s in samples], dtype=np.float64)
    y = np.array([_targets(s.plan) for s in samples], dtype=np.float64)
    vander = np.vander(t, degree + 1)
    if np.linalg.matrix_rank(vander) < degree + 1:
        raise np.linalg.LinAlgError("degenerate design matrix: too few distinct q_d values")
    coefs, *_ = np.linalg.lstsq(vander, y, rcond=None)
    n_layers = samples[0].plan.n_layers
    p_max = max(max(s.plan.ratios()) for s in samples)
    return Regressor(degree, n_layers, coefs.T.copy(), samples[0].plan.group_map,
                     max(p_max, 1e-9), (float(t.min()), float(t.max())), direction)


def project_plan(values, n_layers: int, p_max: float = 0.95, group_map=None,
                 direction: str = PROSE) -> CompressionPlan:
    """Clamp raw outputs into range and clip them onto the ordering constraints."""
    values = np.asarray(values, dtype=np.float64)
    g = np.clip(values[:n_layers], 1e-6, 1.0)
    g = np.maximum.accumulate(g)
    p_qk_i, p_qk_u, p_vl_i, p_vl_u = np.clip(values[n_layers:n_layers + 4], 0.0, min(p_max, 0.99))
    if direction == PROSE:
        p_qk_i = max(p_qk_i, p_vl_i)
        p_vl_u = max(p_vl_u, p_vl_i)
        p_qk_u = max(p_qk_u, p_qk_i, p_vl_u)
    elif direction == AS_PRINTED:
        # p_u < p_i strictly, and QK never drops more than VL
        gap = 1e-6
        p_vl_i = max(p_vl_i, p_qk_i, gap)
        p_qk_i = max(p_qk_i, gap)
        p_qk_u = min(p_qk_u, p_qk_i - gap)
        p_vl_u = max(min(p_vl_u, p_vl_i - gap), p_qk_u)
    return CompressionPlan(tuple(g), float(p_qk_i), float(p_qk_u), float(p_vl_i), float(p_vl_u),
                           group_map=group_map)


def predict(reg: Regressor, t_qd: float) -> CompressionPlan:
    raw = [np.polyval(c, t_qd) for c in reg.coefs]
    return project_plan(raw, reg.n_layers, reg.p_max, reg.group_map, reg.direction)


def oracle_samples(evaluator: QdEvaluator, targets, grid: GridSpec | None = None,
                   group_map=None) -> list[PlanSample]:
    """Oracle answers for a sweep of q_d targets (training data for the regressor)."""
    grid = grid or GridSpec()
    plans = grid_plans(grid, evaluator.folded.n_layers, group_map)
    out = []
    for t in targets:
        res = enumerate_oracle(t, evaluator, grid, plans=plans)
        if res.feasible:
            out.append(res.best)
    return out
