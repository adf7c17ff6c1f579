"""Config-driven end-to-end experiment: generate, fit rotations, plan, run, simulate, report.

Config grammar (read with :mod:`configparser`)::

    [section]
    key = value        # ints, floats, words; lists are comma separated

Every key has a default in :data:`SCHEMA`; unknown sections or keys are
rejected so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import configparser
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, Topic, gen_corpus, save_corpus
from .engine import BASELINE, ZDC, ZO, LT, MODES, expected_kvc_floats, forward, generate
from .metrics import build_report, degradation_D, head_degradation, layer_outputs_over, validate_report
from .model import FoldedModel, gen_model, save_folded, save_model, save_rotations
from .offline import build_rotations, calibrate_groups, fold_parameters, group_agreement
from .plan import CompressionPlan, load_plan, save_plan
from .planner import (GridSpec, QdEvaluator, enumerate_oracle, fit_regressor, objective,
                      oracle_samples, predict)
from .sp import SPConfig, comm_bytes_model, sp_forward

log = logging.getLogger(__name__)

SCHEMA: dict[str, dict[str, object]] = {
    "experiment": {"seed": 0, "modes": "baseline,zdc,zdc/ZO,zdc/DT,zdc/DL,zdc/LT"},
    "model": {"n_layers": 4, "n_heads": 4, "head_dim": 16, "vocab": 128, "spectral_decay": 0.75,
              "attn_gain": 2.0, "logit_gain": 4.0, "layer_tie": 0.0, "residual_gain": 1.0},
    "corpus": {"n_topics": 4, "seqs_per_topic": 8, "seq_len": 32, "branching": 6},
    "pipeline": {"prune": 0.5, "kmeans_k": -1, "kmeans_iters": 25, "workers": 1,
                 "group_threshold": 0.95, "group_fraction": 0.5},
    "plan": {"source": "uniform", "uniform_p": 0.25, "uniform_g": 0.5, "path": "",
             "target_qd": 0.1, "grid": "tiny", "n_targets": 12},
    "eval": {"n_sequences": 8, "p_grid": "0,0.2,0.4,0.6"},
    "run": {"prompt_len": 24, "max_new": 8},
    "sp": {"workers": "1,2,4", "seq_len": 32, "bytes_per_element": 8, "link_bandwidth": 25e9},
}


def _coerce(default, raw: str):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]]

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({sec: dict(keys) for sec, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.read_string(text)
        cfg = cls.defaults()
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ValueError(f"unknown config section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ValueError(f"unknown key {key!r} in [{sec}]")
                cfg.values[sec][key] = _coerce(SCHEMA[sec][key], raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def list_of(self, section: str, key: str, cast=str) -> list:
        return [cast(v.strip()) for v in str(self.values[section][key]).split(",") if v.strip()]

    def validate(self) -> None:
        for mode in self.list_of("experiment", "modes"):
            if mode not in MODES:
                raise ValueError(f"unknown mode {mode!r}")
        if self["plan"]["source"] not in ("uniform", "zero", "file", "oracle", "regressor"):
            raise ValueError(f"unknown plan source {self['plan']['source']!r}")
        if self["plan"]["source"] == "file" and not Path(str(self["plan"]["path"])).exists():
            raise ValueError(f"plan file {self['plan']['path']!r} does not exist")

    def to_json(self) -> dict:
        return {sec: dict(keys) for sec, keys in self.values.items()}


def logits_checksum(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits, dtype="<f8").tobytes()).hexdigest()


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _split_corpus(corpus: Corpus) -> tuple[Corpus, list[list[int]]]:
    """Second half of every topic is held out for evaluation."""
    fit, held = [], []
    for t in corpus.topics:
        cut = max(1, len(t.sequences) // 2)
        fit.append(Topic(t.name, t.sequences[:cut]))
        held.extend(t.sequences[cut:])
    return Corpus(corpus.vocab, fit), held


def choose_plan(cfg: ExperimentConfig, folded: FoldedModel, eval_set, group_map) -> tuple[CompressionPlan, dict]:
    pc = cfg["plan"]
    nl = folded.n_layers
    source = pc["source"]
    info: dict = {"source": source}
    if source == "zero":
        plan = CompressionPlan.zero(nl)
    elif source == "uniform":
        p = float(pc["uniform_p"])
        plan = CompressionPlan((float(pc["uniform_g"]),) * nl, p, p, p, p)
    elif source == "file":
        plan = load_plan(pc["path"])
    else:
        grid = GridSpec.named(str(pc["grid"]))
        evaluator = QdEvaluator(folded, eval_set)
        target = float(pc["target_qd"])
        oracle = enumerate_oracle(target, evaluator, grid, group_map)
        info["oracle"] = {"feasible": oracle.feasible, "evaluated": oracle.evaluated,
                          "objective": oracle.best.objective if oracle.best else None,
                          "q_d": oracle.best.q_d if oracle.best else None}
        if source == "oracle":
            if not oracle.feasible:
                raise ValueError(f"no grid plan meets q_d <= {target}")
            plan = oracle.best.plan
        else:
            targets = np.geomspace(0.005, 1.0, int(pc["n_targets"]))
            reg = fit_regressor(oracle_samples(evaluator, targets, grid, group_map),
                                min_samples=min(20, int(pc["n_targets"])))
            plan = predict(reg, target)
        info["objective"] = objective(plan)
        info["q_d"] = evaluator(plan)
    if group_map is not None and plan.group_map is None:
        plan = plan.with_group_map(group_map)
    return plan, info


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Full pipeline; writes artifacts under ``out_dir`` when given. Returns the report."""
    seed = int(cfg["experiment"]["seed"])
    mc, cc, pc = cfg["model"], cfg["corpus"], cfg["pipeline"]
    model = gen_model(seed=seed, n_layers=mc["n_layers"], n_heads=mc["n_heads"], head_dim=mc["head_dim"],
                      vocab=mc["vocab"], spectral_decay=mc["spectral_decay"], attn_gain=mc["attn_gain"],
                      logit_gain=mc["logit_gain"], layer_tie=mc["layer_tie"],
                      residual_gain=mc["residual_gain"])
    corpus = gen_corpus(seed=seed, vocab=mc["vocab"], n_topics=cc["n_topics"],
                        seqs_per_topic=cc["seqs_per_topic"], seq_len=cc["seq_len"], branching=cc["branching"])
    fit_corpus, held = _split_corpus(corpus)
    eval_set = held[:int(cfg["eval"]["n_sequences"])] or fit_corpus.sequences()[:1]

    rotations = build_rotations(model, fit_corpus, prune=pc["prune"],
                                kmeans_k=None if pc["kmeans_k"] == 0 else pc["kmeans_k"],
                                iters=pc["kmeans_iters"], seed=seed, workers=pc["workers"])
    folded = fold_parameters(model, rotations)
    group_map = calibrate_groups(model, fit_corpus.sequences(), pc["group_fraction"], pc["group_threshold"])
    checks: dict[str, bool] = {}

    # degradation sweep over uniform drops
    p_grid = cfg.list_of("eval", "p_grid", float)
    base_outputs = layer_outputs_over(model, eval_set, mode=BASELINE)
    evaluator = QdEvaluator(folded, eval_set)
    deg = {"p": p_grid, "D": [], "D_head": [], "q_d": []}
    for p in p_grid:
        plan_p = CompressionPlan.uniform(model.n_layers, p)
        deg["D"].append(degradation_D(base_outputs, layer_outputs_over(folded, eval_set, plan_p)))
        deg["D_head"].append(head_degradation(folded, eval_set, plan_p))
        deg["q_d"].append(evaluator(plan_p))
    for key in ("D", "q_d"):
        checks[f"{key}_monotone"] = all(b >= a - 1e-9 for a, b in zip(deg[key], deg[key][1:]))
    if 0.0 in p_grid:
        i0 = p_grid.index(0.0)
        checks["zero_drop_lossless"] = deg["D"][i0] < 1e-9 and abs(deg["q_d"][i0]) < 1e-9

    plan, plan_info = choose_plan(cfg, folded, eval_set, group_map)

    # per-mode runs on one prompt
    rc = cfg["run"]
    prompt = held[0][:int(rc["prompt_len"])] if held else corpus.sequences()[0][:int(rc["prompt_len"])]
    runs = {}
    prefill = {}
    for mode in cfg.list_of("experiment", "modes"):
        target = model if mode == BASELINE else folded
        res = forward(target, prompt, plan, mode)
        prefill[mode] = res
        out, stats = generate(target, prompt, int(rc["max_new"]), plan, mode, return_stats=True)
        runs[mode] = {"prefill_flops": res.stats["flops"], "flops": stats["flops"],
                      "kvc_floats": stats["kvc_floats"], "output_tokens": out,
                      "logits_checksum": logits_checksum(res.logits), "layers": res.stats["layers"]}
    zero_res = forward(folded, prompt, CompressionPlan.zero(model.n_layers), ZDC)
    base_res = forward(model, prompt, mode=BASELINE)
    checks["zero_plan_matches_baseline"] = _rel_err(zero_res.logits, base_res.logits) <= 1e-8
    if ZDC in prefill:
        z = prefill[ZDC]
        checks["zdc_has_no_codec_flops"] = z.stats["flops"]["compress"] == 0 == z.stats["flops"]["decompress"]
        eff = z.cache.plan
        checks["kvc_closed_form"] = z.cache.floats == expected_kvc_floats(
            z.state.classes, model.n_heads, model.head_dim, eff)
        if ZO in prefill:
            zo = prefill[ZO]
            checks["zo_same_logits"] = bool(np.array_equal(zo.logits, z.logits))
            checks["zo_counts_codec"] = zo.stats["flops"]["compress"] + zo.stats["flops"]["decompress"] > 0
        if LT in prefill:
            lt = prefill[LT]
            checks["lt_same_classes"] = all(np.array_equal(a, b) for a, b in zip(lt.state.classes, z.state.classes))
            checks["lt_costs_more"] = lt.stats["flops"]["total"] > z.stats["flops"]["total"]

    # sequence-parallel simulation
    sc = cfg["sp"]
    sp_len = int(sc["seq_len"])
    sp_tokens = (corpus.sequences()[0] * (sp_len // cc["seq_len"] + 1))[:sp_len]
    ref = forward(folded, sp_tokens, plan, ZDC).logits
    comm = {}
    for w in cfg.list_of("sp", "workers", int):
        spc = SPConfig(w, int(sc["bytes_per_element"]), float(sc["link_bandwidth"]))
        logits, ledger = sp_forward(folded, sp_tokens, plan, spc)
        predicted = comm_bytes_model(plan, sp_len, model.dims(), spc)
        comm[f"w{w}"] = dict(ledger.as_dict(), predicted=predicted,
                             estimated_seconds=predicted["estimated_seconds"],
                             logits_checksum=logits_checksum(logits))
        checks[f"sp_w{w}_matches_single_worker"] = _rel_err(logits, ref) <= 1e-8
        checks[f"sp_w{w}_bytes_match_model"] = all(
            getattr(ledger, k) == predicted[k] for k in ("a2a1_bytes", "a2a2_bytes", "kv_gather_bytes", "denom_bytes"))

    held_groups = held[int(cfg["eval"]["n_sequences"]):] or eval_set
    config_echo = cfg.to_json()
    config_echo["derived"] = {"group_map": group_map, "dims": model.dims(),
                              "group_agreement_heldout": group_agreement(model, held_groups, group_map,
                                                                         pc["group_fraction"])}
    report = build_report(config=config_echo, degradation=deg,
                          flops={m: r["flops"] for m, r in runs.items()},
                          kvc_floats={m: r["kvc_floats"] for m, r in runs.items()},
                          comm=comm, plan=dict(plan.to_json(), **plan_info), ablations=runs,
                          checks=checks)
    problems = validate_report(report)
    report["checks"]["report_schema_valid"] = not problems

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / "model")
        save_corpus(corpus, out / "corpus.json")
        save_rotations(rotations, out / "rotations")
        save_folded(folded, out / "folded")
        save_plan(plan, out / "plan.json")
    return report


def all_checks_pass(report: dict) -> bool:
    return all(report.get("checks", {}).values())
