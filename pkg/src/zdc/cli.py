"""``zdc`` command line: one subcommand per pipeline stage plus ``all``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import gen_corpus, load_corpus, save_corpus
from .engine import BASELINE, MODES, Ablation, forward, generate
from .experiment import ExperimentConfig, all_checks_pass, logits_checksum, run_experiment
from .metrics import build_report, emit_report, load_report, validate_report
from .model import gen_model, load_folded, load_model, load_rotations, save_folded, save_model, save_rotations
from .offline import build_rotations, calibrate_groups, fold_parameters
from .plan import load_plan, save_plan
from .planner import GridSpec, QdEvaluator, enumerate_oracle, fit_regressor, oracle_samples, predict
from .sp import SPConfig, comm_bytes_model, sp_forward

log = logging.getLogger("zdc")


def _write_json(path, obj) -> None:
    emit_report(obj, path)


def cmd_gen_model(a) -> int:
    m = gen_model(seed=a.seed, n_layers=a.layers, n_heads=a.heads, head_dim=a.head_dim, vocab=a.vocab,
                  spectral_decay=a.decay, layer_tie=a.layer_tie, residual_gain=a.residual_gain)
    save_model(m, a.out)
    print(json.dumps(m.dims()))
    return 0


def cmd_gen_corpus(a) -> int:
    c = gen_corpus(seed=a.seed, vocab=a.vocab, n_topics=a.topics, seqs_per_topic=a.seqs,
                   seq_len=a.seq_len)
    save_corpus(c, a.out)
    print(f"{len(c.topics)} topics, {c.n_tokens} tokens")
    return 0


def cmd_rotations(a) -> int:
    model, corpus = load_model(a.model), load_corpus(a.corpus)
    k = None if a.kmeans_k == 0 else a.kmeans_k
    rot = build_rotations(model, corpus, prune=a.prune, kmeans_k=k, iters=a.iters, seed=a.seed,
                          workers=a.workers)
    save_rotations(rot, a.out)
    print(json.dumps(rot.meta.get("sv_below_1", {})))
    return 0


def cmd_fold(a) -> int:
    save_folded(fold_parameters(load_model(a.model), load_rotations(a.rotations)), a.out)
    return 0


def cmd_plan(a) -> int:
    folded = load_folded(a.folded)
    seqs = load_corpus(a.corpus).sequences()
    eval_set = seqs[-a.eval_seqs:]
    group_map = calibrate_groups(folded.base, seqs[:-a.eval_seqs] or seqs) if a.groups else None
    grid = GridSpec.named(a.grid)
    evaluator = QdEvaluator(folded, eval_set)
    if a.mode == "oracle":
        res = enumerate_oracle(a.target_qd, evaluator, grid, group_map)
        if not res.feasible:
            print(f"no grid plan meets q_d <= {a.target_qd}; lowest was {res.min_qd.q_d:.4g}", file=sys.stderr)
            return 1
        plan = res.best.plan
    else:
        samples = oracle_samples(evaluator, np.geomspace(0.005, 1.0, a.n_targets), grid, group_map)
        plan = predict(fit_regressor(samples, min_samples=min(20, a.n_targets)), a.target_qd)
    save_plan(plan, a.out)
    print(json.dumps({"q_d": evaluator(plan), **plan.to_json()}))
    return 0


def _read_prompt(path) -> list[int]:
    return [int(t) for t in Path(path).read_text().split()]


def cmd_run(a) -> int:
    plan = load_plan(a.plan) if a.plan else None
    prompt = _read_prompt(a.prompt_file)
    target = load_model(a.model) if a.mode == BASELINE else load_folded(a.folded)
    prefill = forward(target, prompt, plan, a.mode, ablation=Ablation())
    out, stats = generate(target, prompt, a.max_new, plan, a.mode, return_stats=True)
    flops = {k: stats["flops"][k] for k in ("qkv", "attn", "linear", "compress", "decompress")}
    doc = {"mode": a.mode, "flops": flops, "flops_all": stats["flops"], "kvc_floats": stats["kvc_floats"],
           "layers": stats["layers"], "output_tokens": out,
           "prefill_logits_checksum": logits_checksum(prefill.logits)}
    _write_json(a.stats_out, doc)
    print(" ".join(map(str, out)))
    return 0


def cmd_sp_sim(a) -> int:
    folded = load_folded(a.folded)
    plan = load_plan(a.plan) if a.plan else None
    rng = np.random.default_rng(a.seed)
    tokens = rng.integers(folded.base.vocab, size=a.seq_len)
    cfg = SPConfig(a.workers, a.bytes_per_element, a.bandwidth)
    logits, ledger = sp_forward(folded, tokens, plan, cfg)
    predicted = comm_bytes_model(plan, a.seq_len, folded.base.dims(), cfg)
    doc = dict(ledger.as_dict(), predicted=predicted, estimated_seconds=predicted["estimated_seconds"],
               n_workers=a.workers, seq_len=a.seq_len, logits_checksum=logits_checksum(logits))
    _write_json(a.report, doc)
    match = all(doc[k] == predicted[k] for k in ("a2a1_bytes", "a2a2_bytes", "kv_gather_bytes", "denom_bytes"))
    print(f"a2a1={ledger.a2a1_bytes} a2a2={ledger.a2a2_bytes} denom={ledger.denom_bytes} model_match={match}")
    return 0 if match else 1


def cmd_report(a) -> int:
    stats = load_report(a.stats) if a.stats else {}
    sp = load_report(a.sp) if a.sp else {}
    plan = load_plan(a.plan).to_json() if a.plan else None
    mode = stats.get("mode", "run")
    report = build_report(flops={mode: stats.get("flops_all", stats.get("flops", {}))} if stats else {},
                          kvc_floats={mode: stats.get("kvc_floats", 0)} if stats else 0,
                          comm={f"w{sp['n_workers']}": sp} if sp else {}, plan=plan,
                          ablations={mode: stats} if stats else {})
    problems = validate_report(report)
    report["checks"] = {"report_schema_valid": not problems}
    _write_json(a.out, report)
    for p in problems:
        print(p, file=sys.stderr)
    return 0 if not problems else 1


def cmd_all(a) -> int:
    cfg = ExperimentConfig.from_file(a.config) if a.config else ExperimentConfig.defaults()
    report = run_experiment(cfg, a.out_dir)
    out = Path(a.out) if a.out else Path(a.out_dir or ".") / "experiment.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    failed = [k for k, ok in report["checks"].items() if not ok]
    for k, ok in sorted(report["checks"].items()):
        print(f"{'PASS' if ok else 'FAIL'} {k}")
    return 0 if all_checks_pass(report) and not failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zdc", description="Zero-delay QKV compression toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-model", help="write a seeded toy model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--head-dim", type=int, default=16)
    s.add_argument("--vocab", type=int, default=128)
    s.add_argument("--decay", type=float, default=0.75)
    s.add_argument("--layer-tie", type=float, default=0.0)
    s.add_argument("--residual-gain", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_model)

    s = sub.add_parser("gen-corpus", help="write a synthetic topic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vocab", type=int, default=128)
    s.add_argument("--topics", type=int, default=4)
    s.add_argument("--seqs", type=int, default=8)
    s.add_argument("--seq-len", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("rotations", help="fit per-head rotations from corpus activations")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--prune", type=float, default=0.5)
    s.add_argument("--kmeans-k", type=int, default=-1, help="-1: default size, 0: no clustering")
    s.add_argument("--iters", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rotations)

    s = sub.add_parser("fold", help="fold rotations into the model weights")
    s.add_argument("--model", required=True)
    s.add_argument("--rotations", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fold)

    s = sub.add_parser("plan", help="choose compression ratios for a q_d target")
    s.add_argument("--folded", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--target-qd", type=float, default=0.1)
    s.add_argument("--mode", choices=("oracle", "regressor"), default="regressor")
    s.add_argument("--grid", choices=("default", "small", "tiny"), default="default")
    s.add_argument("--eval-seqs", type=int, default=8)
    s.add_argument("--n-targets", type=int, default=24)
    s.add_argument("--groups", action="store_true", help="calibrate layer groups first")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("run", help="prefill and greedy-decode one prompt")
    s.add_argument("--model")
    s.add_argument("--folded")
    s.add_argument("--plan")
    s.add_argument("--mode", choices=MODES, default="zdc")
    s.add_argument("--prompt-file", required=True, help="whitespace separated token ids")
    s.add_argument("--max-new", type=int, default=8)
    s.add_argument("--stats-out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sp-sim", help="simulate sequence-parallel attention and count bytes")
    s.add_argument("--folded", required=True)
    s.add_argument("--plan")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--seq-len", type=int, default=512)
    s.add_argument("--bytes-per-element", type=int, default=8)
    s.add_argument("--bandwidth", type=float, default=25e9)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_sp_sim)

    s = sub.add_parser("report", help="merge stats.json, sp.json and plan.json")
    s.add_argument("--stats")
    s.add_argument("--sp")
    s.add_argument("--plan")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("all", help="run the whole experiment from a config file")
    s.add_argument("--config")
    s.add_argument("--out-dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and ((args.mode == BASELINE and not args.model) or
                                  (args.mode != BASELINE and not args.folded)):
        print("run: baseline needs --model, other modes need --folded", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"zdc {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
