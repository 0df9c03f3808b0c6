"""``cvlm`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .checkpoint import describe, load_checkpoint, read_checkpoint, save_checkpoint
from .config import dump_resolved, load_config
from .data import (
    KNOWLEDGE_PROMPT,
    QUESTION_TEMPLATES,
    Tokenizer,
    gen_world,
    load_jsonl_instructions,
    load_jsonl_pairs,
    make_caption_pairs,
    make_host_corpus,
    make_instruction_set,
    make_knowledge_pairs,
    read_manifest,
    save_jsonl_instructions,
    save_jsonl_pairs,
    world_tokenizer,
    write_manifest,
)
from .errors import CvlmError, DependencyError
from .gradcheck import run_suite
from .model import CVLM
from .training import (
    ablation_sweep,
    derive_model,
    evaluate,
    run_stage,
    write_eval_csv,
    write_metrics,
    write_plot_data,
    write_sweep_csv,
)

SPLITS = ("train", "held_in", "held_out")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="cvlm", description="Train and evaluate a desk-scale CVLM.")
    p.add_argument("--version", action="version", version=f"cvlm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="run config (.toml or .json)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        if out:
            sp.add_argument("--out", metavar="DIR", help="output directory")

    def training(sp, needs_init):
        common(sp)
        sp.add_argument("--init", metavar="PATH", required=False,
                        help="checkpoint from the previous stage" if needs_init
                        else "start from this checkpoint instead of fresh weights")
        sp.add_argument("--resume", metavar="PATH",
                        help="continue an interrupted run of this stage")
        sp.add_argument("--steps", type=int, help="override the stage's total steps")
        sp.add_argument("--stop-after", type=int, metavar="K",
                        help="stop after step K (the schedule still spans --steps)")

    common(sub.add_parser("gen-data", help="write the synthetic world as JSONL"))
    training(sub.add_parser("pretrain-vka", help="stage 1: knowledge generation"), False)
    training(sub.add_parser("align-vka", help="stage 2: query-token alignment"), True)
    ft = sub.add_parser("finetune", help="stage 3: instruction tuning")
    training(ft, True)
    ft.add_argument("--ld", type=int, help="distillation rows per host layer")
    ft.add_argument("--no-vka", action="store_true", help="omit knowledge tokens")

    ev = sub.add_parser("evaluate", help="exact-match accuracy per category")
    common(ev)
    ev.add_argument("--checkpoint", required=True, metavar="PATH")
    ev.add_argument("--split", choices=SPLITS)

    sw = sub.add_parser("sweep", help="use_vka x LD ablation grid")
    common(sw)
    sw.add_argument("--init", required=True, metavar="PATH", help="aligned checkpoint")
    sw.add_argument("--steps", type=int, help="override instruction-tuning steps")
    sw.add_argument("--ld", type=int, nargs="+", help="LD values to sweep")

    common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), out=False)

    ic = sub.add_parser("inspect-checkpoint", help="list checkpoint contents")
    ic.add_argument("path", metavar="CKPT")
    return p


# -------------------------------------------------------------------- data

def host_corpus(cfg, tok):
    """Text-only host pretraining lines for the configured world."""
    w = cfg.world
    world = gen_world(w.seed, w.n_entities, w.vocab_sizes)
    if list(world_tokenizer(world).vocab) != list(tok.vocab):
        raise DependencyError("host pretraining needs the generated world's vocabulary; "
                              "set host_pretrain = false for external data")
    return make_host_corpus(world, w.host_corpus, cfg.seed)


def load_data(cfg):
    """Return ``(tokenizer, pairs, captions, splits)`` from disk or the world config."""
    w = cfg.world
    if cfg.paths.data:
        man = read_manifest(cfg.paths.data)
        base = os.path.dirname(os.path.abspath(cfg.paths.data))
        files = {k: os.path.join(base, v) for k, v in man["splits"].items()}
        pairs = load_jsonl_pairs(files["knowledge"])
        splits = {k: load_jsonl_instructions(files[k]) for k in SPLITS if k in files}
        captions = load_jsonl_pairs(files["captions"]) if "captions" in files else []
        if "vocab" in man:
            tok = Tokenizer.from_vocab(man["vocab"])
        else:
            texts = [KNOWLEDGE_PROMPT] + [p.knowledge for p in pairs + captions]
            texts += [f"{s.question} {s.answer}" for v in splits.values() for s in v]
            tok = Tokenizer.from_texts(texts)
        return tok, pairs, captions, splits
    world = gen_world(w.seed, w.n_entities, w.vocab_sizes)
    size = cfg.model.vision.image_size
    pairs = make_knowledge_pairs(world, w.knowledge_layouts, 0, w.max_distractors, size)
    captions = make_caption_pairs(world, 1, 10_000, w.max_distractors, size)
    s = make_instruction_set(world, QUESTION_TEMPLATES, w.seed, w.layouts_per_combo,
                             None, w.max_distractors, size)
    splits = {"train": s.train, "held_in": s.held_in, "held_out": s.held_out}
    return world_tokenizer(world), pairs, captions, splits


# ------------------------------------------------------------------ helpers

def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        cfg.paths.out = args.out
    return cfg


def _out_dir(cfg, cmd):
    out = cfg.paths.out if cfg.paths.out != "runs" else os.path.join("runs", cmd)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_init(path, stage):
    if not path:
        raise DependencyError(f"{stage} needs --init with the previous stage's checkpoint")
    model, _, _ = load_checkpoint(path)
    return model


# ----------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    out = _out_dir(cfg, "data")
    tok, pairs, captions, splits = load_data(cfg)
    save_jsonl_pairs(pairs, os.path.join(out, "knowledge.jsonl"))
    save_jsonl_pairs(captions, os.path.join(out, "captions.jsonl"))
    files = {"knowledge": "knowledge.jsonl", "captions": "captions.jsonl"}
    for name, samples in splits.items():
        files[name] = f"instructions_{name}.jsonl"
        save_jsonl_instructions(samples, os.path.join(out, files[name]))
    write_manifest(os.path.join(out, "manifest.json"), cfg.world.seed, files, list(tok.vocab))
    dump_resolved(cfg, os.path.join(out, "config.resolved.json"))
    counts = {"knowledge": len(pairs), "captions": len(captions)}
    counts.update({k: len(v) for k, v in splits.items()})
    _write_json(os.path.join(out, "summary.json"), {"command": "gen-data", "counts": counts,
                                                    "vocab_size": len(tok)})
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _train(args, cfg, stage, model, data, warmups=()):
    scfg = cfg.stage(stage)
    if args.steps is not None:
        scfg.steps = args.steps
    state = None
    if args.resume:
        model, state, ckpt = load_checkpoint(args.resume)
        if state is None or state.stage != stage:
            raise DependencyError(f"{args.resume} holds no resumable {stage} state")
    out = _out_dir(cfg, stage)
    dump_resolved(cfg, os.path.join(out, "config.resolved.json"))
    rows, state = run_stage(scfg, model, data, state, stop_at=args.stop_after)
    write_metrics(os.path.join(out, "metrics.csv"), rows, append=bool(args.resume))
    for name, warm in warmups:
        write_metrics(os.path.join(out, f"metrics_{name}.csv"), warm)
    ckpt_path = os.path.join(out, "checkpoint.cvlm")
    save_checkpoint(model, ckpt_path, stage=stage, step=state.step, train_state=state)
    summary = {"command": args.command, "stage": stage, "seed": scfg.seed,
               "steps": scfg.steps, "completed_step": state.step,
               "final_loss": rows[-1]["loss"] if rows else None,
               "checkpoint": "checkpoint.cvlm", "metrics": "metrics.csv",
               "use_vka": model.cfg.use_vka, "ld": model.cfg.ld}
    summary["warmups"] = {name: warm[-1]["loss"] for name, warm in warmups}
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"{stage}: step {state.step}/{scfg.steps} loss {summary['final_loss']}")
    return model


def cmd_pretrain(args, cfg):
    tok, pairs, captions, _ = load_data(cfg)
    model = _load_init(args.init, "pretrain-vka") if args.init else CVLM(cfg.model, tok)
    warmups = []
    if cfg.host_pretrain and not args.resume and not args.init:
        rows, _ = run_stage(cfg.stage("host_pretrain"), model, host_corpus(cfg, tok))
        print(f"host_pretrain: step {len(rows)} loss {rows[-1]['loss']}")
        warmups.append(("host_pretrain", rows))
    if cfg.caption_warmup and not args.resume and captions:
        rows, _ = run_stage(cfg.stage("mlp_caption"), model, captions)
        warmups.append(("mlp_caption", rows))
    _train(args, cfg, "vka_pretrain", model, pairs, warmups)
    return 0


def cmd_align(args, cfg):
    tok, pairs, _, _ = load_data(cfg)
    model = None if args.resume else _load_init(args.init, "align-vka")
    _train(args, cfg, "vka_align", model, pairs)
    return 0


def cmd_finetune(args, cfg):
    _, _, _, splits = load_data(cfg)
    model = None
    if not args.resume:
        model = _load_init(args.init, "finetune")
        use_vka = model.cfg.use_vka and not args.no_vka
        ld = model.cfg.ld if args.ld is None else args.ld
        if (use_vka, ld) != (model.cfg.use_vka, model.cfg.ld):
            model = derive_model(model, use_vka, ld)
    model = _train(args, cfg, "instruction_tune", model, splits["train"])
    return 0


def cmd_evaluate(args, cfg):
    _, _, _, splits = load_data(cfg)
    model, _, ckpt = load_checkpoint(args.checkpoint)
    split = args.split or cfg.eval.split
    out = _out_dir(cfg, "evaluate")
    res = evaluate(model, splits[split], cfg.eval.batch_size, cfg.eval.max_new_tokens)
    write_eval_csv(os.path.join(out, f"eval_{split}.csv"), res)
    write_plot_data(os.path.join(out, f"plot_{split}.csv"), res)
    dump_resolved(cfg, os.path.join(out, "config.resolved.json"))
    _write_json(os.path.join(out, "summary.json"), {
        "command": "evaluate", "split": split, "checkpoint_stage": ckpt.stage,
        "use_vka": model.cfg.use_vka, "ld": model.cfg.ld,
        "accuracy": res.aggregate[1], "n": res.aggregate[0],
        "categories": {c: a for c, _, a in res.categories}})
    for c, n, a in res.categories + [("all",) + res.aggregate]:
        print(f"{c:10s} n={n:4d} accuracy={'n/a' if a is None else f'{a:.4f}'}")
    return 0


def cmd_sweep(args, cfg):
    _, _, _, splits = load_data(cfg)
    base = _load_init(args.init, "sweep")
    scfg = cfg.stage("instruction_tune")
    if args.steps is not None:
        scfg.steps = args.steps
    lds = args.ld or cfg.sweep.lds
    evals = {s: splits[s] for s in cfg.sweep.splits}
    out = _out_dir(cfg, "sweep")
    dump_resolved(cfg, os.path.join(out, "config.resolved.json"))
    results = ablation_sweep(base, scfg, splits["train"], evals, lds, cfg.sweep.use_vka)
    write_sweep_csv(os.path.join(out, "sweep.csv"), results)
    _write_json(os.path.join(out, "summary.json"), {
        "command": "sweep", "cells": [
            {"use_vka": r["use_vka"], "ld": r["ld"], "final_loss": r["final_loss"],
             **{f"accuracy_{k}": v.aggregate[1] for k, v in r["evals"].items()}}
            for r in results]})
    for r in results:
        accs = " ".join(f"{k}={v.aggregate[1]:.4f}" for k, v in r["evals"].items())
        print(f"use_vka={'on' if r['use_vka'] else 'off'} ld={r['ld']} {accs}")
    return 0


def cmd_gradcheck(args, cfg):
    reports = run_suite(cfg.seed if args.seed is None else args.seed)
    for r in reports:
        print(f"{r.name:28s} max_rel_error={r.max_rel_error:.3e} "
              f"checked={r.checked} {'ok' if r.ok else 'FAIL'}")
    return 0 if all(r.ok for r in reports) else 2


def cmd_inspect(args):
    print(describe(read_checkpoint(args.path)))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain-vka": cmd_pretrain, "align-vka": cmd_align,
    "finetune": cmd_finetune, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "inspect-checkpoint":
            return cmd_inspect(args)
        return COMMANDS[args.command](args, _resolve(args))
    except (CvlmError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cvlm {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
