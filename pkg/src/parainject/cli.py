"""Command-line entry point for the whole pipeline.

Subcommands: gen-data, build-vocab, pretrain, inject, finetune,
experiment, gradcheck, stats. Settings resolve as CLI flag > --set
override > config file > built-in default, and every artifact-producing
run writes a manifest (resolved config + input hashes) to its output
directory.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, datagen, encoder as enc, finetune as ft
from . import gradcheck as gc
from . import injection, pretrain as pt
from .tokenizer import Tokenizer, Vocab, build_vocab


class CliError(Exception):
    pass


def _load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    cfg = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, _, v = line.partition("=")
            cfg[k.strip()] = v.strip()
    return cfg


def resolve(args, defaults):
    """Merge defaults <- config file <- --set overrides <- explicit flags."""
    cfg = dict(defaults)
    file_cfg = _load_config_file(getattr(args, "config", None))
    for k, v in file_cfg.items():
        if k not in defaults:
            raise CliError(f"unknown config key {k!r}")
        cfg[k] = type(defaults[k])(v) if defaults[k] is not None else v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        if k not in defaults:
            raise CliError(f"unknown config key {k!r}")
        cfg[k] = type(defaults[k])(v) if defaults[k] is not None else v
    for k in defaults:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            cfg[k] = v
    return cfg


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, inputs):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "tool": "parainject",
        "version": __version__,
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _log(msg):
    print(msg, file=sys.stderr)


def _encoder_config(cfg, vocab_size):
    return enc.EncoderConfig(
        layers=cfg["layers"], hidden=cfg["hidden"], heads=cfg["heads"],
        ff=cfg["ff"], max_len=cfg["max_len"], vocab_size=vocab_size,
        dropout=cfg["encoder_dropout"])


ENCODER_DEFAULTS = {
    "layers": 2, "hidden": 64, "heads": 4, "ff": 256, "max_len": 64,
    "encoder_dropout": 0.1,
}


def cmd_gen_data(args):
    defaults = {
        "size": 1000, "substitution_prob": 0.9, "reorder_prob": 0.2,
        "noise": 0.0, "seed": 0,
    }
    cfg = resolve(args, defaults)
    synth = datagen.SynthConfig(
        size=cfg["size"], substitution_prob=cfg["substitution_prob"],
        reorder_prob=cfg["reorder_prob"], noise=cfg["noise"], seed=cfg["seed"])
    records, corrupted = datagen.generate_synthetic(synth)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    datagen.save_corpus(records, args.out)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "gen-data", cfg, [])
    _log(f"wrote {len(records)} records to {args.out} "
         f"({corrupted} alignments corrupted by noise)")
    return 0


def cmd_build_vocab(args):
    cfg = resolve(args, {"vocab_size": 300, "seed": 0})
    records = datagen.load_corpus(args.corpus)
    vocab = build_vocab((r.source + r.target for r in records), cfg["vocab_size"])
    vocab.save(args.out)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "build-vocab",
                   cfg, [args.corpus])
    _log(f"wrote vocabulary of {len(vocab)} tokens to {args.out}")
    return 0


def cmd_pretrain(args):
    defaults = dict(ENCODER_DEFAULTS)
    defaults.update({"steps": 500, "batch_size": 16, "lr": 1e-3,
                     "mask_rate": 0.15, "seed": 0})
    cfg = resolve(args, defaults)
    vocab = Vocab.load(args.vocab)
    tok = Tokenizer(vocab)
    documents = pt.load_documents(args.corpus)
    config = _encoder_config(cfg, len(vocab))
    hyper = pt.PretrainHyper(steps=cfg["steps"], batch_size=cfg["batch_size"],
                             lr=cfg["lr"], mask_rate=cfg["mask_rate"],
                             seed=cfg["seed"])
    result = pt.pretrain_loop(documents, tok, config, hyper,
                              init_seed=cfg["seed"])
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    enc.save_checkpoint(args.out, config, result.params)
    with open(os.path.join(out_dir, "pretrain_loss.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in result.loss_curve:
            w.writerow([step, f"{loss:.6f}"])
    write_manifest(out_dir, "pretrain", cfg, [args.corpus, args.vocab])
    if result.diverged:
        _log("training diverged; wrote last good checkpoint")
        return 1
    _log(f"wrote checkpoint to {args.out}")
    return 0


def _load_or_init(init_path, cfg, vocab):
    if init_path:
        config, params, _ = enc.load_checkpoint(init_path)
        if config.vocab_size != len(vocab):
            raise CliError(
                f"checkpoint vocab size {config.vocab_size} != vocabulary "
                f"size {len(vocab)}")
        return config, params
    config = _encoder_config(cfg, len(vocab))
    return config, enc.init_params(config, cfg["seed"])


INJECT_DEFAULTS = dict(ENCODER_DEFAULTS)
INJECT_DEFAULTS.update({
    "lr": 5e-5, "dropout": 0.2, "batch_size": 16, "max_steps": 2000,
    "eval_interval": 50, "dev_n": 200, "test_n": 200, "seed": 0,
    "variant": "joint", "early_stop_mode": "second_ever",
})


def _run_injection(args, cfg):
    vocab = Vocab.load(args.vocab)
    tok = Tokenizer(vocab)
    records = datagen.load_corpus(args.corpus)
    config, params = _load_or_init(args.init, cfg, vocab)
    splits = datagen.split_corpus(records, cfg["dev_n"], cfg["test_n"],
                                  cfg["seed"])
    hyper = injection.InjectionHyper(
        lr=cfg["lr"], dropout=cfg["dropout"], batch_size=cfg["batch_size"],
        max_steps=cfg["max_steps"], eval_interval=cfg["eval_interval"],
        seed=cfg["seed"], early_stop_mode=cfg["early_stop_mode"])
    return injection.inject_train(splits, params, config, hyper, tok,
                                  variant=cfg["variant"]), config


def _write_injection_report(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "L_p", "L_s", "L", "dev_phrase_acc", "dev_sent_acc"])
        for step, lp, ls, total, pa, sa in rows:
            w.writerow([step, f"{lp:.6f}", f"{ls:.6f}", f"{total:.6f}",
                        "" if pa is None else f"{pa:.6f}",
                        "" if sa is None else f"{sa:.6f}"])


def cmd_inject(args):
    cfg = resolve(args, INJECT_DEFAULTS)
    result, config = _run_injection(args, cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    enc.save_checkpoint(args.out, config, result.params, extra=result.heads)
    _write_injection_report(os.path.join(out_dir, "injection_report.csv"),
                            result.report_rows)
    write_manifest(out_dir, "inject", cfg, [args.corpus, args.vocab, args.init])
    _log(f"steps={result.steps_run} early_stop={result.stopped_early} "
         f"dev_phrase={result.dev_phrase_acc} dev_sent={result.dev_sent_acc} "
         f"test_phrase={result.test_phrase_acc} test_sent={result.test_sent_acc}")
    _log(f"wrote checkpoint to {args.out}")
    return 0


FT_DEFAULTS = {"batch_size": 32, "lr": 3e-5, "epochs": 4, "dropout": 0.1,
               "seed": 0, "kind": "pair_classification", "metric": "accuracy"}


def cmd_finetune(args):
    cfg = resolve(args, FT_DEFAULTS)
    vocab = Vocab.load(args.vocab)
    tok = Tokenizer(vocab)
    config, params, _ = enc.load_checkpoint(args.checkpoint)
    task = ft.TaskSpec(name=args.task_name, kind=cfg["kind"],
                       metric=cfg["metric"], train_path=args.train,
                       dev_path=args.dev)
    train_ex = ft.load_task_file(args.train)
    dev_ex = ft.load_task_file(args.dev)
    hyper = ft.FinetuneHyper(batch_size=cfg["batch_size"], lr=cfg["lr"],
                             epochs=cfg["epochs"], dropout=cfg["dropout"],
                             seed=cfg["seed"])
    model = ft.finetune(task, train_ex, params, config, tok, hyper)
    value = model.evaluate(dev_ex)
    os.makedirs(args.out_dir, exist_ok=True)
    report = ft.ExperimentReport()
    report.add("finetuned", task.name, len(train_ex), task.metric, value,
               cfg["seed"])
    report.write_csv(os.path.join(args.out_dir, "finetune_report.csv"))
    write_manifest(args.out_dir, "finetune", cfg,
                   [args.train, args.dev, args.vocab, args.checkpoint])
    _log(f"{task.name} dev {task.metric} = {value:.4f}")
    return 0


def _subsample_cell(payload):
    (task, subset, dev_ex, name, params, config, tok, hyper, seed, size) = payload
    h = ft.FinetuneHyper(batch_size=hyper.batch_size, lr=hyper.lr,
                         epochs=hyper.epochs, dropout=hyper.dropout, seed=seed)
    model = ft.finetune(task, subset, params, config, tok, h)
    return (name, task.name, size, task.metric, model.evaluate(dev_ex), seed)


EXP_DEFAULTS = dict(INJECT_DEFAULTS)
EXP_DEFAULTS.update({
    "recipe": "subsample", "sizes": "100,500", "seeds": "0,1,2",
    "task_size": 2000, "ft_lr": 3e-4, "ft_epochs": 4, "ft_batch_size": 32,
    "ft_dropout": 0.1, "jobs": 1,
})


def cmd_experiment(args):
    cfg = resolve(args, EXP_DEFAULTS)
    vocab = Vocab.load(args.vocab)
    tok = Tokenizer(vocab)
    records = datagen.load_corpus(args.corpus)
    config, base_params = _load_or_init(args.init, cfg, vocab)
    splits = datagen.split_corpus(records, cfg["dev_n"], cfg["test_n"],
                                  cfg["seed"])
    seeds = [int(s) for s in str(cfg["seeds"]).split(",")]
    inject_hyper = injection.InjectionHyper(
        lr=cfg["lr"], dropout=cfg["dropout"], batch_size=cfg["batch_size"],
        max_steps=cfg["max_steps"], eval_interval=cfg["eval_interval"],
        seed=cfg["seed"], early_stop_mode=cfg["early_stop_mode"])
    ft_hyper = ft.FinetuneHyper(batch_size=cfg["ft_batch_size"],
                                lr=cfg["ft_lr"], epochs=cfg["ft_epochs"],
                                dropout=cfg["ft_dropout"], seed=cfg["seed"])

    task = ft.TaskSpec(name="synthetic-paraphrase", kind="pair_classification",
                       metric="accuracy")
    task_train = ft.make_paraphrase_task(records, cfg["task_size"],
                                              seed=cfg["seed"] + 10)
    task_dev = ft.make_paraphrase_task(records, min(500, cfg["task_size"]),
                                            seed=cfg["seed"] + 11)
    os.makedirs(args.out_dir, exist_ok=True)

    if cfg["recipe"] == "subsample":
        injected = injection.inject_train(
            splits, enc.clone_params(base_params), config, inject_hyper, tok)
        checkpoints = {"baseline": base_params, "injected": injected.params}
        sizes = [int(s) for s in str(cfg["sizes"]).split(",")]
        sizes.append(len(task_train))
        cells = []
        for seed in seeds:
            order = np.random.default_rng(seed).permutation(len(task_train))
            for size in sizes:
                subset = [task_train[i] for i in order[:size]]
                for name, params in checkpoints.items():
                    cells.append((task, subset, task_dev, name, params, config,
                                  tok, ft_hyper, seed, size))
        if cfg["jobs"] > 1:
            with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
                rows = list(pool.map(_subsample_cell, cells))
        else:
            rows = [_subsample_cell(c) for c in cells]
        report = ft.ExperimentReport()
        for row in rows:
            report.add(*row)
        report.write_csv(os.path.join(args.out_dir, "subsample_report.csv"))
    elif cfg["recipe"] == "ablation":
        report, _ = ft.ablation_experiment(
            splits, base_params, config, tok, [task],
            {task.name: (task_train, task_dev)},
            list(ft.ABLATION_VARIANTS), seeds, inject_hyper, ft_hyper)
        report.write_csv(os.path.join(args.out_dir, "ablation_report.csv"))
    else:
        raise CliError(f"unknown recipe {cfg['recipe']!r}")
    write_manifest(args.out_dir, f"experiment:{cfg['recipe']}", cfg,
                   [args.corpus, args.vocab, args.init])
    _log(f"wrote report to {args.out_dir}")
    return 0


def cmd_gradcheck(args):
    cfg = resolve(args, {"seed": 0, "threshold": 1e-3})
    result = gc.run_suite(seed=cfg["seed"])
    for name, err in sorted(result["primitive_errors"].items()):
        _log(f"  {name:<24s} {err:.3e}")
    _log(f"joint loss: {result['joint_loss_error']:.3e}")
    _log(f"corrupted-adjoint control: {result['corrupted_control_error']:.3e}")
    print(f"max relative error: {result['max_error']:.3e}")
    ok = (result["max_error"] < cfg["threshold"]
          and result["corrupted_control_error"] > 1e-1)
    return 0 if ok else 1


def cmd_stats(args):
    records = datagen.load_corpus(args.corpus)
    stats = datagen.corpus_stats(records)
    for k, v in stats.items():
        print(f"{k}\t{v}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="parainject",
        description="Paraphrasal relation injection pipeline")

    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic aligned corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--substitution-prob", type=float, dest="substitution_prob")
    p.add_argument("--reorder-prob", type=float, dest="reorder_prob")
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="build a subword vocabulary")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, dest="vocab_size")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="masked-LM + NSP pre-training")
    common(p)
    p.add_argument("--corpus", required=True, help="one sentence per line, "
                   "blank line between documents")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("inject", help="paraphrasal relation injection")
    common(p)
    p.add_argument("--corpus", required=True, help="JSON-lines aligned pairs")
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", help="initial checkpoint (default: random init)")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--variant", choices=sorted(injection.VARIANTS))
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("finetune", help="fine-tune on a downstream task")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task-name", default="task", dest="task_name")
    p.add_argument("--kind", choices=ft.TASK_KINDS)
    p.add_argument("--metric", choices=ft.METRICS)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("experiment",
                       help="training-size and ablation experiment grids")
    common(p)
    p.add_argument("--recipe", choices=["subsample", "ablation"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", help="base checkpoint (default: random init)")
    p.add_argument("--sizes", help="comma-separated subsample sizes")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, help="max parallel fine-tune cells")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
