"""Command-line front end: ``traceprune {train,sweep,prune,eval,trace}``.

Defaults reproduce the full 6-block, 384-wide configuration; ``--tiny``
switches to a 4-block, 128-wide model with a 64-token context for quick runs.
Every command writes a ``manifest.json`` with the resolved settings before any
other output, and never writes into the checkpoint it reads from.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import load_checkpoint
from .harness import (Trainer, TrainConfig, corpus_sha256, load_corpus, prune_and_finetune, sweep,
                      train)
from .model import TINY, ModelConfig
from .pruner import model_sparsity
from .tracker import export_traces

log = logging.getLogger("traceprune")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, args: dict, mcfg: Optional[ModelConfig],
                   tcfg: Optional[TrainConfig], corpus: Optional[dict]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "traceprune",
        "version": __version__,
        "command": command,
        "args": args,
        "model_config": mcfg.to_dict() if mcfg else None,
        "train_config": tcfg.to_dict() if tcfg else None,
        "corpus": corpus,
        "seed": tcfg.seed if tcfg else None,
        "started_at": _now(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _finish_manifest(path: Path) -> None:
    manifest = json.loads(path.read_text())
    manifest["finished_at"] = _now()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _levels(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--levels expects comma-separated fractions, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("--levels is empty")
    return vals


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    preset = dict(TINY) if args.tiny else {}
    for flag, key in [("embed", "embed_dim"), ("heads", "n_heads"), ("blocks", "n_blocks"),
                      ("ffn", "ffn_dim"), ("ctx", "context_len")]:
        val = getattr(args, flag)
        if val is not None:
            preset[key] = val
    if "ffn_dim" not in preset and "embed_dim" in preset:
        preset["ffn_dim"] = 4 * preset["embed_dim"]
    mcfg = ModelConfig(seed=args.seed, **preset)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch, learn_rate=args.lr, seed=args.seed,
                       eval_interval=args.eval_interval, finetune_steps=args.finetune_steps)
    tcfg.validate()
    return mcfg, tcfg


def _corpus_for(ckpt_meta: dict, override: Optional[str]):
    info = ckpt_meta.get("corpus") or {}
    path = override or info.get("path")
    if not path:
        raise ValueError("checkpoint does not record its corpus; pass --corpus")
    digest = corpus_sha256(path)
    if info.get("sha256") and info["sha256"] != digest:
        raise ValueError(f"corpus {path} does not match the one the checkpoint was trained on")
    tcfg = TrainConfig.from_dict(ckpt_meta["train_config"])
    return load_corpus(path, tcfg.split), {"path": str(Path(path).resolve()), "sha256": digest}


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _train_run(args, out: Path, command: str = "train") -> tuple[Trainer, dict]:
    mcfg, tcfg = _configs(args)
    corpus_info = {"path": str(Path(args.corpus).resolve()), "sha256": corpus_sha256(args.corpus)}
    corpus = load_corpus(args.corpus, tcfg.split)
    mcfg = dataclasses.replace(mcfg, vocab_size=len(corpus[0]))
    manifest = write_manifest(out, command, _resolved(args), mcfg, tcfg, corpus_info)
    res = train(tcfg, mcfg, corpus)
    res.trainer.save(out / "ckpt", corpus=corpus_info, baseline_val_loss=res.baseline_val_loss)
    res.log.write_csv(out / "loss_log.csv")
    if res.trainer.recorder is not None and res.trainer.step >= 2:
        export_traces(res.trainer.recorder.histories(), out / "traces.csv")
    _finish_manifest(manifest)
    print(f"trained {res.trainer.step} steps: val loss {res.baseline_val_loss:.4f} "
          f"({res.params.num_params():,} parameters) -> {out / 'ckpt'}")
    return res.trainer, corpus_info


def cmd_train(args) -> int:
    _train_run(args, Path(args.out))
    return 0


def cmd_sweep(args) -> int:
    out = Path(args.out)
    if args.from_:
        ckpt = load_checkpoint(args.from_)
        corpus, corpus_info = _corpus_for(ckpt.meta, args.corpus)
        trainer = Trainer.from_checkpoint(ckpt, corpus[1], corpus[2])
        if args.finetune_steps is not None:
            trainer.tcfg = dataclasses.replace(trainer.tcfg, finetune_steps=args.finetune_steps)
        manifest = write_manifest(out, "sweep", _resolved(args), trainer.mcfg, trainer.tcfg, corpus_info)
    else:
        trainer, corpus_info = _train_run(args, out, "sweep")
        manifest = out / "manifest.json"
    report = sweep(args.levels, trainer, jobs=args.jobs, meta={"corpus_sha256": corpus_info["sha256"]})
    report.write_csv(out / "sweep.csv")
    report.write_json(out / "sweep.json")
    print(report.format_table())
    _finish_manifest(manifest)
    return 0


def cmd_prune(args) -> int:
    if (args.target is None) == (args.rate is None):
        raise ValueError("prune needs exactly one of --target or --rate")
    src = Path(args.from_)
    ckpt = load_checkpoint(src)
    corpus, corpus_info = _corpus_for(ckpt.meta, args.corpus)
    trainer = Trainer.from_checkpoint(ckpt, corpus[1], corpus[2])
    tag = f"target-{args.target:g}" if args.target is not None else f"rate-{args.rate:g}"
    out = Path(args.out) if args.out else src.parent / f"pruned-{tag}"
    if out.resolve() == src.parent.resolve():
        raise ValueError("--out must differ from the input checkpoint's directory")
    tcfg = trainer.tcfg
    if args.finetune_steps is not None:
        tcfg = dataclasses.replace(tcfg, finetune_steps=args.finetune_steps)
    manifest = write_manifest(out, "prune", _resolved(args), trainer.mcfg, tcfg, corpus_info)
    res = prune_and_finetune(trainer.params, trainer.tracker, tcfg, trainer.mcfg, corpus[1], corpus[2],
                             target=args.target, rate=args.rate, per_layer=args.per_layer_sigma)
    ft = res.trainer
    ft.tracker = trainer.tracker
    ft.save(out / "ckpt", corpus=corpus_info, source_checkpoint=str(src.resolve()),
            pre_finetune_loss=res.pre_finetune_loss, val_loss=res.val_loss)
    _finish_manifest(manifest)
    print(f"pruned {res.mask.n_pruned:,}/{res.mask.n_total:,} prunable weights "
          f"(compression {res.mask.achieved_compression:.4f}, prune rate {res.mask.prune_rate:.4f}); "
          f"val loss {res.pre_finetune_loss:.4f} -> {res.val_loss:.4f} after {tcfg.finetune_steps} "
          f"fine-tune steps -> {out / 'ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.from_)
    corpus, _ = _corpus_for(ckpt.meta, args.corpus)
    trainer = Trainer.from_checkpoint(ckpt, corpus[1], corpus[2])
    val = trainer.evaluate()
    prunable = trainer.params.prunable_names()
    if trainer.mask is not None:
        compression = trainer.mask.achieved_compression
    else:
        compression = model_sparsity(trainer.params, prunable)
    result = {
        "val_loss": val,
        "compression": compression,
        "model_sparsity": model_sparsity(trainer.params),
        "parameters": trainer.params.num_params(),
        "step": trainer.step,
    }
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"val_loss={val:.4f} compression={compression:.4f} "
              f"model_sparsity={result['model_sparsity']:.4f} parameters={result['parameters']}")
    return 0


def cmd_trace(args) -> int:
    src = Path(args.from_)
    ckpt = load_checkpoint(src)
    samples = ckpt.meta.get("trace_samples")
    if not samples or "trace/values" not in ckpt.tensors:
        raise ValueError(f"{src} holds no weight traces")
    table = ckpt.tensors["trace/values"]
    histories = {f"{name}[{idx}]": table[:, j] for j, (name, idx) in enumerate(samples)}
    out = Path(args.out) if args.out else src.parent / "traces_export.csv"
    if out.resolve() == src.resolve():
        raise ValueError("--out must not overwrite the input checkpoint")
    out.parent.mkdir(parents=True, exist_ok=True)
    export_traces(histories, out)
    print(f"wrote {len(histories)} weight traces x {table.shape[0]} steps -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="traceprune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, with_corpus_required: bool):
        sp.add_argument("--corpus", required=with_corpus_required, default=None, help="UTF-8 text file")
        sp.add_argument("--steps", type=int, default=5000)
        sp.add_argument("--batch", type=int, default=64)
        sp.add_argument("--lr", type=float, default=3e-4)
        sp.add_argument("--seed", type=int, default=1337)
        sp.add_argument("--ctx", type=int, default=None, help="context length (default 256)")
        sp.add_argument("--embed", type=int, default=None, help="embedding width (default 384)")
        sp.add_argument("--heads", type=int, default=None)
        sp.add_argument("--blocks", type=int, default=None)
        sp.add_argument("--ffn", type=int, default=None, help="FFN hidden width (default 4 x embed)")
        sp.add_argument("--eval-interval", type=int, default=500)
        sp.add_argument("--tiny", action="store_true", help="embed 128, heads 4, blocks 4, ctx 64")

    sp = sub.add_parser("train", help="train from scratch while tracking weights")
    model_flags(sp, True)
    sp.add_argument("--finetune-steps", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="prune + fine-tune at several compression levels")
    model_flags(sp, False)
    sp.add_argument("--from", dest="from_", default=None, help="trained checkpoint (skips training)")
    sp.add_argument("--levels", type=_levels, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.94])
    sp.add_argument("--finetune-steps", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("prune", help="prune one checkpoint and fine-tune under the mask")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--target", type=float, default=None, help="compression fraction in [0, 1)")
    sp.add_argument("--rate", type=float, default=None, help="prune rate (threshold = std x rate)")
    sp.add_argument("--per-layer-sigma", action="store_true", help="one std per tensor (with --rate)")
    sp.add_argument("--finetune-steps", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("eval", help="report validation loss and sparsity of a checkpoint")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("trace", help="export sampled weight trajectories as CSV")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sweep":
        if args.from_ is None and args.corpus is None:
            parser.error("sweep needs --from CHECKPOINT or --corpus to train first")
        if args.out is None:
            args.out = str(Path(args.from_).parent / "sweep") if args.from_ else "sweep"
    if args.command == "sweep" and args.finetune_steps is None and args.from_ is None:
        args.finetune_steps = 50
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("TRACEPRUNE_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any runtime failure
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"traceprune {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
