"""Command-line entry point: ``asdlora <command> [options]``.

Exit codes
    0  success
    2  configuration error
    3  file or directory problem
    4  training diverged
    5  dimension or adapter-site mismatch, or a repeated merge
    6  a machine lacks a source or target reference set
    7  test clips without normal/anomaly labels
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import ablate as ablation
from . import checkpoint, pipeline
from .config import ConfigError, RunConfig
from .data import Manifest, generate, read_dcase_layout
from .detect import write_scores, read_scores
from .metrics import evaluate
from .optim import TrainingDiverged

log = logging.getLogger("asdlora")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_DOMAIN, EXIT_LABELS = 2, 3, 4, 5, 6, 7


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- shared helpers ------------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    return RunConfig.load(args.config, overrides)


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError("--out is required for this command", EXIT_CONFIG)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", EXIT_IO) from None
    return out


def load_manifest(path) -> Manifest:
    """Accept a manifest file, a directory holding one, or a bare DCASE-style tree."""
    path = Path(path)
    if path.is_file():
        return Manifest.read(path)
    if (path / "manifest.jsonl").is_file():
        return Manifest.read(path / "manifest.jsonl")
    if path.is_dir():
        manifest, _ = read_dcase_layout(path)
        if not manifest.records:
            raise CliError(f"no usable clips under {path}", EXIT_IO)
        return manifest
    raise CliError(f"no manifest or corpus at {path}", EXIT_IO)


def _features(cfg, manifest, records, args):
    cache = getattr(args, "feature_cache", None)
    return pipeline.compute_features(manifest, records, cfg, cache_dir=cache)


def _announce(count: pipeline.ParamCount) -> None:
    print(count.lines(), flush=True)


def _save_run(out: Path, state: pipeline.ModelState, cfg: RunConfig, name: str, kind: str):
    state.save(out / f"{name}.ckpt", kind)
    if state.encoder.adapters:
        tensors = {k + s: getattr(a, s[1:]) for k, a in state.encoder.adapters.items()
                   for s in (".A", ".B")}
        meta = state.meta("adapters")
        meta["base_digest"] = checkpoint.digest(state.encoder.params)
        checkpoint.save(out / "adapters.ckpt", tensors, meta)
    pipeline.write_log(out, state.history, f"{name}_log" if name != "model" else "train_log")
    cfg.write(out)


# --- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    t0 = time.time()
    manifest = generate(cfg.machine_specs(), cfg.counts(), cfg.data.clip_seconds, cfg.seed, out)
    cfg.write(out)
    log.info("generated %d clips in %.1fs", len(manifest.records), time.time() - t0)
    print(f"clips\t{len(manifest.records)}\nmanifest\t{out / 'manifest.jsonl'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    manifest = load_manifest(args.data)
    feats = _features(cfg, manifest, manifest.select(split="train"), args)
    state = pipeline.pretrain(cfg, manifest, feats, on_start=_announce)
    _save_run(out, state, cfg, "pretrain", "pretrain")
    print(f"final_loss\t{state.history[-1].loss:.6f}\nfinal_acc\t{state.history[-1].acc:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    manifest = load_manifest(args.data)
    feats = _features(cfg, manifest, manifest.select(split="train"), args)
    state = None
    if args.init:
        state, _ = pipeline.load_state(args.init, cfg.np_dtype)
    else:
        log.warning("no --init checkpoint: fine-tuning a randomly initialised encoder")
    try:
        state = pipeline.finetune(cfg, manifest, feats, state, args.mode, on_start=_announce)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            checkpoint.save(out / "last_good.ckpt", exc.last_good, {"kind": "last_good"})
        pipeline.write_log(out, exc.history)
        raise
    _save_run(out, state, cfg, "model", "model")
    print(f"final_loss\t{state.history[-1].loss:.6f}\nfinal_acc\t{state.history[-1].acc:.4f}")
    return 0


def cmd_embed(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    manifest = load_manifest(args.data)
    state, _ = pipeline.load_state(args.model, cfg.np_dtype)
    splits = ("train", "test") if args.split == "all" else (args.split,)
    for split in splits:
        recs = manifest.select(split=split)
        feats = _features(cfg, manifest, recs, args)
        vectors = pipeline.embed_records(state.encoder, recs, feats, state.stats)
        path = out / f"embeddings_{split}.jsonl"
        pipeline.write_embeddings(path, recs, vectors, state.classes)
        print(f"{split}\t{len(recs)}\t{path}")
    return 0


def _read_store(path):
    try:
        return pipeline.read_embeddings(path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from None


def cmd_score(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    src = Path(args.embeddings)
    train_path = Path(args.train) if args.train else src / "embeddings_train.jsonl"
    test_path = Path(args.test) if args.test else src / "embeddings_test.jsonl"
    train_rows, test_rows = _read_store(train_path), _read_store(test_path)
    dims = {r["dim"] for r in train_rows + test_rows}
    if len(dims) > 1:
        raise CliError(f"embedding stores mix dimensions {sorted(dims)}", EXIT_MISMATCH)
    single = args.single_detector or cfg.detect.single_detector
    k = args.k if args.k is not None else cfg.detect.k
    scores, machines = pipeline.score_rows(train_rows, test_rows, k, single)
    path = out / "scores.csv"
    write_scores(path, scores, machines)
    print(f"scores\t{len(scores)}\t{path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.data)
    rows = read_scores(args.scores)
    by_id = {r.clip_id: r for r in manifest.records}
    unknown = [r["clip_id"] for r in rows if r["clip_id"] not in by_id]
    if unknown:
        raise CliError(f"{len(unknown)} scored clip(s) missing from the manifest, "
                       f"e.g. {unknown[0]}", EXIT_LABELS)
    unlabeled = [r["clip_id"] for r in rows if by_id[r["clip_id"]].label not in ("normal", "anomaly")]
    if unlabeled:
        raise CliError(f"{len(unlabeled)} test clip(s) carry no normal/anomaly label, "
                       f"e.g. {unlabeled[0]}", EXIT_LABELS)
    p = args.p if args.p is not None else cfg.metrics.p
    mcclish = args.mcclish or cfg.metrics.mcclish
    report = evaluate(pipeline.labeled_scores(rows, manifest), p, mcclish)
    text = {"text": report.to_text, "csv": report.to_csv, "jsonl": report.to_jsonl}[args.format]()
    print(text.rstrip("\n"))
    if args.out:
        out = _out_dir(args)
        ext = {"text": "txt", "csv": "csv", "jsonl": "jsonl"}[args.format]
        (out / f"report.{ext}").write_text(text if text.endswith("\n") else text + "\n")
    return 0


def cmd_merge_lora(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    state, _ = pipeline.load_state(args.model, cfg.np_dtype)
    if args.adapters:
        tensors, meta = checkpoint.load(args.adapters, cfg.np_dtype)
        adapters = pipeline.adapters_from(tensors, meta, cfg.np_dtype)
        state.encoder.adapters.clear()
    else:
        adapters = dict(state.encoder.adapters)
        state.encoder.adapters.clear()
    merged = pipeline.merge_into_base(state, adapters)
    path = out / "merged.ckpt"
    merged.save(path, "merged")
    print(f"merged_sites\t{len(adapters)}\ncheckpoint\t{path}")
    return 0


def cmd_run(args) -> int:
    """gen-data, pretrain, LoRA train, embed, score and eval in one go."""
    cfg = _config(args)
    out = _out_dir(args)
    result = pipeline.run_all(cfg, out, baseline=args.baseline, on_start=_announce)
    if result.baseline is not None:
        print(f"baseline_official\t{result.baseline.official:.4f}")
    print(result.report.to_text())
    print(f"official\t{result.report.official:.4f}\nseconds\t{result.seconds:.1f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if args.grid:
        tables = {Path(args.grid).stem: ablation.read_grid(args.grid, cfg)}
    else:
        names = args.table or ["2", "3", "5", "6"]
        tables = {f"table{n}": ablation.builtin_table(n, cfg) for n in names}
    corpus = Path(args.data) if args.data else None
    summary = ablation.run_tables(cfg, tables, out, corpus=corpus, init=args.init,
                                  seeds=args.seeds, jobs=args.jobs)
    for name, (path, failures) in summary.items():
        print(f"{name}\t{path}")
        for label, message in failures:
            print(f"cell {label!r} in {name} failed: {message}", file=sys.stderr)
    n_fail = sum(len(f) for _, f in summary.values())
    if n_fail:
        print(f"{n_fail} cell(s) failed; see the status column", file=sys.stderr)
    return 0


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")

    parser = argparse.ArgumentParser(prog="asdlora", description=__doc__.split("\n")[0],
                                     epilog=__doc__.split("\n", 1)[1],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("pretrain", cmd_pretrain, "fully train a fresh encoder"),
                                 ("train", cmd_train, "ArcFace fine-tuning, LoRA or full")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True, help="corpus directory or manifest")
        p.add_argument("--feature-cache", help="directory for cached log-mel features")
        if name == "train":
            p.add_argument("--init", help="checkpoint to start from (e.g. pretrain.ckpt)")
            p.add_argument("--mode", choices=("lora", "full"))
        p.set_defaults(func=func)

    p = sub.add_parser("embed", parents=[common], help="write clip embeddings (JSON lines)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--feature-cache")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", parents=[common], help="nearest-neighbour anomaly scores")
    p.add_argument("--embeddings", default=".", help="directory holding embeddings_*.jsonl")
    p.add_argument("--train", help="train embedding store (overrides --embeddings)")
    p.add_argument("--test", help="test embedding store (overrides --embeddings)")
    p.add_argument("--k", type=int)
    p.add_argument("--single-detector", action="store_true",
                   help="score against whichever domain has references")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="AUC / pAUC / official score")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--p", type=float)
    p.add_argument("--mcclish", action="store_true")
    p.add_argument("--format", choices=("text", "csv", "jsonl"), default="text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="LoRA placement and rank grids")
    p.add_argument("--table", action="append", choices=("2", "3", "5", "6"))
    p.add_argument("--grid", help="custom grid file")
    p.add_argument("--data", help="existing corpus (default: generate one under --out)")
    p.add_argument("--init", help="pretrained checkpoint (default: pretrain once under --out)")
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell, averaged")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("merge-lora", parents=[common], help="fold adapters into base weights")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", help="adapter checkpoint (default: the model's own)")
    p.set_defaults(func=cmd_merge_lora)

    p = sub.add_parser("run", parents=[common], help="whole pipeline on a fresh corpus")
    p.add_argument("--baseline", action="store_true",
                   help="also score the untrained encoder")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (pipeline.DimensionMismatch, pipeline.AlreadyMerged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except pipeline.MissingDomain as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except checkpoint.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
