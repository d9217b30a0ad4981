"""LoRA ablation grids: rank, matrix subset, layer range and rank-multiplier tables.

Every cell fine-tunes a copy of one pretrained encoder on all machines, then
reports the official score on the dev machines (all but the last) and on the
eval machine (the last), plus their harmonic mean.
"""

from __future__ import annotations

import configparser
import copy
import csv
import itertools
import logging
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig
from .data import Manifest, generate
from .lora import trainable_params
from .metrics import hmean

log = logging.getLogger(__name__)

COLUMNS = ("plan", "trainable_params", "dev_score", "eval_score", "hmean", "status")
TABLE_RANK = 64  # rank used by the matrix, layer and multiplier tables


@dataclass
class Cell:
    label: str
    overrides: tuple  # ("section.key", "value") pairs applied on top of the run config

    def config(self, base: RunConfig, seed: int | None = None) -> RunConfig:
        cfg = copy.deepcopy(base)
        for key, value in self.overrides:
            cfg.set(key, value)
        if seed is not None:
            cfg.run.seed = seed
        cfg.validate()
        return cfg


def _lora(label, **keys) -> Cell:
    pairs = [("optim.mode", "lora"), ("lora.multipliers", "")]
    pairs += [(f"lora.{k}", str(v)) for k, v in keys.items()]
    return Cell(label, tuple(pairs))


def builtin_table(name: str, cfg: RunConfig) -> list[Cell]:
    L = cfg.model.n_layers
    every = f"1-{L}"
    half = L // 2
    if name == "2":
        cells = [Cell("Full fine-tune", (("optim.mode", "full"),))]
        cells += [_lora(f"r = {r}", rank=r, matrices="q,v", layers=every)
                  for r in (4, 8, 16, 32, 64, 128)]
        return cells
    if name == "3":
        subsets = ("k", "q", "v", "k,v", "k,q", "k,q,v", "q,v")
        return [_lora(s.replace(",", ", "), rank=TABLE_RANK, matrices=s, layers=every)
                for s in subsets]
    if name == "5":
        t = L // 3
        ranges = (f"1-{t}", f"{t + 1}-{2 * t}", f"{2 * t + 1}-{L}", f"1-{2 * t}",
                  f"1-{t},{2 * t + 1}-{L}", f"{t + 1}-{L}", every)
        return [_lora(r, rank=TABLE_RANK, matrices="q,v", layers=r) for r in ranges]
    if name == "6":
        strategies = (("Base", ""), ("v 1.5x", "matrix=v:1.5"),
                      ("latter half 1.5x", f"layer>{half}:1.5"),
                      ("latter half v 1.5x", f"layer>{half}&matrix=v:1.5"))
        return [_lora(label, rank=TABLE_RANK, matrices="q,v", layers=every,
                      multipliers=mult) for label, mult in strategies]
    raise ConfigError(f"no built-in ablation table {name!r}; choose 2, 3, 5 or 6")


def read_grid(path, cfg: RunConfig) -> list[Cell]:
    """Grid file: a ``[grid]`` section of ``|``-separated alternatives (cross product)
    and/or ``[cell.<label>]`` sections listing explicit overrides."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cells = []
    if parser.has_section("grid"):
        keys = list(parser["grid"])
        choices = [[v.strip() for v in parser["grid"][k].split("|")] for k in keys]
        for combo in itertools.product(*choices):
            label = " ".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
            cells.append(Cell(label, tuple(zip(keys, combo))))
    for section in parser.sections():
        if section == "grid":
            continue
        if not section.startswith("cell."):
            raise ConfigError(f"{path}: unknown grid section [{section}]")
        cells.append(Cell(section[5:], tuple(parser[section].items())))
    if not cells:
        raise ConfigError(f"{path}: grid defines no cells")
    for cell in cells:  # reject typos before any training starts
        cell.config(cfg)
    return cells


def expected_params(cfg: RunConfig, mode: str) -> int | None:
    if mode != "lora":
        return None
    return trainable_params(cfg.lora_plan(), cfg.model.n_layers, cfg.model.d_model)


@dataclass
class CellResult:
    label: str
    trainable: int | None
    dev: float | None
    eval: float | None
    status: str

    @property
    def hmean(self) -> float | None:
        if self.dev is None or self.eval is None:
            return None
        if min(self.dev, self.eval) <= 0:
            return 0.0
        return hmean([self.dev, self.eval])

    def row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
        return [self.label, "" if self.trainable is None else self.trainable,
                fmt(self.dev), fmt(self.eval), fmt(self.hmean), self.status]


def run_cell(cell: Cell, base: RunConfig, corpus: Path, init: Path, feature_dir: Path,
             seeds: int = 1) -> CellResult:
    """Train and score one cell, averaging over ``seeds`` consecutive seeds."""
    try:
        manifest = Manifest.read(corpus / "manifest.jsonl")
        machines = manifest.machines()
        if len(machines) < 2:
            raise ValueError("dev/eval split needs at least two machines")
        feats = pipeline.compute_features(manifest, manifest.records, base,
                                          cache_dir=feature_dir)
        devs, evals, counted = [], [], None
        for i in range(seeds):
            cfg = cell.config(base, base.seed + i)
            state, _ = pipeline.load_state(init, cfg.np_dtype)
            state = pipeline.finetune(cfg, manifest, feats, state, cfg.optim.mode)
            counted = pipeline.count_params(state, cfg.optim.mode)
            want = expected_params(cfg, cfg.optim.mode)
            if want is not None and counted.trainable != want:
                raise AssertionError(f"attached {counted.trainable} adapter parameters, "
                                     f"plan accounts for {want}")
            report = pipeline.evaluate_state(cfg, manifest, feats, state)
            devs.append(report.subset(machines[:-1]).official)
            evals.append(report.subset(machines[-1:]).official)
        return CellResult(cell.label, counted.trainable, sum(devs) / seeds,
                          sum(evals) / seeds, "ok")
    except Exception as exc:  # a failed cell must not stop the grid
        log.warning("cell %r failed: %s", cell.label, exc)
        return CellResult(cell.label, None, None, None, f"failed: {type(exc).__name__}: {exc}")


def _run_cell_star(args):
    return run_cell(*args)


def write_table(path, results: list[CellResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in results:
            w.writerow(r.row())


def prepare(cfg: RunConfig, out: Path, corpus: Path | None = None,
            init: Path | None = None) -> tuple[Path, Path, Path]:
    """Corpus, pretrained checkpoint and feature cache shared by every cell."""
    out = Path(out)
    feature_dir = out / "features"
    if corpus is None:
        corpus = out / "corpus"
        if not (corpus / "manifest.jsonl").exists():
            generate(cfg.machine_specs(), cfg.counts(), cfg.data.clip_seconds, cfg.seed, corpus)
    manifest = Manifest.read(Path(corpus) / "manifest.jsonl")
    if init is None:
        init = out / "pretrain.ckpt"
        if not init.exists():
            feats = pipeline.compute_features(manifest, manifest.select(split="train"), cfg,
                                              cache_dir=feature_dir)
            pipeline.pretrain(cfg, manifest, feats).save(init, "pretrain")
    return Path(corpus), Path(init), feature_dir


def run_tables(cfg: RunConfig, tables: dict[str, list[Cell]], out, corpus=None, init=None,
               seeds: int = 1, jobs: int = 1) -> dict:
    """Run every cell of every table; returns {table: (csv path, [(label, error)])}."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    corpus, init, feature_dir = prepare(cfg, out, corpus, init)
    jobs_list = [(cell, cfg, corpus, init, feature_dir, seeds)
                 for cells in tables.values() for cell in cells]
    if jobs > 1:
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            results = pool.map(_run_cell_star, jobs_list, chunksize=1)
    else:
        results = [_run_cell_star(j) for j in jobs_list]
    summary, i = {}, 0
    for name, cells in tables.items():
        chunk = results[i:i + len(cells)]
        i += len(cells)
        path = out / f"{name}.csv"
        write_table(path, chunk)
        summary[name] = (path, [(r.label, r.status) for r in chunk if r.status != "ok"])
    return summary
