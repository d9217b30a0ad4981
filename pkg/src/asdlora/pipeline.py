"""End-to-end glue: features, (pre)training, embeddings, scoring, evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import Manifest, Record, class_table, generate, load_clip
from .detect import AnomalyScore, ReferenceSet, score_many, write_scores
from .dsp import (FeatureStats, Spectrogram, enhance, load_spectrogram, logmel, save_spectrogram,
                  standardize)
from .lora import LoraAdapter, LoraSite, merge
from .metrics import EvalReport, LabeledScore, evaluate
from .model import Encoder, EncoderConfig, extract_patches, param_shapes
from .objective import ArcFaceHead
from .optim import EpochLog, TrainItem, attach_adapters, train

log = logging.getLogger(__name__)


class MissingDomain(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


# --- features ------------------------------------------------------------------

def _cache_name(clip_id: str, fe) -> str:
    key = f"{clip_id}|{fe.win_ms}|{fe.hop_ms}|{fe.n_fft}|{fe.n_mels}|{fe.fmin}|{fe.fmax}"
    return hashlib.sha1(key.encode()).hexdigest()[:20] + ".spec"


def compute_features(manifest: Manifest, records: list[Record], cfg: RunConfig,
                     cache: dict | None = None, cache_dir=None) -> dict[str, Spectrogram]:
    """Log-mel features per clip id; ``cache_dir`` keeps them on disk between runs."""
    fe = cfg.frontend()
    out = {} if cache is None else cache
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    for rec in records:
        if rec.clip_id in out:
            continue
        path = Path(cache_dir) / _cache_name(rec.clip_id, fe) if cache_dir is not None else None
        if path is not None and path.exists():
            out[rec.clip_id] = load_spectrogram(path, fe.hop_ms / 1000, fe.win_ms / 1000)
            continue
        spec = logmel(enhance(load_clip(manifest, rec)), fe)
        if path is not None:
            save_spectrogram(path, spec)
            # Round through the f32 cache so cached and fresh runs see identical inputs.
            spec = load_spectrogram(path, fe.hop_ms / 1000, fe.win_ms / 1000)
        out[rec.clip_id] = spec
    return out


def fit_stats(records, feats) -> FeatureStats:
    return FeatureStats.fit([feats[r.clip_id] for r in records])


def label_table(records, labels: str = "class") -> dict[str, int]:
    if labels == "class":
        return class_table(records)
    names = sorted({r.machine for r in records})
    if len(names) < 2:
        raise ValueError("machine-level labels need >= 2 machines")
    return {n: i for i, n in enumerate(names)}


def label_of(rec: Record, table: dict, labels: str = "class") -> int:
    return table[rec.class_string() if labels == "class" else rec.machine]


def make_items(records, feats, stats, table, labels="class") -> list[TrainItem]:
    return [TrainItem(standardize(feats[r.clip_id], stats), label_of(r, table, labels), r.clip_id)
            for r in records]


# --- model state ---------------------------------------------------------------

@dataclass
class ModelState:
    encoder: Encoder
    head: ArcFaceHead
    stats: FeatureStats
    classes: dict
    labels: str = "class"
    history: list = field(default_factory=list)
    merged: list = field(default_factory=list)  # digests of adapter sets folded into the base

    def tensors(self, include_adapters: bool = True) -> dict:
        t = dict(self.encoder.params)
        t["head.W"] = self.head.W
        t["stats.mean"] = self.stats.mean
        t["stats.std"] = self.stats.std
        if include_adapters:
            for key, ad in self.encoder.adapters.items():
                t[key + ".A"] = ad.A
                t[key + ".B"] = ad.B
        return t

    def meta(self, kind: str = "model") -> dict:
        c = self.encoder.cfg
        return {
            "kind": kind,
            "encoder": {"n_layers": c.n_layers, "d_model": c.d_model, "n_heads": c.n_heads,
                        "patch_freq": c.patch_freq, "patch_time": c.patch_time,
                        "mlp_ratio": c.mlp_ratio, "n_mels": c.n_mels},
            "head": {"scale": self.head.scale, "margin": self.head.margin},
            "classes": self.classes,
            "labels": self.labels,
            "lora": {k: {"rank": a.site.rank, "alpha": a.site.alpha}
                     for k, a in self.encoder.adapters.items()},
            "merged": list(self.merged),
        }

    def save(self, path, kind: str = "model") -> None:
        checkpoint.save(path, self.tensors(), self.meta(kind))


def adapters_from(tensors: dict, meta: dict, dtype=np.float64) -> dict[str, LoraAdapter]:
    out = {}
    for key, info in meta.get("lora", {}).items():
        _, layer, matrix = key.split(".")
        site = LoraSite(int(layer), matrix, int(info["rank"]), float(info["alpha"]))
        out[key] = LoraAdapter(tensors[key + ".A"].astype(dtype),
                               tensors[key + ".B"].astype(dtype), site)
    return out


def load_state(path, dtype=np.float64) -> tuple[ModelState, dict]:
    tensors, meta = checkpoint.load(path, dtype)
    if "encoder" not in meta:
        raise checkpoint.CheckpointError(f"{path}: no encoder configuration in metadata")
    ecfg = EncoderConfig(**meta["encoder"])
    params = {k: tensors[k] for k in param_shapes(ecfg) if k in tensors}
    encoder = Encoder(ecfg, params, adapters_from(tensors, meta, dtype))
    head = ArcFaceHead(tensors["head.W"], meta["head"]["scale"], meta["head"]["margin"])
    stats = FeatureStats(tensors["stats.mean"].astype(np.float64),
                         tensors["stats.std"].astype(np.float64))
    state = ModelState(encoder, head, stats, meta["classes"], meta.get("labels", "class"),
                       merged=list(meta.get("merged", [])))
    return state, meta


class AlreadyMerged(ValueError):
    pass


def adapter_digest(adapters: dict[str, LoraAdapter]) -> str:
    return checkpoint.digest({k + s: getattr(a, s[1:]) for k, a in adapters.items()
                              for s in (".A", ".B")})


def check_adapters(encoder: Encoder, adapters: dict[str, LoraAdapter]) -> None:
    """Every adapter must name an existing k/q/v site and match its shape."""
    d, L = encoder.cfg.d_model, encoder.cfg.n_layers
    for key, ad in adapters.items():
        if not 1 <= ad.site.layer <= L:
            raise DimensionMismatch(f"{key}: layer {ad.site.layer} outside 1..{L}")
        r = ad.site.rank
        if ad.A.shape != (r, d) or ad.B.shape != (d, r):
            raise DimensionMismatch(
                f"{key}: factors {ad.A.shape}/{ad.B.shape} do not fit d_model={d}, rank={r}")


def merge_into_base(state: ModelState, adapters: dict[str, LoraAdapter]) -> ModelState:
    """Fold ``adapters`` into the base weights and drop them; refuses a second merge."""
    check_adapters(state.encoder, adapters)
    tag = adapter_digest(adapters)
    if tag in state.merged:
        raise AlreadyMerged(f"adapter set {tag} is already merged into this checkpoint")
    params = {k: v.copy() for k, v in state.encoder.params.items()}
    for ad in adapters.values():
        name = f"layers.{ad.site.layer}.attn.W{ad.site.matrix}"
        params[name] = merge(ad, params[name].astype(np.float64)).astype(params[name].dtype)
    encoder = Encoder(state.encoder.cfg, params)
    return ModelState(encoder, state.head, state.stats, state.classes, state.labels,
                      list(state.history), state.merged + [tag])


def new_state(cfg: RunConfig, train_records, feats, labels: str = "class") -> ModelState:
    encoder = Encoder.initialize(cfg.encoder_config(), cfg.model.init_seed, cfg.np_dtype)
    table = label_table(train_records, labels)
    stats = fit_stats(train_records, feats)
    head = ArcFaceHead.initialize(cfg.model.d_model, len(table), cfg.seed,
                                  cfg.objective.scale, cfg.objective.margin)
    return ModelState(encoder, head, stats, table, labels)


def relabel(state: ModelState, cfg: RunConfig, train_records, labels: str = "class") -> None:
    """Swap in a fresh ArcFace head for a new label space."""
    table = label_table(train_records, labels)
    state.classes, state.labels = table, labels
    state.head = ArcFaceHead.initialize(cfg.model.d_model, len(table), cfg.seed,
                                        cfg.objective.scale, cfg.objective.margin)


# --- training ------------------------------------------------------------------

@dataclass
class ParamCount:
    sites: int
    trainable: int  # encoder-side: adapters in lora mode, every encoder weight in full mode
    head: int
    total: int  # encoder weights plus adapters

    def lines(self) -> str:
        return (f"sites\t{self.sites}\ntrainable_params\t{self.trainable}\n"
                f"head_params\t{self.head}\ntotal_params\t{self.total}")


def count_params(state: ModelState, mode: str) -> ParamCount:
    enc = state.encoder
    adapters = sum(a.n_params() for a in enc.adapters.values())
    base = enc.n_base_params()
    trainable = adapters if mode == "lora" else base + adapters
    return ParamCount(len(enc.adapters), trainable, int(state.head.W.size), base + adapters)


def _train_records(manifest: Manifest) -> list[Record]:
    recs = manifest.select(split="train")
    if not recs:
        raise ValueError("manifest has no training clips")
    return recs


def pretrain(cfg: RunConfig, manifest: Manifest, feats, on_epoch=None,
             on_start=None) -> ModelState:
    """Full training of a fresh encoder on synthetic labels (stand-in for audio pre-training)."""
    recs = _train_records(manifest)
    state = new_state(cfg, recs, feats, cfg.pretrain.labels)
    items = make_items(recs, feats, state.stats, state.classes, state.labels)
    if on_start is not None:
        on_start(count_params(state, "full"))
    state.history = train(items, state.encoder, state.head, cfg.pretrain_config(),
                          on_epoch=on_epoch)
    return state


def finetune(cfg: RunConfig, manifest: Manifest, feats, state: ModelState | None = None,
             mode: str | None = None, on_epoch=None, on_start=None, plan=None) -> ModelState:
    """ArcFace fine-tuning on attribute classes, LoRA or full.

    Any adapters already on ``state`` are discarded; in lora mode a fresh set
    is attached from ``plan`` (default: the configured plan).
    """
    recs = _train_records(manifest)
    mode = mode or cfg.optim.mode
    if state is None:
        state = new_state(cfg, recs, feats, "class")
    else:
        relabel(state, cfg, recs, "class")
    tcfg = cfg.train_config(mode)
    state.encoder.adapters.clear()
    if mode == "lora":
        tcfg.plan = plan or tcfg.plan
        attach_adapters(state.encoder, tcfg.plan, cfg.seed)
    items = make_items(recs, feats, state.stats, state.classes, "class")
    if on_start is not None:
        on_start(count_params(state, mode))
    state.history = train(items, state.encoder, state.head, tcfg, on_epoch=on_epoch)
    return state


# --- embeddings and scoring -------------------------------------------------------

def embed_records(encoder: Encoder, records, feats, stats, batch_size: int = 16) -> np.ndarray:
    out = np.empty((len(records), encoder.cfg.d_model))
    try:
        patches = [extract_patches(standardize(feats[r.clip_id], stats).frames, encoder.cfg)
                   for r in records]
    except ValueError as exc:
        raise DimensionMismatch(f"features do not fit the checkpoint: {exc}") from None
    i = 0
    while i < len(records):
        j = i + 1
        while j < len(records) and j - i < batch_size and patches[j].shape == patches[i].shape:
            j += 1
        emb, _ = encoder.forward(np.stack(patches[i:j]))
        out[i:j] = emb
        i = j
    return out


def write_embeddings(path, records, vectors, classes=None) -> None:
    with open(path, "w") as fh:
        for rec, v in zip(records, vectors):
            cid = classes.get(rec.class_string()) if classes else None
            fh.write(json.dumps({
                "clip_id": rec.clip_id, "machine": rec.machine, "domain": rec.domain,
                "split": rec.split, "label": rec.label, "class_id": cid,
                "dim": int(len(v)), "values": [float(x) for x in v],
            }) + "\n")


def read_embeddings(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                if len(r["values"]) != r["dim"]:
                    raise ValueError(f"{r['clip_id']}: dim {r['dim']} but {len(r['values'])} values")
                rows.append(r)
    return rows


def score_rows(train_rows, test_rows, k: int = 1, single_detector: bool = False):
    """Per machine: source/target reference sets from train rows, then score test rows."""
    scores: list[AnomalyScore] = []
    machines: list[str] = []
    for machine in sorted({r["machine"] for r in test_rows}):
        refs = {}
        for domain in ("source", "target"):
            rows = [r for r in train_rows if r["machine"] == machine and r["domain"] == domain]
            if rows:
                refs[domain] = ReferenceSet.build(domain, [r["values"] for r in rows],
                                                  [r["clip_id"] for r in rows])
            elif not single_detector:
                raise MissingDomain(
                    f"machine {machine!r} has no {domain}-domain training embeddings; "
                    "rerun with --single-detector to score against the available domain only")
        if not refs:
            raise MissingDomain(f"machine {machine!r} has no training embeddings")
        test = [r for r in test_rows if r["machine"] == machine]
        scores += score_many(np.array([r["values"] for r in test]), [r["clip_id"] for r in test],
                             refs.get("source"), refs.get("target"), k)
        machines += [machine] * len(test)
    return scores, machines


def labeled_scores(scores, manifest: Manifest) -> list[LabeledScore]:
    by_id = {r.clip_id: r for r in manifest.records}
    out = []
    for s in scores:
        cid = s["clip_id"] if isinstance(s, dict) else s.clip_id
        value = s["score"] if isinstance(s, dict) else s.score
        rec = by_id[cid]
        out.append(LabeledScore(value, rec.label, rec.domain, rec.machine, cid))
    return out


def rows_for(records, vectors) -> list[dict]:
    return [{"clip_id": r.clip_id, "machine": r.machine, "domain": r.domain,
             "values": v} for r, v in zip(records, vectors)]


def evaluate_state(cfg: RunConfig, manifest: Manifest, feats, state: ModelState) -> EvalReport:
    train_recs = manifest.select(split="train")
    test_recs = manifest.select(split="test")
    tr = embed_records(state.encoder, train_recs, feats, state.stats)
    te = embed_records(state.encoder, test_recs, feats, state.stats)
    scores, _ = score_rows(rows_for(train_recs, tr), rows_for(test_recs, te),
                           cfg.detect.k, cfg.detect.single_detector)
    return evaluate(labeled_scores(scores, manifest), cfg.metrics.p, cfg.metrics.mcclish)


def write_log(directory, history: list[EpochLog], name: str = "train_log") -> None:
    d = Path(directory)
    with open(d / f"{name}.tsv", "w") as fh:
        fh.write("epoch\tstep\tlr\tloss\tacc\n")
        for rec in history:
            fh.write(rec.tsv() + "\n")
    with open(d / f"{name}.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec.as_dict()) + "\n")


# --- whole pipeline ----------------------------------------------------------------

@dataclass
class RunResult:
    report: EvalReport
    baseline: EvalReport | None
    seconds: float


def run_all(cfg: RunConfig, out, baseline: bool = False, on_start=None,
            corpus=None) -> RunResult:
    """Generate (or reuse) a corpus, pretrain, fine-tune, embed, score and evaluate.

    Writes the corpus, checkpoints, logs, embeddings, scores and the report under ``out``.
    """
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    if corpus is None:
        manifest = generate(cfg.machine_specs(), cfg.counts(), cfg.data.clip_seconds,
                            cfg.seed, out / "corpus")
    else:
        manifest = Manifest.read(Path(corpus) / "manifest.jsonl")
    feats = compute_features(manifest, manifest.records, cfg)
    train_recs, test_recs = manifest.select(split="train"), manifest.select(split="test")

    base_report = None
    if baseline:
        base_report = evaluate_state(cfg, manifest, feats, new_state(cfg, train_recs, feats))
        (out / "baseline_report.txt").write_text(base_report.to_text() + "\n")

    state = pretrain(cfg, manifest, feats)
    state.save(out / "pretrain.ckpt", "pretrain")
    write_log(out, state.history, "pretrain_log")
    state = finetune(cfg, manifest, feats, state, cfg.optim.mode, on_start=on_start)
    state.save(out / "model.ckpt", "model")
    write_log(out, state.history)

    tr = embed_records(state.encoder, train_recs, feats, state.stats)
    te = embed_records(state.encoder, test_recs, feats, state.stats)
    write_embeddings(out / "embeddings_train.jsonl", train_recs, tr, state.classes)
    write_embeddings(out / "embeddings_test.jsonl", test_recs, te, state.classes)
    scores, machines = score_rows(rows_for(train_recs, tr), rows_for(test_recs, te),
                                  cfg.detect.k, cfg.detect.single_detector)
    write_scores(out / "scores.csv", scores, machines)
    report = evaluate(labeled_scores(scores, manifest), cfg.metrics.p, cfg.metrics.mcclish)
    (out / "report.txt").write_text(report.to_text() + "\n")
    return RunResult(report, base_report, time.perf_counter() - t0)
