"""Adam, linear warmup, and the ArcFace fine-tuning loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import SpecAugPolicy, Spectrogram, clip_seed, specaug
from .lora import LoraPlan, expand_plan, init_adapter
from .model import Encoder, extract_patches
from .objective import ArcFaceHead, arcface_grad, predict

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: dict | None = None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, over the tensors in ``grads``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: grad shape {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(params[name].dtype)


@dataclass
class Schedule:
    peak_lr: float = 5e-5
    warmup_steps: int = 1
    total_steps: int = 1

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}/{self.total_steps}")


def lr_at(step: int, sched: Schedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return sched.peak_lr * min(step / sched.warmup_steps, 1.0)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    mode: str = "lora"
    plan: LoraPlan | None = None
    peak_lr: float = 5e-5
    warmup_frac: float = 0.1
    clip_norm: float | None = None
    specaug: SpecAugPolicy | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.mode not in ("lora", "full"):
            raise ValueError(f"mode must be 'lora' or 'full', got {self.mode!r}")
        if self.mode == "lora" and self.plan is None:
            raise ValueError("lora mode needs a LoraPlan")


@dataclass
class TrainItem:
    spec: Spectrogram  # standardized
    label: int
    clip_id: str


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr: float
    loss: float
    acc: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.step}\t{self.lr:.6e}\t{self.loss:.6f}\t{self.acc:.4f}"

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "lr": self.lr,
                "loss": self.loss, "acc": self.acc}


def attach_adapters(encoder: Encoder, plan: LoraPlan, seed: int) -> list:
    d = encoder.cfg.d_model
    sites = expand_plan(plan, encoder.cfg.n_layers, d)
    for site in sites:
        encoder.adapters[site.key] = init_adapter(site, seed, d, d, dtype=encoder.dtype)
    return sites


def trainable_names(encoder: Encoder, mode: str) -> list[str]:
    if mode == "lora":
        names = [k + s for k in encoder.adapters for s in (".A", ".B")]
    else:
        names = list(encoder.params) + [k + s for k in encoder.adapters for s in (".A", ".B")]
    return names + ["head.W"]


def params_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def _batches(items, batch_size):
    for i in range(0, len(items), batch_size):
        yield items[i:i + batch_size]


def train(items: list[TrainItem], encoder: Encoder, head: ArcFaceHead, cfg: TrainConfig,
          on_epoch=None, on_step=None) -> list[EpochLog]:
    """Fine-tune ``encoder`` (adapters only in lora mode) and ``head`` in place.

    Adapters must already be attached in lora mode.  Returns per-epoch logs.
    """
    labels = {it.label for it in items}
    if len(labels) < 2:
        raise ValueError("training set has a single class; the proxy task is degenerate")
    if cfg.mode == "lora" and not encoder.adapters:
        raise ValueError("lora mode but the encoder carries no adapters")
    names = trainable_names(encoder, cfg.mode)
    enc_names = set(names) - {"head.W"}
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    sched = Schedule(cfg.peak_lr, max(1, round(cfg.warmup_frac * total)), total)
    state = AdamState()
    rng = np.random.default_rng(clip_seed(cfg.seed, "shuffle"))
    history: list[EpochLog] = []
    last_good = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(items))
        loss_sum, correct = 0.0, 0
        for batch in _batches([items[i] for i in order], cfg.batch_size):
            frames = []
            for it in batch:
                s = it.spec
                if cfg.specaug is not None:
                    s = specaug(s, cfg.specaug, clip_seed(cfg.seed, epoch, it.clip_id))
                frames.append(extract_patches(s.frames, encoder.cfg))
            y = np.array([it.label for it in batch])
            grads_enc: dict = {}
            emb_all = []
            # Clips with different token counts run as separate sub-batches.
            groups: dict[int, list[int]] = {}
            for i, p in enumerate(frames):
                groups.setdefault(p.shape[0], []).append(i)
            caches = []
            for idx in groups.values():
                emb, cache = encoder.forward(np.stack([frames[i] for i in idx]), keep_cache=True)
                caches.append((idx, cache))
                emb_all.append((idx, emb))
            emb = np.empty((len(batch), encoder.cfg.d_model), dtype=np.float64)
            for idx, e in emb_all:
                emb[idx] = e
            loss, d_emb, d_head = arcface_grad(emb, y, head)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step + 1}",
                                       last_good, history)
            for idx, cache in caches:
                g = encoder.backward(cache, d_emb[idx], wrt=enc_names)
                for k, v in g.items():
                    grads_enc[k] = grads_enc[k] + v if k in grads_enc else v
            grads = dict(grads_enc)
            grads["head.W"] = d_head
            if cfg.clip_norm is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            step += 1
            lr = lr_at(step, sched)
            params = encoder.named_parameters()
            params["head.W"] = head.W
            try:
                adam_step(params, grads, state, lr)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), last_good, history) from exc
            loss_sum += loss * len(batch)
            correct += int((predict(emb, head) == y).sum())
            if on_step is not None:
                on_step(step)
        rec = EpochLog(epoch, step, lr_at(step, sched), loss_sum / len(items),
                       correct / len(items))
        history.append(rec)
        log.info("epoch %d  step %d  lr %.3g  loss %.4f  acc %.3f",
                 rec.epoch, rec.step, rec.lr, rec.loss, rec.acc)
        last_good = {k: v.copy() for k, v in params.items()}
        if on_epoch is not None:
            on_epoch(rec)
    return history
