"""Low-rank adapters: injection plans, rank schedules, apply/merge.

An adapter on a frozen weight W (d_out x d_in) holds A (r x d_in) and
B (d_out x r) and contributes ``(alpha / r) * B @ A``.  B starts at zero, so a
freshly injected adapter leaves the model unchanged.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MATRICES = ("k", "q", "v")
_MATRIX_ORDER = {m: i for i, m in enumerate(MATRICES)}


@dataclass(frozen=True)
class LoraSite:
    layer: int
    matrix: str
    rank: int
    alpha: float

    def __post_init__(self):
        if self.matrix not in MATRICES:
            raise ValueError(f"unknown matrix {self.matrix!r}; expected one of k, q, v")
        if self.layer < 1:
            raise ValueError(f"layer index is 1-based, got {self.layer}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def key(self) -> str:
        return f"lora.{self.layer}.{self.matrix}"

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    site: LoraSite

    @property
    def scale(self) -> float:
        return self.site.scale

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def n_params(self) -> int:
        return self.A.size + self.B.size


@dataclass(frozen=True)
class Condition:
    field: str  # "layer" or "matrix"
    op: str
    value: object

    def holds(self, layer: int, matrix: str, n_layers: int) -> bool:
        if self.field == "matrix":
            return (matrix in self.value) == (self.op == "=")
        value = n_layers // 2 if self.value == "half" else self.value
        return {
            ">": layer > value, ">=": layer >= value,
            "<": layer < value, "<=": layer <= value,
            "=": layer == value, "!=": layer != value,
        }[self.op]


@dataclass(frozen=True)
class Multiplier:
    """Rank factor applied to every site matching all conditions."""

    conditions: tuple[Condition, ...]
    factor: float

    def matches(self, layer: int, matrix: str, n_layers: int) -> bool:
        return all(c.holds(layer, matrix, n_layers) for c in self.conditions)

    def __str__(self):
        parts = []
        for c in self.conditions:
            value = ",".join(sorted(c.value)) if c.field == "matrix" else c.value
            parts.append(f"{c.field}{c.op}{value}")
        return "&".join(parts) + f":{self.factor:g}"


@dataclass
class LoraPlan:
    layers: tuple[int, ...]
    matrices: tuple[str, ...]
    rank: int
    multipliers: tuple[Multiplier, ...] = ()
    alpha: float | None = None
    label: str = ""

    def describe(self) -> str:
        if self.label:
            return self.label
        text = f"layers={format_layers(self.layers)} matrices={','.join(self.matrices)} r={self.rank}"
        if self.multipliers:
            text += " mult=" + ";".join(str(m) for m in self.multipliers)
        return text


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def expand_plan(plan: LoraPlan, n_layers: int, d_model: int | None = None) -> list[LoraSite]:
    """Sites in layer-major, then k < q < v, order.

    With ``d_model`` given, ranks above ``min(d_in, d_out)`` are clamped.
    """
    bad = [l for l in plan.layers if not 1 <= l <= n_layers]
    if bad:
        raise ValueError(f"plan layers {bad} outside 1..{n_layers}")
    unknown = [m for m in plan.matrices if m not in MATRICES]
    if unknown:
        raise ValueError(f"unknown matrices {unknown}")
    if plan.rank < 1:
        raise ValueError("base rank must be >= 1")
    layers = sorted(set(plan.layers))
    matrices = sorted(set(plan.matrices), key=_MATRIX_ORDER.__getitem__)
    if not layers or not matrices:
        raise ValueError("plan selects no sites")
    sites = []
    clamped = []
    for layer in layers:
        for matrix in matrices:
            factor = 1.0
            for mult in plan.multipliers:
                if mult.matches(layer, matrix, n_layers):
                    factor *= mult.factor
            rank = max(1, _round_half_up(plan.rank * factor))
            if d_model is not None and rank > d_model:
                clamped.append((layer, matrix, rank))
                rank = d_model
            alpha = float(rank) if plan.alpha is None else float(plan.alpha)
            sites.append(LoraSite(layer, matrix, rank, alpha))
    if clamped:
        log.warning("clamped %d LoRA site ranks to d_model=%d (requested up to %d)",
                    len(clamped), d_model, max(r for _, _, r in clamped))
    return sites


def init_adapter(site: LoraSite, seed: int, d_in: int, d_out: int | None = None,
                 dtype=np.float64, std: float = 0.02) -> LoraAdapter:
    d_out = d_in if d_out is None else d_out
    if site.rank > min(d_in, d_out):
        raise ValueError(f"rank {site.rank} exceeds min(d_in, d_out)={min(d_in, d_out)}")
    rng = np.random.default_rng([seed, site.layer, _MATRIX_ORDER[site.matrix]])
    A = (rng.standard_normal((site.rank, d_in)) * std).astype(dtype)
    B = np.zeros((d_out, site.rank), dtype=dtype)
    return LoraAdapter(A, B, site)


def _check_shapes(adapter: LoraAdapter, W: np.ndarray) -> None:
    r = adapter.site.rank
    d_out, d_in = W.shape
    if adapter.A.shape != (r, d_in) or adapter.B.shape != (d_out, r):
        raise ValueError(
            f"adapter {adapter.site.key} has A{adapter.A.shape}, B{adapter.B.shape}; "
            f"incompatible with W{W.shape} at rank {r}")


def apply(adapter: LoraAdapter, W_base: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``W_base @ x + scale * B @ (A @ x)`` without forming the merged matrix."""
    _check_shapes(adapter, W_base)
    if x.shape[0] != W_base.shape[1]:
        raise ValueError(f"input of length {x.shape[0]} for W{W_base.shape}")
    return W_base @ x + adapter.scale * (adapter.B @ (adapter.A @ x))


def merge(adapter: LoraAdapter, W_base: np.ndarray) -> np.ndarray:
    _check_shapes(adapter, W_base)
    return W_base + adapter.delta()


def unmerge(adapter: LoraAdapter, W_merged: np.ndarray) -> np.ndarray:
    _check_shapes(adapter, W_merged)
    return W_merged - adapter.delta()


def site_params(site: LoraSite, d_in: int, d_out: int) -> int:
    return min(site.rank, d_in, d_out) * (d_in + d_out)


def trainable_params(plan: LoraPlan, n_layers: int, d_model: int) -> int:
    """Adapter parameter count; the classification head is counted separately."""
    return sum(site_params(s, d_model, d_model) for s in expand_plan(plan, n_layers, d_model))


# --- text forms used by config files and ablation grids ---------------------

def parse_layers(text: str) -> tuple[int, ...]:
    """``"1-4,9-12"`` -> (1, 2, 3, 4, 9, 10, 11, 12)."""
    out: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(p) for p in part.split("-", 1))
            if hi < lo:
                raise ValueError(f"empty layer range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return tuple(sorted(set(out)))


def format_layers(layers) -> str:
    layers = sorted(set(layers))
    runs = []
    for l in layers:
        if runs and l == runs[-1][1] + 1:
            runs[-1][1] = l
        else:
            runs.append([l, l])
    return ",".join(f"{a}-{b}" if a != b else str(a) for a, b in runs)


def parse_matrices(text: str) -> tuple[str, ...]:
    mats = [m.strip() for m in str(text).split(",") if m.strip()]
    for m in mats:
        if m not in MATRICES:
            raise ValueError(f"unknown matrix {m!r}; expected k, q or v")
    return tuple(sorted(set(mats), key=_MATRIX_ORDER.__getitem__))


_COND = re.compile(r"^(layer|matrix)(>=|<=|!=|>|<|=)(.+)$")


def parse_multipliers(text: str) -> tuple[Multiplier, ...]:
    """Parse ``"layer>half&matrix=v:1.5;matrix=q:2"``.

    ``half`` stands for ``n_layers // 2`` and is resolved at expansion time.
    """
    mults = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        pred, _, factor = chunk.rpartition(":")
        if not pred:
            raise ValueError(f"multiplier {chunk!r} lacks ':factor'")
        conds = []
        for term in pred.split("&"):
            m = _COND.match(term.strip())
            if not m:
                raise ValueError(f"cannot parse multiplier condition {term!r}")
            fld, op, value = m.groups()
            if fld == "matrix":
                if op not in ("=", "!="):
                    raise ValueError(f"matrix conditions support = and != only: {term!r}")
                conds.append(Condition(fld, op, frozenset(parse_matrices(value.replace("|", ",")))))
            else:
                conds.append(Condition(fld, op, "half" if value == "half" else int(value)))
        f = float(factor)
        if f <= 0:
            raise ValueError("multiplier factor must be positive")
        mults.append(Multiplier(tuple(conds), f))
    return tuple(mults)
