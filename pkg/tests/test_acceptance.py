"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records a verdict that the terminal summary prints as one
PASS/FAIL line.  Criterion 8 trains every ablation cell at the desk recipe
and takes roughly half an hour on one core; set ASDLORA_ABLATE_EPOCHS to a
small number for a quick structural pass during development.
"""

import csv
import decimal
import itertools
import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE

from asdlora import ablate, pipeline
from asdlora.config import RunConfig
from asdlora.detect import ReferenceSet, score_clip
from asdlora.dsp import Spectrogram, SpecAugPolicy, specaug
from asdlora.lora import LoraPlan, expand_plan, init_adapter, merge, trainable_params
from asdlora.metrics import auc, hmean, pauc
from asdlora.model import Encoder, EncoderConfig
from asdlora.objective import ArcFaceHead, arcface_grad, arcface_loss
from asdlora.optim import TrainConfig, TrainItem, attach_adapters, params_digest, train

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.ini"


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def rel_err(fd: float, an: float, floor: float) -> float:
    """|fd - an| relative to the larger magnitude; pairs below ``floor`` count as agreeing."""
    scale = max(abs(fd), abs(an))
    if scale <= floor:
        return 0.0
    return abs(fd - an) / scale


# --- 1 ---------------------------------------------------------------------------------

def test_criterion_1_hmean_identities():
    a = hmean([65.48, 74.42])
    b = hmean([67.67, 71.18, 82.87, 71.73, 95.97, 68.52, 98.18])
    ok = abs(a - 69.66) <= 0.01 and abs(b - 77.75) <= 0.01
    record(1, ok, f"hmean = {a:.4f} (want 69.66), {b:.4f} (want 77.75), tol 0.01")


# --- 2 ---------------------------------------------------------------------------------

def _arcface_reference(x, y, W, s, m):
    """Direct transcription: -(1/N) sum log(e^{s cos(theta_y + m)} / F)."""
    total = 0.0
    for xi, yi in zip(x, y):
        cos = [float(xi @ W[:, j]) / (np.linalg.norm(xi) * np.linalg.norm(W[:, j]))
               for j in range(W.shape[1])]
        cos = [min(max(c, -1 + 1e-7), 1 - 1e-7) for c in cos]
        theta = math.acos(cos[yi])
        if cos[yi] > math.cos(math.pi - m):
            target = math.cos(theta + m)
        else:
            target = cos[yi] - m * math.sin(m)
        num = math.exp(s * target)
        F = num + sum(math.exp(s * c) for j, c in enumerate(cos) if j != yi)
        total += -math.log(num / F)
    return total / len(y)


def _arcface_decimal(x, y, W, s, m):
    """The same transcription in 40-digit decimal arithmetic (finite-difference target)."""
    with decimal.localcontext() as ctx:
        ctx.prec = 40
        D = decimal.Decimal
        s, m = D(s), D(m)
        cos_m, sin_m = D(math.cos(float(m))), D(math.sin(float(m)))
        edge = -cos_m  # cos(pi - m)
        lo, hi = D(-1) + D("1e-7"), D(1) - D("1e-7")
        cols = [[W[r][j] for r in range(len(W))] for j in range(len(W[0]))]
        col_norm = [sum(v * v for v in c).sqrt() for c in cols]
        total = D(0)
        for xi, yi in zip(x, y):
            xn = sum(v * v for v in xi).sqrt()
            z = []
            for j, c in enumerate(cols):
                cj = sum(a * b for a, b in zip(xi, c)) / (xn * col_norm[j])
                cj = min(max(cj, lo), hi)
                if j == yi:
                    cj = (cj * cos_m - (1 - cj * cj).sqrt() * sin_m if cj > edge
                          else cj - m * sin_m)
                z.append(s * cj)
            top = max(z)
            total += top + sum((v - top).exp() for v in z).ln() - z[yi]
        return total / len(y)


def _fallback_batch(rng, n, C, d, m):
    """Embeddings pointing nearly opposite their class weight, so theta_y + m > pi."""
    W = rng.normal(size=(d, C))
    y = rng.integers(0, C, n)
    x = -W[:, y].T + 0.05 * rng.normal(size=(n, d))
    return x, y, W


def test_criterion_2_arcface():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    worst_loss = 0.0
    for i in range(100):
        n, C, d = int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 10))
        if i % 4 == 0:
            x, y, W = _fallback_batch(rng, n, C, d, 0.5)
        else:
            x, y, W = rng.normal(size=(n, d)), rng.integers(0, C, n), rng.normal(size=(d, C))
        head = ArcFaceHead(W, 30.0, 0.5)
        worst_loss = max(worst_loss, abs(arcface_loss(x, y, head) - _arcface_reference(x, y, W, 30.0, 0.5)))

    # Central differences of a 40-digit transcription: float64 (or long double)
    # differencing noise, about eps * |loss| / h, would swamp the tiny non-target
    # gradients of high-loss batches.
    h = decimal.Decimal("1e-6")
    worst_grad, n_coords, n_fallback = 0.0, 0, 0
    for i in range(100):
        n, C, d = 3, 4, 6
        if i % 3 == 0:
            x, y, W = _fallback_batch(rng, n, C, d, 0.5)
            n_fallback += 1
        else:
            x, y, W = rng.normal(size=(n, d)), rng.integers(0, C, n), rng.normal(size=(d, C))
        _, dx, dW = arcface_grad(x, y, ArcFaceHead(W, 30.0, 0.5))
        xd = [[decimal.Decimal(float(v)) for v in row] for row in x]
        Wd = [[decimal.Decimal(float(v)) for v in row] for row in W]
        for arr, grad in ((xd, dx), (Wd, dW)):
            for idx in np.ndindex(grad.shape):
                r, c = idx
                old = arr[r][c]
                arr[r][c] = old + h
                up = _arcface_decimal(xd, y, Wd, 30, 0.5)
                arr[r][c] = old - h
                down = _arcface_decimal(xd, y, Wd, 30, 0.5)
                arr[r][c] = old
                fd = float((up - down) / (2 * h))
                worst_grad = max(worst_grad, rel_err(fd, grad[idx], 1e-15))
                n_coords += 1
    elapsed = time.perf_counter() - t0
    ok = worst_loss <= 1e-12 and worst_grad <= 1e-5 and elapsed < 10
    record(2, ok, f"oracle max |diff| {worst_loss:.1e} (<=1e-12); FD max rel {worst_grad:.1e} "
                  f"(<=1e-5) over {n_coords} coords, {n_fallback} fallback batches; {elapsed:.1f}s")


# --- 3 ---------------------------------------------------------------------------------

def _small_encoder(dtype=np.float64):
    return Encoder.initialize(EncoderConfig(2, 16, 2, 4, 4, 2, 8), 3, dtype)


def test_criterion_3_lora_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(30)
    x = rng.normal(size=(3, 6, 16))
    plan = LoraPlan((1, 2), ("k", "q", "v"), 4)
    notes, ok = [], True

    enc = _small_encoder()
    base, _ = enc.forward(x)
    attach_adapters(enc, plan, 0)
    zero_diff = float(np.max(np.abs(enc.forward(x)[0] - base)))
    ok &= zero_diff <= 1e-12
    notes.append(f"zero-init {zero_diff:.0e}")

    for dtype, tol in ((np.float64, 1e-9), (np.float32, 1e-6)):
        enc = _small_encoder(dtype)
        attach_adapters(enc, plan, 0)
        for ad in enc.adapters.values():
            ad.B[:] = rng.normal(0, 0.05, ad.B.shape)
        adapted, _ = enc.forward(x.astype(dtype))
        # unfolded route: base projection plus the low-rank path, never forming B @ A
        h = rng.normal(size=(5, 16)).astype(dtype)
        unfold = 0.0
        for ad in enc.adapters.values():
            W = enc.params[f"layers.{ad.site.layer}.attn.W{ad.site.matrix}"]
            side = h @ W.T + ad.scale * ((h @ ad.A.T) @ ad.B.T)
            folded = h @ enc._weight(ad.site.layer, ad.site.matrix).T
            unfold = max(unfold, float(np.max(np.abs(side - folded))))
        ok &= unfold <= tol
        notes.append(f"unfolded {np.dtype(dtype).name} {unfold:.0e}")
        params = {k: v.copy() for k, v in enc.params.items()}
        for ad in enc.adapters.values():
            name = f"layers.{ad.site.layer}.attn.W{ad.site.matrix}"
            params[name] = merge(ad, params[name].astype(np.float64)).astype(dtype)
        merged, _ = Encoder(enc.cfg, params).forward(x.astype(dtype))
        diff = float(np.max(np.abs(adapted.astype(np.float64) - merged)))
        ok &= diff <= tol
        notes.append(f"merge {np.dtype(dtype).name} {diff:.0e}")

    worst_tail = 0.0
    for r in (1, 2, 4, 8):
        for site in expand_plan(LoraPlan((1,), ("q",), r), 1):
            ad = init_adapter(site, int(rng.integers(1 << 30)), 48)
            ad.B[:] = rng.normal(size=ad.B.shape)
            sv = np.linalg.svd(ad.delta(), compute_uv=False)
            worst_tail = max(worst_tail, float(sv[r:].max()))
    ok &= worst_tail < 1e-10
    notes.append(f"SVD tail {worst_tail:.0e}")

    enc = _small_encoder()
    small_plan = LoraPlan((1, 2), ("q", "v"), 2)
    attach_adapters(enc, small_plan, 0)
    frozen = params_digest(enc.params)
    items = []
    for i in range(4):
        frames = rng.normal(0, 0.3, (12, 8))
        frames[:, 4 * (i % 2):4 * (i % 2) + 4] += 1.5
        items.append(TrainItem(Spectrogram(frames), i % 2, f"c{i}"))
    head = ArcFaceHead.initialize(16, 2, 0)
    digests = []
    train(items, enc, head, TrainConfig(4, 100, 0, "lora", small_plan, 1e-2),
          on_step=lambda s: digests.append(params_digest(enc.params)))
    frozen_ok = len(digests) == 100 and all(d == frozen for d in digests)
    ok &= frozen_ok
    notes.append(f"base unchanged over {len(digests)} steps: {frozen_ok}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    record(3, ok, "; ".join(notes) + f"; {elapsed:.1f}s")


# --- 4 ---------------------------------------------------------------------------------

def test_criterion_4_encoder_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(40)
    cfg = EncoderConfig(n_layers=2, d_model=16, n_heads=2, patch_freq=4, patch_time=4,
                        mlp_ratio=2, n_mels=8)
    enc = Encoder.initialize(cfg, 1, np.float64)
    # non-trivial LayerNorm and bias values so every path carries gradient
    for name, p in enc.params.items():
        if name.endswith((".b", ".g")) or ".b" in name:
            p += rng.normal(0, 0.1, p.shape)
    for site in expand_plan(LoraPlan((1, 2), ("k", "q", "v"), 3), 2):
        ad = init_adapter(site, site.layer, 16)
        ad.B[:] = rng.normal(0, 0.1, ad.B.shape)
        enc.adapters[site.key] = ad
    x = rng.normal(size=(2, 5, 16))
    proj = rng.normal(size=(2, 16))
    _, cache = enc.forward(x, keep_cache=True)
    grads = enc.backward(cache, proj, wrt=set(enc.named_parameters()))

    # Finite differences run on a long-double copy so their noise sits far below 1e-4.
    ld = np.longdouble
    twin = Encoder(cfg, {k: v.astype(ld) for k, v in enc.params.items()},
                   {k: type(a)(a.A.astype(ld), a.B.astype(ld), a.site)
                    for k, a in enc.adapters.items()})
    params = twin.named_parameters()
    xl, pl = x.astype(ld), proj.astype(ld)

    def f():
        return (twin.forward(xl)[0] * pl).sum()

    # Floor: gradients that vanish analytically (the key bias cancels in the softmax).
    h, worst, where, count = ld(1e-6), 0.0, "", 0
    per_tensor = max(1, -(-520 // len(params)))
    for name, p in params.items():
        for flat in rng.choice(p.size, size=min(per_tensor, p.size), replace=False):
            idx = np.unravel_index(flat, p.shape)
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            e = rel_err(float((up - down) / (2 * h)), grads[name][idx], 1e-12)
            count += 1
            if e > worst:
                worst, where = e, name
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and count >= 500 and elapsed < 60
    record(4, ok, f"max rel err {worst:.1e} (<=1e-4, at {where}) over {count} coords "
                  f"in {len(params)} tensors; {elapsed:.1f}s")


# --- 5 ---------------------------------------------------------------------------------

def _roc_points(normals, anomalies):
    """Tie-aware ROC vertices (exact), from thresholds scanned high to low."""
    n, m = len(normals), len(anomalies)
    pts = [(Fraction(0), Fraction(0))]
    for t in sorted(set(normals) | set(anomalies), reverse=True):
        fp = sum(1 for v in normals if v >= t)
        tp = sum(1 for v in anomalies if v >= t)
        pts.append((Fraction(fp, n), Fraction(tp, m)))
    return pts


def _roc_area(pts, p=Fraction(1)):
    area = Fraction(0)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def _pauc_enumeration(normals, anomalies, p):
    """Float threshold enumeration, interpolating linearly at FPR = p."""
    normals, anomalies = np.asarray(normals, float), np.asarray(anomalies, float)
    xs, ys = [0.0], [0.0]
    for t in np.unique(np.concatenate([normals, anomalies]))[::-1]:
        xs.append(float(np.mean(normals >= t)))
        ys.append(float(np.mean(anomalies >= t)))
    area = 0.0
    for x0, y0, x1, y1 in zip(xs, ys, xs[1:], ys[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area / p


def test_criterion_5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(50)
    auc_mismatch = p1_mismatch = 0
    worst_pauc = 0.0
    for i in range(1000):
        n, m = int(rng.integers(1, 51)), int(rng.integers(1, 51))
        hi = int(rng.choice([3, 10, 1000]))  # small ranges force ties
        normals = rng.integers(0, hi, n).tolist()
        anomalies = rng.integers(0, hi, m).tolist()
        exact = _roc_area(_roc_points(normals, anomalies))
        pairwise = sum(1.0 if a > b else 0.5 if a == b else 0.0
                       for a, b in itertools.product(anomalies, normals))
        got = auc(normals, anomalies)
        auc_mismatch += got != float(exact) or Fraction(pairwise) / (n * m) != exact
        p1_mismatch += pauc(normals, anomalies, 1.0) != got
        p = float(rng.choice([0.05, 0.1, 0.2, 0.5, rng.uniform(0.01, 1.0)]))
        worst_pauc = max(worst_pauc, abs(pauc(normals, anomalies, p)
                                         - _pauc_enumeration(normals, anomalies, p)))
    elapsed = time.perf_counter() - t0
    ok = auc_mismatch == 0 and p1_mismatch == 0 and worst_pauc <= 1e-12 and elapsed < 30
    record(5, ok, f"AUC mismatches {auc_mismatch}/1000; pauc(p=1) != auc {p1_mismatch}/1000; "
                  f"pAUC max |diff| {worst_pauc:.1e} (<=1e-12); {elapsed:.1f}s")


# --- 6 ---------------------------------------------------------------------------------

def _scan(query, refs):
    q = np.asarray(query, float)
    best = math.inf
    for r in refs:
        r = np.asarray(r, float)
        cos = float(q @ r) / (math.sqrt(float(q @ q)) * math.sqrt(float(r @ r)))
        best = min(best, 1.0 - cos)
    return best


def test_criterion_6_backend_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(60)
    worst = 0.0
    for i in range(1000):
        d = int(rng.integers(2, 24))
        src = rng.normal(size=(int(rng.integers(1, 30)), d))
        tgt = rng.normal(size=(int(rng.integers(1, 5)), d))
        q = rng.normal(size=d) if i % 10 else src[int(rng.integers(len(src)))].copy()
        got = score_clip(q, ReferenceSet.build("source", src), ReferenceSet.build("target", tgt))
        want = min(_scan(q, src), _scan(q, tgt))
        worst = max(worst, abs(got.score - want))
    violations = 0
    for _ in range(100):
        d = int(rng.integers(2, 16))
        src = ReferenceSet.build("source", rng.normal(size=(int(rng.integers(1, 10)), d)))
        tgt = ReferenceSet.build("target", rng.normal(size=(int(rng.integers(1, 4)), d)))
        q = rng.normal(size=d)
        before = score_clip(q, src, tgt).score
        for _ in range(5):
            if rng.random() < 0.5:
                src = src.add(rng.normal(size=d), "x")
            else:
                tgt = tgt.add(rng.normal(size=d), "x")
            after = score_clip(q, src, tgt).score
            violations += after > before
            before = after
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and violations == 0 and elapsed < 10
    record(6, ok, f"scan oracle max |diff| {worst:.1e} on 1000 queries; "
                  f"{violations} monotonicity violations in 100 cases; {elapsed:.1f}s")


# --- 7 ---------------------------------------------------------------------------------

def test_criterion_7_end_to_end(tmp_path):
    cfg = RunConfig.load(DESK)
    assert cfg.seed == 42 and cfg.lora_plan().rank == 8
    result = pipeline.run_all(cfg, tmp_path, baseline=True)
    lora, base = result.report.official, result.baseline.official
    ok = lora >= 0.90 and lora - base >= 0.10 and result.seconds < 300
    record(7, ok, f"LoRA official {lora:.4f} (>=0.90), untrained baseline {base:.4f}, "
                  f"gain {lora - base:+.4f} (>=0.10); {result.seconds:.0f}s (<300s)")


# --- 8 ---------------------------------------------------------------------------------

EXPECTED_ROWS = {
    "table2": ["Full fine-tune", "r = 4", "r = 8", "r = 16", "r = 32", "r = 64", "r = 128"],
    "table3": ["k", "q", "v", "k, v", "k, q", "k, q, v", "q, v"],
    "table5": ["1-4", "5-8", "9-12", "1-8", "1-4,9-12", "5-12", "1-12"],
    "table6": ["Base", "v 1.5x", "latter half 1.5x", "latter half v 1.5x"],
}


def test_criterion_8_ablation_tables(tmp_path):
    t0 = time.perf_counter()
    overrides = []
    if os.environ.get("ASDLORA_ABLATE_EPOCHS"):
        overrides.append(f"optim.epochs={int(os.environ['ASDLORA_ABLATE_EPOCHS'])}")
    cfg = RunConfig.load(DESK, overrides)
    tables = {f"table{n}": ablate.builtin_table(n, cfg) for n in ("2", "3", "5", "6")}
    summary = ablate.run_tables(cfg, tables, tmp_path, jobs=os.cpu_count() or 1)
    problems = []
    for name, cells in tables.items():
        path, failures = summary[name]
        rows = list(csv.DictReader(open(path)))
        if [r["plan"] for r in rows] != EXPECTED_ROWS[name]:
            problems.append(f"{name} rows {[r['plan'] for r in rows]}")
        problems += [f"{name}/{label}: {msg}" for label, msg in failures]
        for cell, row in zip(cells, rows):
            cell_cfg = cell.config(cfg)
            if cell_cfg.optim.mode == "lora":
                want = trainable_params(cell_cfg.lora_plan(), cfg.model.n_layers,
                                        cfg.model.d_model)
            else:
                want = Encoder.initialize(cfg.encoder_config(), 0).n_base_params()
            if row["trainable_params"] != str(want):
                problems.append(f"{name}/{row['plan']}: {row['trainable_params']} != {want}")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 40 * 60
    record(8, ok, f"{sum(len(c) for c in tables.values())} cells in 4 tables, "
                  f"row sets and parameter counts {'match' if not problems else problems[:3]}; "
                  f"{elapsed / 60:.1f} min (<40)")


# --- 9 ---------------------------------------------------------------------------------

def test_criterion_9_specaug():
    t0 = time.perf_counter()
    rng = np.random.default_rng(90)
    policy = SpecAugPolicy(freq_mask_width_max=16, time_mask_width_max=20,
                           n_freq_masks=2, n_time_masks=2)
    identity_bad = budget_bad = determinism_bad = 0
    for i in range(1000):
        frames = rng.uniform(0.5, 2.0, (200, 128))  # no cell equals the mask value
        s = Spectrogram(frames)
        out = specaug(s, policy, [i]).frames
        again = specaug(s, policy, [i]).frames
        determinism_bad += not np.array_equal(out, again)
        masked = out == policy.mask_value
        identity_bad += not np.array_equal(out[~masked], frames[~masked])
        # every masked cell lies in a fully masked row or column
        rows, cols = masked.all(axis=1), masked.all(axis=0)
        stray = masked & ~rows[:, None] & ~cols[None, :]
        budget_bad += (stray.any()
                       or cols.sum() > policy.n_freq_masks * policy.freq_mask_width_max
                       or rows.sum() > policy.n_time_masks * policy.time_mask_width_max)
    elapsed = time.perf_counter() - t0
    ok = identity_bad == budget_bad == determinism_bad == 0 and elapsed < 5
    record(9, ok, f"1000 draws: identity violations {identity_bad}, budget violations "
                  f"{budget_bad}, nondeterministic {determinism_bad}; {elapsed:.1f}s")
