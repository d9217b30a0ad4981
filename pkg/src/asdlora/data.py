"""Synthetic machine-sound corpus and DCASE-style manifests.

A normal clip is a harmonic stack under a slow amplitude envelope plus
Gaussian noise whose level depends on the domain (source or target).  An
anomalous clip additionally carries one fault: detuned harmonics, short
broadband bursts, or a dropped harmonic.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, Waveform, clip_seed, read_wav, write_wav

log = logging.getLogger(__name__)

ANOMALY_MODES = ("detune", "burst", "dropout")


DEFAULT_SPEEDS = {"low": 0.85, "mid": 0.95, "high": 1.05, "max": 1.15}


@dataclass
class MachineSpec:
    name: str
    fundamental_hz: float
    n_harmonics: int = 6
    am_rate_hz: float = 4.0
    am_depth: float = 0.3
    attributes: dict = field(default_factory=lambda: {"speed": dict(DEFAULT_SPEEDS)})
    source_noise: float = 0.02
    target_noise: float = 0.03
    anomaly_modes: dict = field(default_factory=lambda: {"detune": 0.04, "burst": 1.0, "dropout": 1.0})
    amplitude: float = 0.2
    # per-clip nuisance: gain spread (dB, +/-), relative noise-level, AM-rate and f0 jitter
    gain_db: float = 6.0
    noise_jitter: float = 0.5
    am_jitter: float = 0.3
    f0_jitter: float = 0.01

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        nyq = sample_rate / 2
        if len(self.attributes) != 1:
            raise ValueError(f"{self.name}: exactly one speed-like attribute is supported")
        (key, values), = self.attributes.items()
        if len(values) < 2:
            raise ValueError(f"{self.name}: attribute {key!r} needs >= 2 values")
        top = self.fundamental_hz * self.n_harmonics * max(values.values())
        detune = 1.0 + self.anomaly_modes.get("detune", 0.0)
        if top * detune >= nyq:
            raise ValueError(f"{self.name}: highest partial {top * detune:.0f} Hz "
                             f"is not below Nyquist ({nyq:.0f} Hz)")
        for mode, severity in self.anomaly_modes.items():
            if mode not in ANOMALY_MODES:
                raise ValueError(f"{self.name}: unknown anomaly mode {mode!r}")
            if not severity > 0:
                raise ValueError(f"{self.name}: anomaly severity for {mode!r} must be > 0")
        if not self.anomaly_modes:
            raise ValueError(f"{self.name}: no anomaly modes")
        if self.source_noise < 0 or self.target_noise < 0:
            raise ValueError(f"{self.name}: noise levels must be non-negative")


def default_specs() -> list[MachineSpec]:
    return [
        MachineSpec("fan", 120.0, n_harmonics=8, am_rate_hz=3.0),
        MachineSpec("pump", 210.0, n_harmonics=6, am_rate_hz=5.0),
        MachineSpec("valve", 330.0, n_harmonics=5, am_rate_hz=7.0),
    ]


@dataclass
class Counts:
    train_source: int = 90
    train_target: int = 10
    test_normal: int = 50  # per domain
    test_anomaly: int = 50  # per domain

    def validate(self):
        for k, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"count {k} must be >= 1")


@dataclass
class Record:
    clip_id: str
    path: str
    machine: str
    domain: str
    split: str
    label: str
    attributes: dict

    def class_string(self) -> str:
        attrs = ",".join(f"{k}={v}" for k, v in sorted(self.attributes.items()))
        return f"{self.machine}/{attrs}"


@dataclass
class Manifest:
    records: list[Record]
    root: Path = Path(".")

    def __post_init__(self):
        ids = [r.clip_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate clip ids in manifest")
        bad = [r.clip_id for r in self.records if r.split == "train" and r.label == "anomaly"]
        if bad:
            raise ValueError(f"train split contains anomalous clips: {bad[:3]}")

    def select(self, split=None, machine=None, domain=None) -> list[Record]:
        return [r for r in self.records
                if (split is None or r.split == split)
                and (machine is None or r.machine == machine)
                and (domain is None or r.domain == domain)]

    def machines(self) -> list[str]:
        return sorted({r.machine for r in self.records})

    def abspath(self, rec: Record) -> Path:
        return (self.root / rec.path).resolve()

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        recs = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    recs.append(Record(**json.loads(line)))
        return cls(recs, path.parent)


def _clip(spec: MachineSpec, speed: float, noise: float, n: int, rng: np.random.Generator,
          fault: str | None, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    gain = 10.0 ** (rng.uniform(-spec.gain_db, spec.gain_db) / 20.0)
    noise = noise * (1.0 + rng.uniform(-spec.noise_jitter, spec.noise_jitter))
    am_rate = spec.am_rate_hz * (1.0 + rng.uniform(-spec.am_jitter, spec.am_jitter))
    f0 = spec.fundamental_hz * speed * (1.0 + rng.uniform(-spec.f0_jitter, spec.f0_jitter))
    k = np.arange(1, spec.n_harmonics + 1)
    amps = spec.amplitude / k
    ratios = k.astype(float)
    if fault == "detune":
        # Push the upper half of the partials off the harmonic grid.
        upper = k > spec.n_harmonics // 2
        ratios = np.where(upper, k * (1.0 + spec.anomaly_modes["detune"]), k)
    elif fault == "dropout":
        drop = rng.integers(1, spec.n_harmonics)  # never the fundamental
        amps = amps.copy()
        amps[drop] *= max(0.0, 1.0 - spec.anomaly_modes["dropout"])
    phases = rng.uniform(0, 2 * np.pi, spec.n_harmonics)
    tone = (amps[:, None] * np.sin(2 * np.pi * f0 * ratios[:, None] * t + phases[:, None])).sum(0)
    env = 1.0 + spec.am_depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    x = gain * (tone * env + noise * rng.standard_normal(n))
    if fault == "burst":
        level = spec.anomaly_modes["burst"]
        width = int(0.1 * sample_rate)
        for start in rng.integers(0, n - width, size=4):
            x[start:start + width] += gain * level * rng.standard_normal(width)
    return np.clip(x, -1.0, 1.0)


def filename(domain: str, split: str, label: str, index: int, attributes: dict) -> str:
    attrs = "".join(f"_{k}_{v}" for k, v in sorted(attributes.items()))
    return f"section_00_{domain}_{split}_{label}_{index:04d}{attrs}.wav"


def plan_clips(specs: list[MachineSpec], counts: Counts):
    """Deterministic clip list: (machine spec, domain, split, label, index)."""
    for spec in specs:
        cells = [("source", "train", "normal", counts.train_source),
                 ("target", "train", "normal", counts.train_target)]
        for domain in ("source", "target"):
            cells += [(domain, "test", "normal", counts.test_normal),
                      (domain, "test", "anomaly", counts.test_anomaly)]
        for domain, split, label, count in cells:
            for i in range(count):
                yield spec, domain, split, label, i


def generate(specs: list[MachineSpec], counts: Counts | None = None, clip_seconds: float = 2.0,
             seed: int = 0, out_dir=None, sample_rate: int = SAMPLE_RATE) -> Manifest:
    """Write a WAV corpus plus ``manifest.jsonl`` under ``out_dir``."""
    counts = counts or Counts()
    counts.validate()
    for spec in specs:
        spec.validate(sample_rate)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("machine names must be unique")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    n = int(round(clip_seconds * sample_rate))
    records = []
    for spec, domain, split, label, i in plan_clips(specs, counts):
        (key, values), = spec.attributes.items()
        rng = np.random.default_rng(clip_seed(seed, spec.name, domain, split, label, i))
        value = sorted(values)[int(rng.integers(0, len(values)))]
        fault = None
        if label == "anomaly":
            modes = sorted(spec.anomaly_modes)
            fault = modes[int(rng.integers(0, len(modes)))]
        noise = spec.source_noise if domain == "source" else spec.target_noise
        x = _clip(spec, values[value], noise, n, rng, fault, sample_rate)
        fname = filename(domain, split, label, i, {key: value})
        rel = Path(spec.name) / split / fname
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        write_wav(out / rel, Waveform(x, sample_rate))
        records.append(Record(f"{spec.name}/{split}/{Path(fname).stem}", rel.as_posix(),
                              spec.name, domain, split, label, {key: value}))
    manifest = Manifest(records, out)
    manifest.write(out / "manifest.jsonl")
    return manifest


def parse_filename(name: str) -> dict:
    """Parse ``section_XX_<domain>_<split>_<label>_<index>[_key_value...]``.

    Evaluation files without a label token get label ``unknown``.  A trailing
    token without a partner is kept verbatim under ``extra``.
    """
    stem = name[:-4] if name.lower().endswith(".wav") else name
    tok = stem.split("_")
    if len(tok) < 5 or tok[0] != "section" or not tok[1].isdigit():
        raise ValueError(f"{name}: expected 'section_<id>_...'")
    domain, split = tok[2], tok[3]
    if domain not in ("source", "target"):
        raise ValueError(f"{name}: domain token {domain!r} is neither source nor target")
    if split not in ("train", "test"):
        raise ValueError(f"{name}: split token {split!r} is neither train nor test")
    rest = tok[4:]
    if rest and rest[0] in ("normal", "anomaly"):
        label, rest = rest[0], rest[1:]
    else:
        label = "unknown"
    if not rest or not rest[0].isdigit():
        raise ValueError(f"{name}: missing clip index")
    rest = rest[1:]
    attributes = {}
    for i in range(0, len(rest) - 1, 2):
        attributes[rest[i]] = rest[i + 1]
    if len(rest) % 2:
        attributes["extra"] = rest[-1]
    return {"section": tok[1], "domain": domain, "split": split, "label": label,
            "attributes": attributes}


def read_dcase_layout(root) -> tuple[Manifest, int]:
    """Scan ``<machine>/{train,test}/*.wav``; returns the manifest and the skip count."""
    root = Path(root)
    records, skipped = [], 0
    for machine_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for split in ("train", "test"):
            d = machine_dir / split
            if not d.is_dir():
                continue
            for f in sorted(d.glob("*.wav")):
                try:
                    info = parse_filename(f.name)
                    if info["split"] != split:
                        raise ValueError(f"{f.name}: split token disagrees with directory {split!r}")
                    if split == "train" and info["label"] == "anomaly":
                        raise ValueError(f"{f.name}: anomalous clip in train split")
                except ValueError as exc:
                    log.warning("skipping %s", exc)
                    skipped += 1
                    continue
                rel = f.relative_to(root)
                records.append(Record(f"{machine_dir.name}/{split}/{f.stem}", rel.as_posix(),
                                      machine_dir.name, info["domain"], split, info["label"],
                                      info["attributes"]))
    if skipped:
        log.warning("skipped %d malformed file(s) under %s", skipped, root)
    return Manifest(records, root), skipped


def class_table(records) -> dict[str, int]:
    """Dense class ids over canonical ``machine/key=value,...`` strings."""
    if isinstance(records, Manifest):
        records = records.records
    names = sorted({r.class_string() for r in records})
    if not names:
        raise ValueError("empty manifest")
    if len(names) < 2:
        raise ValueError(f"only one class ({names[0]}); the proxy task needs >= 2")
    return {name: i for i, name in enumerate(names)}


def load_clip(manifest: Manifest, rec: Record) -> Waveform:
    return read_wav(manifest.abspath(rec))
