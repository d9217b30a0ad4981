"""Sectioned key-value run configuration.

Every key has a default; unknown sections or keys are errors so that a typo
in an ablation grid fails loudly instead of silently running the default.
"""

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Counts, MachineSpec, default_specs
from .dsp import FrontEndConfig, SpecAugPolicy
from .lora import LoraPlan, expand_plan, parse_layers, parse_matrices, parse_multipliers
from .model import EncoderConfig
from .optim import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 42


@dataclass
class DataSection:
    machines: str = ""  # comma list; empty means every [machine.*] section
    clip_seconds: float = 2.0
    train_source: int = 90
    train_target: int = 10
    test_normal: int = 50
    test_anomaly: int = 50


@dataclass
class DspSection:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: typing.Optional[float] = None
    specaug: bool = True
    freq_mask_max: int = 16
    time_mask_max: int = 20
    n_freq_masks: int = 2
    n_time_masks: int = 2


@dataclass
class ModelSection:
    n_layers: int = 12
    d_model: int = 48
    n_heads: int = 4
    patch: int = 16
    mlp_ratio: int = 4
    dtype: str = "float32"
    init_seed: int = 0


@dataclass
class LoraSection:
    layers: str = "1-12"
    matrices: str = "q,v"
    rank: int = 8
    multipliers: str = ""
    alpha: typing.Optional[float] = None


@dataclass
class ObjectiveSection:
    scale: float = 30.0
    margin: float = 0.5


@dataclass
class OptimSection:
    mode: str = "lora"
    lr: float = 5e-5
    warmup_frac: float = 0.1
    batch_size: int = 8
    epochs: int = 30
    clip_norm: typing.Optional[float] = None


@dataclass
class PretrainSection:
    epochs: int = 10
    lr: float = 1e-3
    warmup_frac: float = 0.1
    labels: str = "class"


@dataclass
class DetectSection:
    k: int = 1
    single_detector: bool = False


@dataclass
class MetricsSection:
    p: float = 0.1
    mcclish: bool = False


@dataclass
class MachineSection:
    fundamental_hz: float = 200.0
    n_harmonics: int = 6
    am_rate_hz: float = 4.0
    am_depth: float = 0.3
    speeds: str = "low:0.85,mid:0.95,high:1.05,max:1.15"
    source_noise: float = 0.02
    target_noise: float = 0.03
    detune: float = 0.04
    burst: float = 1.0
    dropout: float = 1.0
    amplitude: float = 0.2
    gain_db: float = 6.0
    noise_jitter: float = 0.5
    am_jitter: float = 0.3
    f0_jitter: float = 0.01

    @classmethod
    def from_spec(cls, spec: MachineSpec) -> "MachineSection":
        (_, values), = spec.attributes.items()
        modes = spec.anomaly_modes
        return cls(spec.fundamental_hz, spec.n_harmonics, spec.am_rate_hz, spec.am_depth,
                   ",".join(f"{k}:{v}" for k, v in values.items()),
                   spec.source_noise, spec.target_noise,
                   modes.get("detune", 0.0), modes.get("burst", 0.0), modes.get("dropout", 0.0),
                   spec.amplitude, spec.gain_db, spec.noise_jitter, spec.am_jitter,
                   spec.f0_jitter)

    def to_spec(self, name: str) -> MachineSpec:
        speeds = {}
        for part in self.speeds.split(","):
            k, _, v = part.partition(":")
            try:
                speeds[k.strip()] = float(v)
            except ValueError:
                raise ValueError(f"machine {name}: bad speed entry {part!r}") from None
        # A zero severity switches that fault mode off.
        modes = {k: v for k, v in (("detune", self.detune), ("burst", self.burst),
                                   ("dropout", self.dropout)) if v != 0}
        return MachineSpec(name, self.fundamental_hz, self.n_harmonics, self.am_rate_hz,
                           self.am_depth, {"speed": speeds}, self.source_noise,
                           self.target_noise, modes, self.amplitude, self.gain_db,
                           self.noise_jitter, self.am_jitter, self.f0_jitter)


def _default_machines() -> dict:
    return {spec.name: MachineSection.from_spec(spec) for spec in default_specs()}


SECTIONS = {
    "run": RunSection, "data": DataSection, "dsp": DspSection, "model": ModelSection,
    "lora": LoraSection, "objective": ObjectiveSection, "optim": OptimSection,
    "pretrain": PretrainSection, "detect": DetectSection, "metrics": MetricsSection,
}


def _convert(raw: str, tp, where: str):
    raw = raw.strip()
    optional = False
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        tp, optional = args[0], True
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return tp(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {tp.__name__}") from None


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    dsp: DspSection = field(default_factory=DspSection)
    model: ModelSection = field(default_factory=ModelSection)
    lora: LoraSection = field(default_factory=LoraSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optim: OptimSection = field(default_factory=OptimSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    detect: DetectSection = field(default_factory=DetectSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    machines: dict = field(default_factory=_default_machines)  # name -> MachineSection

    # --- loading -----------------------------------------------------------

    def set(self, dotted: str, raw: str) -> None:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.rsplit(".", 1)
        if section.startswith("machine."):
            name = section.split(".", 1)[1]
            target = self.machines.setdefault(name, MachineSection())
        elif section in SECTIONS:
            target = getattr(self, section)
        else:
            raise ConfigError(f"unknown config section [{section}]")
        fields = {f.name: f for f in dataclasses.fields(target)}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        setattr(target, key, _convert(raw, fields[key].type, f"[{section}] {key}"))

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(f"{section}.{key}", raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            ecfg = self.encoder_config()
            expand_plan(self.lora_plan(), ecfg.n_layers)
            self.machine_specs()
            if self.optim.mode not in ("lora", "full"):
                raise ValueError(f"optim.mode must be lora or full, got {self.optim.mode!r}")
            if self.pretrain.labels not in ("machine", "class"):
                raise ValueError("pretrain.labels must be machine or class")
            if self.model.dtype not in ("float32", "float64"):
                raise ValueError("model.dtype must be float32 or float64")
            if not 0 < self.metrics.p <= 1:
                raise ValueError("metrics.p must lie in (0, 1]")
            if self.detect.k < 1:
                raise ValueError("detect.k must be >= 1")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def dump(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {_fmt(getattr(getattr(self, name), f.name))}")
            lines.append("")
        for name, sec in sorted(self.machines.items()):
            lines.append(f"[machine.{name}]")
            for f in dataclasses.fields(sec):
                lines.append(f"{f.name} = {_fmt(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved_config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path

    # --- typed views -------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def np_dtype(self):
        return np.float32 if self.model.dtype == "float32" else np.float64

    def frontend(self) -> FrontEndConfig:
        d = self.dsp
        return FrontEndConfig(d.win_ms, d.hop_ms, d.n_fft, d.n_mels, d.fmin, d.fmax)

    def specaug_policy(self) -> SpecAugPolicy | None:
        d = self.dsp
        if not d.specaug:
            return None
        return SpecAugPolicy(d.freq_mask_max, d.time_mask_max, d.n_freq_masks, d.n_time_masks)

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(m.n_layers, m.d_model, m.n_heads, m.patch, m.patch, m.mlp_ratio,
                             self.dsp.n_mels)

    def lora_plan(self) -> LoraPlan:
        l = self.lora
        return LoraPlan(parse_layers(l.layers), parse_matrices(l.matrices), l.rank,
                        parse_multipliers(l.multipliers), l.alpha)

    def counts(self) -> Counts:
        d = self.data
        return Counts(d.train_source, d.train_target, d.test_normal, d.test_anomaly)

    def machine_names(self) -> list[str]:
        if not self.data.machines.strip():
            return sorted(self.machines)
        names = [n.strip() for n in self.data.machines.split(",") if n.strip()]
        missing = [n for n in names if n not in self.machines]
        if missing:
            raise ValueError(f"data.machines lists {missing} without a [machine.<name>] section")
        return names

    def machine_specs(self) -> list[MachineSpec]:
        specs = [self.machines[n].to_spec(n) for n in self.machine_names()]
        for spec in specs:
            spec.validate()
        return specs

    def train_config(self, mode: str | None = None) -> TrainConfig:
        o = self.optim
        mode = mode or o.mode
        return TrainConfig(o.batch_size, o.epochs, self.seed, mode,
                           self.lora_plan() if mode == "lora" else None,
                           o.lr, o.warmup_frac, o.clip_norm, self.specaug_policy())

    def pretrain_config(self) -> TrainConfig:
        p, o = self.pretrain, self.optim
        return TrainConfig(o.batch_size, p.epochs, self.seed, "full", None, p.lr,
                           p.warmup_frac, o.clip_norm, self.specaug_policy())
