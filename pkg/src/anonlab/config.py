"""Flat, typed key-value configuration with section prefixes.

File format: one ``section.key = value`` per line, ``#`` comments. Every
field has a default, so an empty config is a full experiment description.
Command-line overrides use the same ``section.key=value`` syntax. The fully
resolved config can be dumped back out and re-run to identical artifacts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import SynthLossConfig
from .models import EncoderConfig
from .synthdata import FeatureConfig
from .training import GrlConfig, ProbeConfig, SynthTrainConfig, TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed line, or untypeable value."""


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 8
    utts_per_speaker: int = 25
    vocab_size: int = 6
    tokens_per_utt: int = 4
    seed: int = 7
    test_adv_fraction: float = 0.1
    dev_fraction: float = 0.1


@dataclass(frozen=True)
class MiSectionConfig:
    n_bins: int = 64
    hist_bins: int = 20
    split: str = "dev"
    tap: int = 3


@dataclass(frozen=True)
class SweepConfig:
    taps: str = "1,3,5"
    alphas: str = "0.1,0.5"
    lambdas: str = "0.05,0.3,0.5"

    def grid(self) -> list[tuple[int, float, float]]:
        taps = [int(x) for x in self.taps.split(",") if x.strip()]
        alphas = [float(x) for x in self.alphas.split(",") if x.strip()]
        lams = [float(x) for x in self.lambdas.split(",") if x.strip()]
        return [(t, a, l) for t in taps for a in alphas for l in lams]


@dataclass(frozen=True)
class SynthSectionConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-8
    clip: float = 50.0
    n_utterances: int = 20
    holdout: int = 4
    eval_interval: int = 50
    seed: int = 0
    tap: int = 3
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0
    log_floor: float = 1e-5
    swapped_objectives: bool = False


@dataclass(frozen=True)
class ProbeSectionConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    fraction: float = 0.7
    split: str = "train"
    seed: int = 0
    taps: str = "3,5"

    def tap_list(self) -> list[int]:
        return [int(x) for x in self.taps.split(",") if x.strip()]


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    grl: GrlConfig = field(default_factory=GrlConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeSectionConfig = field(default_factory=ProbeSectionConfig)
    synth: SynthSectionConfig = field(default_factory=SynthSectionConfig)
    mi: MiSectionConfig = field(default_factory=MiSectionConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: OutputConfig = field(default_factory=OutputConfig)

    def out_dir(self) -> Path:
        return Path(self.out.dir)

    def probe_config(self, seed_offset: int = 0) -> ProbeConfig:
        p = self.probe
        return ProbeConfig(p.steps, p.batch_size, p.lr, p.fraction, p.split, p.seed + seed_offset)

    def synth_train_config(self) -> SynthTrainConfig:
        s = self.synth
        feat = dataclasses.replace(self.features, log_floor=s.log_floor)
        return SynthTrainConfig(
            steps=s.steps,
            batch_size=s.batch_size,
            lr=s.lr,
            beta1=s.beta1,
            beta2=s.beta2,
            eps=s.eps,
            clip=s.clip,
            n_utterances=s.n_utterances,
            holdout=s.holdout,
            eval_interval=s.eval_interval,
            seed=s.seed,
            losses=SynthLossConfig(s.lambda_fm, s.lambda_mel, feat, s.swapped_objectives),
        )


# "lambda" is a keyword, so the GrlConfig field is `lam`; config files still
# say grl.lambda
_KEY_ALIASES = {("grl", "lambda"): "lam"}
_NAME_ALIASES = {("grl", "lam"): "lambda"}


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from e
    raise ConfigError(f"{where}: unsupported field type {typ}")


def apply_settings(cfg: PipelineConfig, settings: dict[str, str]) -> PipelineConfig:
    """Apply {'section.key': 'value'} onto a config, with type checking."""
    by_section: dict[str, dict[str, object]] = {}
    section_fields = {f.name: f for f in fields(PipelineConfig)}
    for dotted, raw in settings.items():
        if dotted.count(".") != 1:
            raise ConfigError(f"expected section.key, got {dotted!r}")
        section, key = dotted.split(".")
        if section not in section_fields:
            raise ConfigError(f"unknown section {section!r}; sections: {sorted(section_fields)}")
        key = _KEY_ALIASES.get((section, key), key)
        defaults = section_fields[section].default_factory()  # type: ignore[misc]
        sub_fields = {f.name for f in fields(defaults)}
        if key not in sub_fields:
            raise ConfigError(f"unknown key {section}.{key}; keys: {sorted(sub_fields)}")
        # field types are inferred from the (always concrete) default values
        by_section.setdefault(section, {})[key] = _coerce(
            raw, type(getattr(defaults, key)), f"{section}.{key}"
        )
    updates = {}
    for section, kv in by_section.items():
        updates[section] = dataclasses.replace(getattr(cfg, section), **kv)
    return dataclasses.replace(cfg, **updates)


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    settings: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        dotted, raw = stripped.split("=", 1)
        settings[dotted.strip()] = raw.strip()
    return apply_settings(base or PipelineConfig(), settings)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> PipelineConfig:
    """Config file (optional) + 'section.key=value' overrides -> PipelineConfig."""
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text())
    parsed: dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parsed[dotted.strip()] = raw.strip()
    return apply_settings(cfg, parsed) if parsed else cfg


def dump_config(cfg: PipelineConfig) -> str:
    """Render the fully resolved config in the same flat format."""
    lines = []
    for sec_field in fields(cfg):
        section = getattr(cfg, sec_field.name)
        for f in fields(section):
            name = _NAME_ALIASES.get((sec_field.name, f.name), f.name)
            value = getattr(section, f.name)
            if dataclasses.is_dataclass(value):
                continue  # nested loss/feature configs are derived, not stored
            lines.append(f"{sec_field.name}.{name} = {value}")
    return "\n".join(lines) + "\n"
