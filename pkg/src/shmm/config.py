"""Flat ``key = value`` pipeline configuration."""

import dataclasses
from dataclasses import dataclass

from . import UsageError
from .gsm import ParameterLayout
from .synthetic import SynthSpec
from .training import TrainingConfig


@dataclass
class PipelineConfig:
    # model
    num_components: int = 4
    feature_dim: int = 0  # 0: take it from the feature archive
    subspace_dim: int = 0  # 0: 35 / 70 / 100 for 1 / 2 / 3+ source languages
    num_units: int = 100
    sigma2_w: float = 1.0
    self_loop_prob: float = 0.5
    freeze_subspace: bool = True
    init_scale: float = 0.1
    init_log_var: float = -4.0
    restarts: int = 1  # discovery reruns; the highest final ELBO wins
    # optimisation
    num_samples: int = 10
    phi_update_interval: int = 1000
    pretrain_updates: int = 15000
    outer_iterations: int = 30
    minibatch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    workers: int = 1
    # scoring / io
    frame_rate: float = 100.0
    tolerance: int = 2
    collapse_repeats: bool = True
    phone_map: str = ""
    # synthetic generator
    synth_subspace_dim: int = 4
    synth_num_components: int = 2
    synth_feature_dim: int = 8
    synth_languages: int = 2
    synth_phones: int = 8
    synth_utterances: int = 200
    synth_target_phones: int = 5
    synth_target_utterances: int = 200
    synth_min_phones: int = 3
    synth_max_phones: int = 8
    synth_sigma2_w: float = 0.5

    def validate(self):
        if self.num_components < 1:
            raise UsageError("num_components must be >= 1")
        if self.num_units < 1:
            raise UsageError("num_units must be >= 1")
        if self.restarts < 1:
            raise UsageError("restarts must be >= 1")
        if not 0.0 < self.self_loop_prob < 1.0:
            raise UsageError("self_loop_prob must lie in (0, 1)")
        if self.sigma2_w <= 0:
            raise UsageError("sigma2_w must be positive")
        if self.subspace_dim < 0 or self.feature_dim < 0:
            raise UsageError("dimensions must be non-negative")
        if self.feature_dim and self.subspace_dim > self.layout().psi_dim:
            raise UsageError(
                f"subspace_dim {self.subspace_dim} exceeds psi dimension {self.layout().psi_dim}"
            )
        self.training()
        return self

    def layout(self, feature_dim=None):
        return ParameterLayout(self.num_components, feature_dim or self.feature_dim)

    def training(self):
        names = {f.name for f in dataclasses.fields(TrainingConfig)}
        return TrainingConfig(**{n: getattr(self, n) for n in names})

    def synth_spec(self):
        return SynthSpec(
            subspace_dim=self.synth_subspace_dim,
            num_components=self.synth_num_components,
            feature_dim=self.synth_feature_dim,
            num_languages=self.synth_languages,
            phones_per_language=self.synth_phones,
            utterances_per_language=self.synth_utterances,
            target_phones=self.synth_target_phones,
            target_utterances=self.synth_target_utterances,
            min_phones=self.synth_min_phones,
            max_phones=self.synth_max_phones,
            sigma2_W=self.synth_sigma2_w,
            self_loop_prob=self.self_loop_prob,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key, raw):
    if key not in _FIELDS:
        raise UsageError(f"unknown configuration key {key!r}")
    kind = _FIELDS[key].type
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        return kind(raw)
    except ValueError:
        raise UsageError(f"invalid value {raw!r} for {key}") from None


def parse_assignments(lines, source="<config>"):
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip()
        try:
            values[key] = _convert(key, raw)
        except UsageError as err:
            raise UsageError(f"{source}:{lineno}: {err}") from None
    return values


def resolve_config(path=None, overrides=()):
    """Defaults, then the config file, then ``key=value`` overrides."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_assignments(fh, str(path)))
    values.update(parse_assignments(overrides, "--set"))
    return PipelineConfig(**values).validate()


def _format(value):
    return str(value).lower() if isinstance(value, bool) else str(value)


def dump_config(config):
    return "".join(f"{name} = {_format(getattr(config, name))}\n" for name in _FIELDS)
