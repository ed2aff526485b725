"""Run configuration: one YAML tree covering every stage of the pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .datapipe import SamplerConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import RESOLUTION_PRESETS, ModelConfig
from .synthetic import SynthConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_patches: int = 16
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"

    def __post_init__(self):
        if self.n_patches < 0:
            raise ValueError("n_patches must be non-negative")


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    tile: int = 80          # input pixels per inference tile; 0 runs whole patches
    fap_bins: int = 32


SECTIONS = ("model", "loss", "train", "sampler", "data", "synth", "eval")


def _coerce(cls, section: str, values: dict) -> dict:
    """Reject unknown keys and turn numeric strings into the field's number type.

    YAML 1.1 reads ``2e-4`` (no dot) as a string, so floats need the nudge.
    """
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key: {section}.{key}")
        kind = str(types[key])
        if isinstance(value, str) and kind in ("float", "int"):
            try:
                value = float(value) if kind == "float" else int(value)
            except ValueError:
                raise ConfigError(f"{section}.{key} must be a number, got {value!r}") from None
        elif isinstance(value, int) and not isinstance(value, bool) and kind == "float":
            value = float(value)
        out[key] = value
    return out


def _build(cls, section: str, values: dict):
    values = _coerce(cls, section, dict(values or {}))
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def _plain(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    resolution: float = 2.5
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: ModelConfig.for_resolution(2.5))
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def factor(self) -> int:
        return self.model.sr_factor

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        """Build from a (possibly partial) nested dict.

        The model section starts from the preset of ``resolution`` and only
        keys present in the file override it. Synthetic data follows the
        same resolution unless ``synth.target_resolution`` is given.
        """
        d = dict(d or {})
        for key in d:
            if key not in ("resolution", "seed", *SECTIONS):
                raise ConfigError(f"unknown config key: {key}")
        for key in SECTIONS:
            if d.get(key) is not None and not isinstance(d[key], dict):
                raise ConfigError(f"config section {key} must be a mapping")
        try:
            resolution = float(d.get("resolution", 2.5))
            seed = int(d.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid top-level value: {exc}") from exc
        if resolution not in RESOLUTION_PRESETS:
            raise ConfigError(f"resolution must be one of {sorted(RESOLUTION_PRESETS)}, got {resolution:g}")

        model_over = _coerce(ModelConfig, "model", dict(d.get("model") or {}))
        try:
            model = ModelConfig.for_resolution(resolution, **model_over)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc

        synth = dict(d.get("synth") or {})
        synth.setdefault("target_resolution", resolution)
        synth.setdefault("seed", seed)
        train = dict(d.get("train") or {})
        train.setdefault("seed", seed)
        return cls(
            resolution=resolution,
            seed=seed,
            model=model,
            loss=_build(LossConfig, "loss", d.get("loss")),
            train=_build(TrainConfig, "train", train),
            sampler=_build(SamplerConfig, "sampler", d.get("sampler")),
            data=_build(DataConfig, "data", d.get("data")),
            synth=_build(SynthConfig, "synth", synth),
            eval=_build(EvalConfig, "eval", d.get("eval")),
        )

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "loss": _plain(self.loss),
            "train": self.train.to_dict(),
            "sampler": _plain(self.sampler),
            "data": _plain(self.data),
            "synth": self.synth.to_dict(),
            "eval": _plain(self.eval),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply overrides."""
    d: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path} must contain a mapping")
    for dotted, value in (overrides or {}).items():
        set_dotted(d, dotted, value)
    return RunConfig.from_dict(d)


def set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc


TEMPLATE = """\
# canopysr run configuration. Every key is optional; omitted keys take the
# defaults shown here. Unknown keys are rejected.

resolution: 2.5          # output resolution in m: 10 (r=1), 5 (r=2) or 2.5 (r=4)
seed: 0                  # copied into train.seed and synth.seed unless set there

model:                   # omitted keys follow the resolution preset
  # n_blocks: 5          # dense blocks (4 at 10 m)
  # layers_per_block: 5  # conv layers per block (4 at 10 m)
  growth: 24             # dense growth rate
  feat_dim: 64           # per-date feature size, also the date encoding size
  heads: 4
  head_dim: 16           # key/query size per head
  fused_dim: 64          # channels after temporal fusion
  tau: 365.0             # positional encoding period in days
  # sr_factor: 4         # 1, 2 or 4; set by the resolution
  init_noise_scale: 1.0e-4   # relative noise on the sub-pixel initialization
  mlp_layers: [64, 128, 64]

loss:
  w_height: 1.0          # weight of the patch-balanced MAE
  w_wgdl: 1.0            # weight of the weighted gradient difference loss
  lambda_min: 0.1        # floor of the gradient weights
  gdl_exponent: 2

train:
  lr: 1.0e-3
  restart_decay: 0.25    # each warm restart peaks at this fraction of the last
  batch_size: 32
  accum_steps: 4         # effective batch = batch_size * accum_steps
  max_steps: 1000        # optimizer steps
  cycle_len: 10.0        # epochs per cosine cycle
  cycle_mult: 1
  lr_min: 0.0
  betas: [0.9, 0.999]
  eps: 1.0e-8
  weight_decay: 0.0
  checkpoint_every: 100
  val_every: 100
  patience: 0            # validation rounds without improvement; 0 disables

sampler:
  t_max: 12              # dates kept per series
  t_min: 5               # shorter series are discarded
  window: 64             # loss window in input pixels
  margin: 8              # extra context on each side
  strategy: random       # random or equal_range for training

data:
  n_patches: 16          # synth only
  train_split: train
  val_split: val
  test_split: test

synth:
  size: 100
  ref_margin: 10
  fine_resolution: 1.25
  crown_density: 120.0
  n_dates: [8, 16]
  cloud_probability: 0.2

eval:
  split: test
  tile: 80               # inference tile in input pixels; 0 = whole patch
  fap_bins: 32
"""
