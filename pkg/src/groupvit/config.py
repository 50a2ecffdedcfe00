"""Model and run configuration, presets, and the flat ``key = value`` file format.

One key per line, ``#`` starts a comment, unknown keys are rejected. Grouping
stages are spelled as parallel comma-separated lists::

    stage_group_tokens = 64, 8
    stage_insert_after = 6, 9
    stage_mixer        = 0, 1
    stage_output_tokens = 0, 0      # 0 means "same as stage_group_tokens"
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or violates an invariant."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class GroupingStageConfig:
    """One grouping stage.

    ``num_group_tokens`` tokens enter the stage's Transformer layers. With
    ``mixer_connector`` on a later stage, those tokens are produced from the
    previous stage's group tokens by an MLP-Mixer layer instead of being free
    parameters. ``num_output_tokens`` (1-stage variant) projects the group
    tokens to a smaller count with a mixer right before the Grouping Block.
    """

    num_group_tokens: int
    insert_after_layer: int
    mixer_connector: bool = False
    num_output_tokens: int = 0

    @property
    def output_tokens(self) -> int:
        return self.num_output_tokens or self.num_group_tokens


def _full_stages() -> tuple[GroupingStageConfig, ...]:
    return (GroupingStageConfig(64, 6), GroupingStageConfig(8, 9, mixer_connector=True))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    in_channels: int = 3
    hidden_width: int = 384
    num_layers: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    stages: tuple[GroupingStageConfig, ...] = field(default_factory=_full_stages)
    projection_width: int = 256
    projection_hidden: int = 4096
    text_layers: int = 12
    text_width: int = 256
    text_heads: int = 4
    vocab_size: int = 49152
    max_text_length: int = 77
    gumbel_temperature: float = 1.0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    def validate(self) -> ModelConfig:
        if self.image_size % self.patch_size:
            raise ConfigError("image_size", f"{self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_width % self.num_heads:
            raise ConfigError("num_heads", f"hidden_width {self.hidden_width} not divisible by {self.num_heads}")
        if self.text_width % self.text_heads:
            raise ConfigError("text_heads", f"text_width {self.text_width} not divisible by {self.text_heads}")
        if not self.stages:
            raise ConfigError("stage_group_tokens", "at least one grouping stage is required")
        prev_layer, prev_count = 0, self.num_patches
        for i, st in enumerate(self.stages):
            if not prev_layer < st.insert_after_layer < self.num_layers:
                raise ConfigError(
                    "stage_insert_after",
                    f"stage {i} inserted after layer {st.insert_after_layer}; must increase and be < {self.num_layers}",
                )
            if st.num_group_tokens < 1 or st.output_tokens >= prev_count:
                raise ConfigError(
                    "stage_group_tokens", f"stage {i} outputs {st.output_tokens} groups from {prev_count} segments"
                )
            if i == 0 and st.mixer_connector:
                raise ConfigError("stage_mixer", "the first stage has no previous group tokens to connect")
            prev_layer, prev_count = st.insert_after_layer, st.output_tokens
        if self.max_text_length < 1:
            raise ConfigError("max_text_length", "must be positive")
        if self.gumbel_temperature <= 0:
            raise ConfigError("gumbel_temperature", "must be positive")
        return self


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # optimizer
    lr: float = 0.0016
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    epochs: int = 30
    batch_size: int = 4096
    seed: int = 0
    grad_clip: float = 1.0
    tau_init: float = 0.07
    checkpoint_every: int = 0
    # loss
    mode: str = "hard"
    multilabel: bool = True
    k_nouns: int = 3
    templates_path: str = ""
    lexicon_path: str = ""
    # eval
    threshold: float = 0.9
    threshold_voc: float = 0.9
    threshold_context: float = 0.5
    label_temperature: float = 0.0  # 0 reuses the trained contrastive temperature
    class_list_path: str = ""

    def validate(self) -> RunConfig:
        self.model.validate()
        if self.mode not in ("soft", "hard"):
            raise ConfigError("mode", f"expected soft or hard, got {self.mode!r}")
        if self.k_nouns < 1:
            raise ConfigError("k_nouns", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold", "must lie in [0, 1]")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs", "longer than training")
        if self.tau_init <= 0:
            raise ConfigError("tau_init", "must be positive")
        return self

    def replace(self, **changes) -> RunConfig:
        """Copy with some fields changed; model fields may be named directly."""
        model_changes = {k: changes.pop(k) for k in list(changes) if k in _MODEL_FIELDS or k == "stages"}
        for k in changes:
            if k not in _RUN_FIELDS and k != "model":
                raise ConfigError(k, "unknown key")
        base = changes.pop("model", self.model)
        model = dataclasses.replace(base, **model_changes) if model_changes else base
        return dataclasses.replace(self, model=model, **changes).validate()


_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"stages"}
_RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"model"}
_STAGE_KEYS = ("stage_group_tokens", "stage_insert_after", "stage_mixer", "stage_output_tokens")


def full_preset() -> RunConfig:
    """Full-scale architecture and schedule, kept as documentation; far too large to train here."""
    return RunConfig().validate()


def full_one_stage_preset() -> RunConfig:
    stages = (GroupingStageConfig(64, 6, num_output_tokens=8),)
    return RunConfig(model=ModelConfig(stages=stages)).validate()


def desk_preset() -> RunConfig:
    """Small preset that trains on the synthetic shapes set in minutes on one CPU."""
    model = ModelConfig(
        image_size=64,
        patch_size=8,
        hidden_width=64,
        num_layers=6,
        num_heads=4,
        stages=(GroupingStageConfig(8, 2), GroupingStageConfig(4, 4, mixer_connector=True)),
        projection_width=64,
        projection_hidden=128,
        text_layers=4,
        text_width=64,
        text_heads=4,
        vocab_size=32,
        max_text_length=16,
    )
    return RunConfig(
        model=model,
        lr=3e-4,
        weight_decay=0.05,
        warmup_epochs=2,
        epochs=20,
        batch_size=32,
        k_nouns=3,
        threshold=0.5,
    ).validate()


PRESETS = {"full": full_preset, "full-1stage": full_one_stage_preset, "desk": desk_preset}


# ---------------------------------------------------------------- text format


def _format(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def _field_types(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: types.get(str(f.type)) for f in fields(cls)}


def dumps(cfg: RunConfig) -> str:
    lines = ["# model"]
    for f in fields(ModelConfig):
        if f.name == "stages":
            st = cfg.model.stages
            lines.append("stage_group_tokens = " + ", ".join(str(s.num_group_tokens) for s in st))
            lines.append("stage_insert_after = " + ", ".join(str(s.insert_after_layer) for s in st))
            lines.append("stage_mixer = " + ", ".join(_format(s.mixer_connector) for s in st))
            lines.append("stage_output_tokens = " + ", ".join(str(s.num_output_tokens) for s in st))
        else:
            lines.append(f"{f.name} = {_format(getattr(cfg.model, f.name))}")
    lines.append("# run")
    for f in fields(RunConfig):
        if f.name != "model":
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a config file. Keys not present keep their value from ``base`` (default: the full-scale preset)."""
    base = base or RunConfig()
    model_types, run_types = _field_types(ModelConfig), _field_types(RunConfig)
    model_vals: dict = {}
    run_vals: dict = {}
    stage_vals: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _STAGE_KEYS:
            stage_vals[key] = [v.strip() for v in raw.split(",") if v.strip()]
        elif key in _MODEL_FIELDS:
            model_vals[key] = _parse(key, raw, model_types[key])
        elif key in _RUN_FIELDS:
            run_vals[key] = _parse(key, raw, run_types[key])
        else:
            raise ConfigError(key, "unknown key")
    if stage_vals:
        model_vals["stages"] = _parse_stages(stage_vals, base.model.stages)
    model = dataclasses.replace(base.model, **model_vals)
    return dataclasses.replace(base, model=model, **run_vals).validate()


def _parse_stages(vals: dict[str, list[str]], base_stages) -> tuple[GroupingStageConfig, ...]:
    if "stage_group_tokens" not in vals or "stage_insert_after" not in vals:
        raise ConfigError("stage_group_tokens", "stage_group_tokens and stage_insert_after must be given together")
    n = len(vals["stage_group_tokens"])
    for key in _STAGE_KEYS:
        if key in vals and len(vals[key]) != n:
            raise ConfigError(key, f"expected {n} comma-separated values")
    stages = []
    for i in range(n):
        stages.append(
            GroupingStageConfig(
                num_group_tokens=_parse("stage_group_tokens", vals["stage_group_tokens"][i], int),
                insert_after_layer=_parse("stage_insert_after", vals["stage_insert_after"][i], int),
                mixer_connector=_parse("stage_mixer", vals["stage_mixer"][i], bool) if "stage_mixer" in vals else i > 0,
                num_output_tokens=(
                    _parse("stage_output_tokens", vals["stage_output_tokens"][i], int)
                    if "stage_output_tokens" in vals
                    else 0
                ),
            )
        )
    return tuple(stages)


def load(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(), base)


def save(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(dumps(cfg))
