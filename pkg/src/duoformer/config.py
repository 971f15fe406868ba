"""Run configuration: model + training dataclasses and the key=value file format.

The file format is flat text, one `key = value` per line, `#` comments,
unknown keys rejected. `seed` is a single shared key: it seeds both
parameter initialization and data shuffling/splitting. parse/serialize
round-trips up to comment stripping and key order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

SCALE_TOKEN_MODES = ("fused", "learnable", "none")
READOUTS = ("scale_token_patch_attn", "first_token", "avg_tokens", "scale_attn_only_fc")
ATTENTION_MODES = ("duo", "scale_only", "patch_only")
DTYPES = ("f32", "f64")

# (attention_mode, readout, scale_token_mode) triples that make structural sense
VALID_COMBOS = {
    ("duo", "scale_token_patch_attn", "fused"),
    ("duo", "scale_token_patch_attn", "learnable"),
    ("duo", "first_token", "none"),
    ("duo", "avg_tokens", "none"),
    ("scale_only", "scale_attn_only_fc", "fused"),
    ("scale_only", "scale_attn_only_fc", "learnable"),
    ("patch_only", "avg_tokens", "none"),
}


@dataclass
class DuoFormerConfig:
    input_size: int = 224
    patch_count: int = 49
    embed_dim: int = 768
    heads: int = 8
    layers: int = 6
    stages: "tuple[int, ...]" = (0, 1, 2, 3)
    channels: "tuple[int, ...]" = (256, 512, 1024, 2048)
    scale_token_mode: str = "fused"
    readout: str = "scale_token_patch_attn"
    attention_mode: str = "duo"
    num_classes: int = 4
    pos_scale: bool = True
    pos_patch: bool = True
    dtype: str = "f32"
    seed: int = 0
    patch_only_layers: "int | None" = None  # None -> use `layers`

    def validate(self) -> "DuoFormerConfig":
        from .tokenizer import patch_grid, tokens_per_patch  # local: avoids import cycle

        if self.input_size <= 0:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        patch_grid(self.patch_count)
        stages = tuple(sorted(set(self.stages)))
        if not stages or any(s not in (0, 1, 2, 3) for s in stages):
            raise ConfigError(f"stages must be a non-empty subset of {{0,1,2,3}}, got {self.stages}")
        for s in stages:
            tokens_per_patch(self.input_size, self.patch_count, s)  # raises naming the stage
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be 4 positive widths, got {self.channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.scale_token_mode not in SCALE_TOKEN_MODES:
            raise ConfigError(f"scale_token_mode must be one of {SCALE_TOKEN_MODES}, "
                              f"got {self.scale_token_mode!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, "
                              f"got {self.attention_mode!r}")
        if self.scale_token_mode == "fused":
            deepest = max(stages)
            pp = tokens_per_patch(self.input_size, self.patch_count, deepest)
            if pp != 1:
                raise ConfigError(
                    f"fused scale token anchors its identity path on the patch grid: "
                    f"deepest stage {deepest} has P'={pp}, need P'=1")
        combo = (self.attention_mode, self.readout, self.scale_token_mode)
        if combo not in VALID_COMBOS:
            raise ConfigError(
                f"unsupported combination attention_mode={combo[0]}, readout={combo[1]}, "
                f"scale_token_mode={combo[2]}; valid: {sorted(VALID_COMBOS)}")
        if self.attention_mode == "patch_only":
            deepest = max(stages)
            if tokens_per_patch(self.input_size, self.patch_count, deepest) != 1:
                raise ConfigError(
                    f"patch_only needs the deepest stage on the patch grid "
                    f"(P'={tokens_per_patch(self.input_size, self.patch_count, deepest)} "
                    f"at stage {deepest}; require P'=1)")
            if self.patch_only_layers is not None and self.patch_only_layers < 1:
                raise ConfigError(f"patch_only_layers must be >= 1, got {self.patch_only_layers}")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    max_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    seed: int = 0
    val_fraction: float = 1.0 / 6.0
    test_fraction: float = 1.0 / 6.0

    @property
    def betas(self) -> "tuple[float, float]":
        return (self.beta1, self.beta2)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (train-mode BN), got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not (1 <= self.patience <= self.max_epochs):
            raise ConfigError(
                f"patience must lie in [1, max_epochs={self.max_epochs}], got {self.patience}")
        if self.max_lr <= 0:
            raise ConfigError(f"max_lr must be positive, got {self.max_lr}")
        if self.weight_decay != 0.0:
            raise ConfigError("weight_decay is fixed at 0 (training uses none); "
                              f"got {self.weight_decay}")
        if not (0.0 < self.pct_start < 1.0):
            raise ConfigError(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if self.div_factor <= 1.0 or self.final_div_factor <= 1.0:
            raise ConfigError("div_factor and final_div_factor must exceed 1")
        if not (0.0 < self.val_fraction < 0.5 and 0.0 < self.test_fraction < 0.5):
            raise ConfigError("val/test fractions must lie in (0, 0.5)")
        return self


# ---- key=value text format ---------------------------------------------------

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> "tuple[int, ...]":
    s = s.strip()
    if not s:
        return ()
    return tuple(int(v.strip()) for v in s.split(","))


def _parse_opt_int(s: str):
    return None if s.lower() == "none" else int(s)


_CONVERTERS = {
    "input_size": int, "patch_count": int, "embed_dim": int, "heads": int, "layers": int,
    "stages": _parse_int_tuple, "channels": _parse_int_tuple,
    "scale_token_mode": str, "readout": str, "attention_mode": str,
    "num_classes": int, "pos_scale": _parse_bool, "pos_patch": _parse_bool,
    "dtype": str, "seed": int, "patch_only_layers": _parse_opt_int,
    "batch_size": int, "max_epochs": int, "patience": int,
    "max_lr": float, "beta1": float, "beta2": float, "weight_decay": float,
    "pct_start": float, "div_factor": float, "final_div_factor": float,
    "val_fraction": float, "test_fraction": float,
}

_MODEL_FIELDS = [f.name for f in fields(DuoFormerConfig)]
_TRAIN_FIELDS = [f.name for f in fields(TrainConfig) if f.name != "seed"]


def parse_config(text: str) -> "tuple[DuoFormerConfig, TrainConfig]":
    """Parse key=value lines into validated config pairs; unknown keys rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONVERTERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _CONVERTERS[key](val)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    model_kwargs = {k: v for k, v in values.items() if k in _MODEL_FIELDS}
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_FIELDS}
    if "seed" in values:
        train_kwargs["seed"] = values["seed"]
    model_cfg = DuoFormerConfig(**model_kwargs).validate()
    train_cfg = TrainConfig(**train_kwargs).validate()
    return model_cfg, train_cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(model_cfg: DuoFormerConfig, train_cfg: TrainConfig) -> str:
    if model_cfg.seed != train_cfg.seed:
        raise ConfigError("the file format has one shared seed; model and train seeds differ "
                          f"({model_cfg.seed} vs {train_cfg.seed})")
    lines = []
    for name in _MODEL_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(model_cfg, name))}")
    for name in _TRAIN_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(train_cfg, name))}")
    return "\n".join(lines) + "\n"


def config_summary(model_cfg: DuoFormerConfig) -> str:
    d = asdict(model_cfg)
    return ", ".join(f"{k}={v}" for k, v in d.items())
