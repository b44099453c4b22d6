"""Experiment configuration: one validated record, parsed from flat
`key = value` text (UTF-8, `#` comments).  Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields, replace

from .data import parse_ratio


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str = "."
    out_dir: str = "out"
    split_seed: int = 1
    train_seed: int = 1
    ratio: str = "1/16"
    image_size: int = 64
    d_z: int = 8
    c_z: int = 16
    widths: str = "16,32,64,128"
    k_minus: int = 5
    k_plus: int = 5
    delta_minus: float = 0.4
    delta_plus: float = 0.1
    sigma_z_sq: float = 1.0
    sigma_eps_sq: float = 0.3
    j_passes: int = 10
    lambda_us: float = 1.0
    lambda_ue: float = 1.0
    lr_gen: float = 2.5e-5
    lr_ebm: float = 1.0e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 1000
    batch_size: int = 8
    phase1_iters: int = 6500
    phase2_iters: int = 8500
    np_mode: bool = False
    entropy_on_pseudo: bool = False
    joint_alpha_phase2: bool = False
    eval_np_variant: bool = True
    threads: int = 1

    def __post_init__(self):
        parse_ratio(self.ratio)  # raises on bad values
        positive_ints = ("image_size", "d_z", "c_z", "k_plus", "j_passes",
                         "batch_size", "lr_decay_every", "threads")
        for name in positive_ints:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("phase1_iters", "phase2_iters", "k_minus"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        positive_floats = ("delta_minus", "delta_plus", "sigma_z_sq",
                           "sigma_eps_sq", "lr_decay")
        for name in positive_floats:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        # a zero learning rate is a legitimate way to freeze one network
        for name in ("lambda_us", "lambda_ue", "lr_gen", "lr_ebm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        if len(self.width_tuple()) != 4:
            raise ConfigError("widths must list four channel counts")

    def width_tuple(self) -> tuple:
        try:
            parts = tuple(int(p) for p in self.widths.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad widths {self.widths!r}") from exc
        if any(p <= 0 for p in parts):
            raise ConfigError("widths must be positive")
        return parts

    def ratio_value(self) -> float:
        return parse_ratio(self.ratio)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}
_BOOLS = {"np_mode", "entropy_on_pseudo", "joint_alpha_phase2",
          "eval_np_variant"}
_INTS = {"split_seed", "train_seed", "image_size", "d_z", "c_z", "k_minus",
         "k_plus", "j_passes", "lr_decay_every", "batch_size",
         "phase1_iters", "phase2_iters", "threads"}
_STRS = {"data_dir", "out_dir", "ratio", "widths"}


def _coerce(key: str, raw: str):
    if key in _BOOLS:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in _INTS:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if key in _STRS:
        return raw
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc


def parse_config_text(text: str, base: ExperimentConfig | None = None
                      ) -> ExperimentConfig:
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    base = base or ExperimentConfig()
    try:
        return replace(base, **values)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str, base: ExperimentConfig | None = None
                ) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)
