"""Flat key=value configuration with dotted namespaces.

Lines are ``key = value``; ``#`` starts a comment; unknown keys are
rejected rather than ignored. Every key has a default, and the resolved
snapshot written next to run artifacts parses back to the identical
resolution.
"""

from __future__ import annotations

from typing import Dict, List, Union

from .ema_gate import SIGN_MODES, EmaGateConfig
from .fusion import FUSION_MODES
from .synthdata import SceneSpec
from .trainer import EMA_MODES, TrainerConfig
from .uncertainty import METRIC_MODES

Value = Union[int, float, str, bool]


class ConfigError(ValueError):
    pass


# key -> (type, default, help)
SCHEMA: Dict[str, tuple] = {
    "data.height": (int, 64, "scene height in pixels"),
    "data.width": (int, 64, "scene width in pixels"),
    "data.channels": (int, 3, "image channels"),
    "data.background_blobs": (int, 6, "smooth background blobs per scene"),
    "data.change_density": (float, 0.05, "target changed-pixel fraction; 0 disables structures"),
    "data.noise_sigma": (float, 0.03, "per-pixel Gaussian noise sigma"),
    "data.change_quadrant": (int, -1, "restrict changes to a quadrant 0..3; -1 = whole image"),
    "data.n_total": (int, 240, "total generated scenes"),
    "data.n_val": (int, -1, "validation scenes; -1 = 20% of n_total"),
    "data.label_ratio": (float, 0.05, "labeled fraction of the training scenes"),
    "train.epochs": (int, 30, "passes over the unlabeled set"),
    "train.batch_labeled": (int, 8, "labeled mini-batch size"),
    "train.batch_unlabeled": (int, 8, "unlabeled mini-batch size"),
    "train.lr0": (float, 0.01, "initial learning rate"),
    "train.lr_min": (float, 1e-4, "final learning rate"),
    "train.momentum": (float, 0.9, "SGD momentum"),
    "train.confidence_threshold": (float, 0.95, "pseudo-label confidence cutoff"),
    "train.seed": (int, 0, "master seed for all streams"),
    "train.dtype": (str, "float32", "parameter dtype: float32 or float64"),
    "ramp.w_max": (float, 10.0, "peak unsupervised loss weight; 0 = supervised only"),
    "ramp.phi": (float, 5.0, "ramp-up severity"),
    "ramp.gamma": (float, 0.1, "fraction of training spent ramping"),
    "ema.mode": (str, "ada", "ada | plain | off-teacher-equals-student"),
    "ema.beta": (float, 0.996, "EMA momentum"),
    "ema.sign": (str, "prose", "uncertainty-delta sign: prose | literal"),
    "ema.epsilon": (float, 1e-5, "denominator offset of the update probability"),
    "fusion.mode": (str, "af", "af | af_star | off"),
    "fusion.ratio_lo": (float, 0.25, "minimum window size as a fraction of each dimension"),
    "fusion.ratio_hi": (float, 0.5, "maximum window size as a fraction of each dimension"),
    "fusion.invert_threshold": (bool, False, "flip the labeled-donor comparison"),
    "metric.mode": (str, "uncertainty", "entropy | rebalance | confusion | uncertainty"),
}


def defaults() -> Dict[str, Value]:
    return {k: v for k, (_, v, _) in SCHEMA.items()}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Value]:
    """Parse key=value lines into a full config dict (defaults plus file)."""
    cfg = defaults()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg[key] = _coerce(key, value, f"{source}:{lineno}")
    return cfg


def load_config(path) -> Dict[str, Value]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, source=str(path))


def apply_overrides(cfg: Dict[str, Value], overrides: List[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg[key] = _coerce(key, value, "--set")


def snapshot_text(cfg: Dict[str, Value]) -> str:
    """Canonical serialization; parses back to the identical dict."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            s = "true" if v else "false"
        else:
            s = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{key}={s}")
    return "\n".join(lines) + "\n"


def resolve(cfg: Dict[str, Value]) -> TrainerConfig:
    """Validate the dict and build the trainer configuration."""
    g = cfg.get
    if g("ema.mode") not in EMA_MODES:
        raise ConfigError(f"ema.mode must be one of {EMA_MODES}")
    if g("ema.sign") not in SIGN_MODES:
        raise ConfigError(f"ema.sign must be one of {SIGN_MODES}")
    if g("fusion.mode") not in FUSION_MODES:
        raise ConfigError(f"fusion.mode must be one of {FUSION_MODES}")
    if g("metric.mode") not in METRIC_MODES:
        raise ConfigError(f"metric.mode must be one of {METRIC_MODES}")
    if g("train.dtype") not in ("float32", "float64"):
        raise ConfigError("train.dtype must be float32 or float64")
    quadrant = g("data.change_quadrant")
    if quadrant not in (-1, 0, 1, 2, 3):
        raise ConfigError("data.change_quadrant must be -1 or 0..3")
    try:
        scene = SceneSpec(
            height=g("data.height"),
            width=g("data.width"),
            channels=g("data.channels"),
            n_background_blobs=g("data.background_blobs"),
            change_density=g("data.change_density"),
            noise_sigma=g("data.noise_sigma"),
            seed=g("train.seed"),
            change_quadrant=None if quadrant == -1 else quadrant,
        )
        ema = EmaGateConfig(
            beta=g("ema.beta"),
            epsilon_small=g("ema.epsilon"),
            sign_mode=g("ema.sign"),
            enabled=g("ema.mode") == "ada",
        )
        return TrainerConfig(
            scene=scene,
            n_total=g("data.n_total"),
            n_val=None if g("data.n_val") == -1 else g("data.n_val"),
            label_ratio=g("data.label_ratio"),
            epochs=g("train.epochs"),
            batch_labeled=g("train.batch_labeled"),
            batch_unlabeled=g("train.batch_unlabeled"),
            lr0=g("train.lr0"),
            lr_min=g("train.lr_min"),
            momentum=g("train.momentum"),
            confidence_threshold=g("train.confidence_threshold"),
            w_max=g("ramp.w_max"),
            phi=g("ramp.phi"),
            gamma=g("ramp.gamma"),
            ema=ema,
            ema_mode=g("ema.mode"),
            fusion_mode=g("fusion.mode"),
            fusion_ratio_lo=g("fusion.ratio_lo"),
            fusion_ratio_hi=g("fusion.ratio_hi"),
            fusion_invert=g("fusion.invert_threshold"),
            metric_mode=g("metric.mode"),
            seed=g("train.seed"),
            dtype=g("train.dtype"),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _coerce(key: str, value: str, where: str) -> Value:
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    typ = SCHEMA[key][0]
    try:
        if typ is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from e
