"""Flat key=value configuration files with CLI overrides.

Unknown keys are rejected; every run writes a resolved snapshot next to its
outputs so any artifact can be reproduced from the snapshot alone.
"""

from __future__ import annotations

from pathlib import Path

from . import detector as det
from . import training


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


# key -> (parser, target, attribute); target "detector" nests into the
# DetectorConfig, "train" sits on the TrainConfig itself
SCHEMA = {
    "channels": (int, "detector", "channels"),
    "image_size": (int, "detector", "image_size"),
    "query_size": (int, "detector", "query_size"),
    "k_proposals": (int, "detector", "k_proposals"),
    "anchor_scales": (_floats, "detector", "anchor_scales"),
    "anchor_ratios": (_floats, "detector", "anchor_ratios"),
    "rpn_nms_iou": (float, "detector", "rpn_nms_iou"),
    "rpn_pre_nms_top": (int, "detector", "rpn_pre_nms_top"),
    "fg_iou_thresh": (float, "detector", "fg_iou_thresh"),
    "final_nms_iou": (float, "detector", "final_nms_iou"),
    "score_thresh": (float, "detector", "score_thresh"),
    "reduction_ratio": (int, "detector", "reduction_ratio"),
    "excite_from": (str, "detector", "excite_from"),
    "use_co_attention": (_bool, "detector", "use_co_attention"),
    "use_co_excitation": (_bool, "detector", "use_co_excitation"),
    "epochs": (int, "train", "epochs"),
    "batch_size": (int, "train", "batch_size"),
    "base_lr": (float, "train", "base_lr"),
    "momentum": (float, "train", "momentum"),
    "decay_factor": (float, "train", "decay_factor"),
    "decay_every_epochs": (int, "train", "decay_every_epochs"),
    "lambda_mr": (float, "train", "lambda_mr"),
    "m_plus": (float, "train", "m_plus"),
    "m_minus": (float, "train", "m_minus"),
    "normalize_margin": (_bool, "train", "normalize_margin"),
    "use_margin_loss": (_bool, "train", "use_margin_loss"),
    "init_seed": (int, "train", "init_seed"),
    "data_seed": (int, "train", "data_seed"),
    "num_classes": (int, "train", "num_classes"),
    "num_unseen": (int, "train", "num_unseen"),
    "train_scenes": (int, "train", "train_scenes"),
    "test_scenes": (int, "train", "test_scenes"),
    "query_scenes": (int, "train", "query_scenes"),
    "min_objects": (int, "train", "min_objects"),
    "max_objects": (int, "train", "max_objects"),
    "noise": (float, "train", "noise"),
}


def parse_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def build_train_config(pairs: dict[str, str]) -> training.TrainConfig:
    cfg = training.TrainConfig()
    dcfg_kwargs: dict = {}
    for key, value in pairs.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser, target, attr = SCHEMA[key]
        try:
            parsed = parser(value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({e})") from e
        if target == "detector":
            dcfg_kwargs[attr] = parsed
        else:
            setattr(cfg, attr, parsed)
    if dcfg_kwargs:
        from dataclasses import replace
        cfg.detector = replace(cfg.detector, **dcfg_kwargs)
    return cfg


def resolved_snapshot(cfg: training.TrainConfig) -> str:
    """The full effective configuration, one key=value per line."""
    lines = []
    for key, (parser, target, attr) in SCHEMA.items():
        obj = cfg.detector if target == "detector" else cfg
        value = getattr(obj, attr)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def load_train_config(config_path: str | None, overrides: list[str]) -> training.TrainConfig:
    pairs = parse_file(config_path) if config_path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        pairs[key] = value
    return build_train_config(pairs)
