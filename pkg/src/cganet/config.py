"""Run configuration with a flat dotted-key file format.

A config file is a JSON object whose keys are the dotted names below, e.g.::

    {"optim.lr": 0.001, "sam.residual": true, "schedule.switch_epoch": 2}

Unknown keys are rejected; missing keys take their defaults. Defaults are
the desk-scale setting: 32^3 phantoms, channel widths
divided by 4, batch 2, 30 epochs, inter-class loss joining at epoch 2.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .data import PhantomSpec
from .network import NetworkSpec
from .sam import LABEL_TO_CHANNEL, SAMConfig


class ConfigError(ValueError):
    """Invalid configuration value or key."""


def _f(key: str, default, **kw):
    return dataclasses.field(default=default, metadata={"key": key, **kw})


@dataclass
class RunConfig:
    task: str = _f("task", "train")
    data_dir: str = _f("data.dir", "")
    out_dir: str = _f("out.dir", "runs/default")
    n_cases: int = _f("data.n_cases", 20)
    phantom_extent: int = _f("data.phantom_extent", 32)
    phantom_seed: int = _f("data.phantom_seed", 0)
    phantom_noise: float = _f("data.noise", 0.35)
    crop: int = _f("data.crop", 32)
    folds: int = _f("data.folds", 5)
    val_fold: int = _f("data.val_fold", 0)
    channel_divisor: int = _f("model.scale", 4)
    dropout: float = _f("model.dropout", 0.2)
    lr: float = _f("optim.lr", 1e-3)
    weight_decay: float = _f("optim.weight_decay", 1e-5)
    batch_size: int = _f("optim.batch_size", 2)
    epochs: int = _f("train.epochs", 30)
    seed: int = _f("train.seed", 0)
    checkpoint_every: int = _f("train.checkpoint_every", 10)
    w_main: float = _f("loss.main_weight", 1.0)
    w_attention: float = _f("loss.attention_weight", 1.0)
    # Calibrated on the 30-epoch smoke run so |w_inter * L_I| is close to L_M.
    w_inter: float = _f("loss.inter_weight", 0.01)
    switch_epoch: int = _f("schedule.switch_epoch", 2)
    sam_enabled: bool = _f("sam.enabled", True)
    sam_intra: bool = _f("sam.intra", True)
    sam_intra_classes: str = _f("sam.intra_classes", "all")
    sam_residual: bool = _f("sam.residual", True)
    sam_attention_softmax: bool = _f("sam.attention_softmax", True)
    sam_hard_masks: bool = _f("sam.hard_masks", False)
    inter_enabled: bool = _f("inter.enabled", True)
    inter_sign: str = _f("inter.sign", "maximize")
    inter_ordered_pairs: bool = _f("inter.ordered_pairs", False)
    inter_detach_masks: bool = _f("inter.detach_masks", True)
    count_mode: str = _f("analyze.count_mode", "fma")

    # -- serialization ---------------------------------------------------------

    def to_flat(self) -> dict:
        return {f.metadata["key"]: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        by_key = {f.metadata["key"]: f for f in fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            if key not in by_key:
                raise ConfigError(f"unknown config key {key!r}")
            f = by_key[key]
            kwargs[f.name] = _coerce(key, value, type(f.default))
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_flat(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                flat = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        return cls.from_flat(flat)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def set_key(self, key: str, value) -> "RunConfig":
        flat = self.to_flat()
        flat[key] = value
        return RunConfig.from_flat(flat)

    # -- derived objects ---------------------------------------------------------

    def validate(self) -> None:
        if self.inter_sign not in ("maximize", "minimize"):
            raise ConfigError(f"inter.sign must be maximize or minimize, not {self.inter_sign!r}")
        if self.count_mode not in ("fma", "flop"):
            raise ConfigError(f"analyze.count_mode must be fma or flop, not {self.count_mode!r}")
        if self.crop % 8 or self.crop > self.phantom_extent:
            raise ConfigError(f"data.crop={self.crop} must be a multiple of 8 no larger than the phantom extent")
        if self.phantom_extent % 8:
            raise ConfigError(f"data.phantom_extent={self.phantom_extent} must be a multiple of 8")
        if self.folds < 2 or not 0 <= self.val_fold < self.folds:
            raise ConfigError(f"need folds >= 2 and 0 <= val_fold < folds (got {self.folds}, {self.val_fold})")
        if self.batch_size < 1 or self.epochs < 0 or self.channel_divisor < 1:
            raise ConfigError("batch size, epochs and model scale must be positive")
        self.intra_channels()

    def intra_channels(self) -> tuple[int, ...] | None:
        """Channel indices for the intra-class update, parsed from label values."""
        spec = str(self.sam_intra_classes).strip().lower()
        if spec in ("all", ""):
            return None
        if spec == "none":
            return ()
        try:
            labels = [int(s) for s in spec.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"sam.intra_classes: cannot parse {self.sam_intra_classes!r}") from exc
        for label in labels:
            if label not in LABEL_TO_CHANNEL:
                raise ConfigError(f"sam.intra_classes: {label} is not a label value (0, 1, 2, 4)")
        return tuple(LABEL_TO_CHANNEL[label] for label in labels)

    def sam_config(self) -> SAMConfig:
        return SAMConfig(
            enabled=self.sam_enabled,
            intra=self.sam_intra,
            intra_classes=self.intra_channels(),
            inter=self.inter_enabled,
            inter_sign=self.inter_sign,
            inter_ordered_pairs=self.inter_ordered_pairs,
            inter_detach_masks=self.inter_detach_masks,
            residual=self.sam_residual,
            attention_softmax=self.sam_attention_softmax,
            hard_masks=self.sam_hard_masks,
        )

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(dropout=self.dropout).scaled(self.channel_divisor)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(extent=self.phantom_extent, seed=self.phantom_seed, noise=self.phantom_noise)


def _coerce(key: str, value, kind):
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from exc


# Ablation variants expressed as config overrides.
ABLATION_ROWS: dict[str, dict] = {
    "Baseline": {"sam.enabled": False, "sam.intra": False, "inter.enabled": False},
    "Baseline + Intra": {"sam.intra": True, "inter.enabled": False},
    "Baseline + Intra (class1)": {"sam.intra": True, "sam.intra_classes": "1", "inter.enabled": False},
    "Baseline + Intra (class2)": {"sam.intra": True, "sam.intra_classes": "2", "inter.enabled": False},
    "Baseline + Intra (class4)": {"sam.intra": True, "sam.intra_classes": "4", "inter.enabled": False},
    "Baseline + Inter": {"sam.intra": False, "inter.enabled": True, "inter.sign": "maximize"},
    "Baseline - Inter": {"sam.intra": False, "inter.enabled": True, "inter.sign": "minimize"},
    "Baseline + Intra + Inter": {"sam.intra": True, "inter.enabled": True, "inter.sign": "maximize"},
}


def ablation_config(base: RunConfig, row: str) -> RunConfig:
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}")
    flat = base.to_flat()
    flat.update({"sam.enabled": True, "sam.intra_classes": "all"})
    flat.update(ABLATION_ROWS[row])
    return RunConfig.from_flat(flat)
