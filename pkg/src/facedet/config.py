"""Configuration records for the detector.

Every section is a plain dataclass. The on-disk form is an INI-style file
(one ``[section]`` per dataclass, ``key = value`` lines, values written as
JSON literals) so it stays human-editable.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

RUNTIME_ONLY = ("io", "eval", "deterministic", "workers",
                "optim.checkpoint_every", "optim.log_every")


class ConfigError(ValueError):
    """Raised for invalid configuration values or unknown keys."""


@dataclass
class SamplerConfig:
    anchor_sizes: list[float] = field(default_factory=lambda: [4, 8, 16, 32, 64, 128])
    bdas_probability: float = 0.8
    crop_size: int = 128
    size_interval_lo: float = 0.5
    size_interval_hi: float = 2.0
    # cap the target anchor index at nearest+1 (inherited from DAS)
    bdas_index_cap: bool = True
    color_distort_probability: float = 0.5
    hflip_probability: float = 0.5
    brightness_delta: float = 32.0
    contrast_range: list[float] = field(default_factory=lambda: [0.5, 1.5])
    saturation_range: list[float] = field(default_factory=lambda: [0.5, 1.5])
    hue_delta: float = 18.0
    ssd_max_trials: int = 50
    # off: images are used as-is (must already be crop_size square)
    augment: bool = True

    def validate(self) -> None:
        sizes = list(self.anchor_sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])) or not sizes or sizes[0] <= 0:
            raise ConfigError("sampler.anchor_sizes must be positive and strictly increasing")
        if not 0.0 <= self.bdas_probability <= 1.0:
            raise ConfigError("sampler.bdas_probability must lie in [0, 1]")
        if not 0 < self.size_interval_lo < self.size_interval_hi:
            raise ConfigError("sampler.size_interval_lo must be < size_interval_hi")
        for name in ("color_distort_probability", "hflip_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"sampler.{name} must lie in [0, 1]")
        if self.crop_size <= 0:
            raise ConfigError("sampler.crop_size must be positive")


@dataclass
class AnchorConfig:
    strides: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    sizes: list[float] = field(default_factory=lambda: [4, 8, 16, 32, 64, 128])
    variances: list[float] = field(default_factory=lambda: [0.1, 0.2])
    # supervise head/body branches on the first shot as well
    first_shot_context: bool = True

    def validate(self) -> None:
        if len(self.strides) != len(self.sizes):
            raise ConfigError("anchors.strides and anchors.sizes must have equal length")
        if any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigError("anchors.strides must double level to level")
        if len(self.variances) != 2 or min(self.variances) <= 0:
            raise ConfigError("anchors.variances must be two positive numbers")


@dataclass
class MatchConfig:
    primary_iou: float = 0.35
    compensate_iou: float = 0.1
    compensate_top_n: int = 6
    context_ratios: list[float] = field(default_factory=lambda: [1, 2, 4])
    ignore_iou: float = 0.35

    def validate(self) -> None:
        if not self.compensate_iou < self.primary_iou:
            raise ConfigError("match.compensate_iou must be < match.primary_iou")
        if not self.context_ratios or self.context_ratios[0] != 1:
            raise ConfigError("match.context_ratios must start with the face ratio 1")
        if any(r < 1 for r in self.context_ratios):
            raise ConfigError("match.context_ratios must all be >= 1")


@dataclass
class DenseContextConfig:
    stages: int = 4
    growth_channels: int = 16
    kernel: int = 3
    projection_channels: int = 32

    def validate(self) -> None:
        if self.stages < 2:
            raise ConfigError("network.dense.stages must be >= 2")
        if min(self.growth_channels, self.projection_channels, self.kernel) <= 0:
            raise ConfigError("network.dense channel counts must be positive")


@dataclass
class NetworkConfig:
    backbone: str = "plain"
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 48, 64, 64, 64])
    lfpn_levels: int = 3
    lfpn_channels: int = 32
    dense: DenseContextConfig = field(default_factory=DenseContextConfig)
    anchor_free_level: int = 0
    anchor_free_shrink: float = 0.3
    anchor_free_scale: float = 8.0
    init: str = "xavier"
    pixel_mean: list[float] = field(default_factory=lambda: [123.0, 117.0, 104.0])
    pixel_std: list[float] = field(default_factory=lambda: [58.0, 57.0, 57.0])

    def validate(self) -> None:
        self.dense.validate()
        if len(self.backbone_channels) == 0 or min(self.backbone_channels) <= 0:
            raise ConfigError("network.backbone_channels must be positive")


@dataclass
class LossWeights:
    first_shot_weight: float = 0.5
    regression_weight: float = 1.0
    segmentation_weight: float = 0.1
    anchor_free_weight: float = 0.1
    context_branch_weights: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    mining_ratio: float = 3.0
    negative_filter_threshold: float = 0.99
    # drop second-shot negatives the first shot already rejects confidently;
    # costs extra iterations early on because inference never applies it
    use_negative_filter: bool = True

    def validate(self) -> None:
        scalars = [self.first_shot_weight, self.regression_weight,
                   self.segmentation_weight, self.anchor_free_weight, self.mining_ratio]
        if min(scalars) < 0 or min(self.context_branch_weights) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_iters: int = 3000
    lr_start: float = 1e-6
    lr_peak: float = 4e-3
    decay_iters: list[int] = field(default_factory=lambda: [80000, 100000])
    decay_factor: float = 0.1
    total_iters: int = 120000
    batch_size: int = 4
    # divides every iteration count (desk-scale shrinking)
    scale: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 1

    def validate(self) -> None:
        if not self.lr_start < self.lr_peak:
            raise ConfigError("optim.lr_start must be < optim.lr_peak")
        d = list(self.decay_iters)
        if any(b <= a for a, b in zip(d, d[1:])) or (d and d[-1] >= self.total_iters):
            raise ConfigError("optim.decay_iters must be increasing and < total_iters")
        if self.scale <= 0:
            raise ConfigError("optim.scale must be positive")
        if self.batch_size <= 0:
            raise ConfigError("optim.batch_size must be positive")


@dataclass
class EvalConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.3
    max_detections: int = 750
    pre_nms_top_k: int = 5000
    iou_threshold: float = 0.5
    num_thresholds: int = 1000


@dataclass
class IOConfig:
    data_root: str = "data"
    annotation_file: str = "annotations.txt"
    subset_file: str = ""
    output_dir: str = "runs"


@dataclass
class DetectorConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seed: int = 0
    deterministic: bool = True
    workers: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for section in (self.sampler, self.anchors, self.match, self.network,
                        self.losses, self.optim):
            section.validate()
        if [float(s) for s in self.sampler.anchor_sizes] != [float(s) for s in self.anchors.sizes]:
            raise ConfigError("sampler.anchor_sizes must equal anchors.sizes")
        n_levels = len(self.anchors.strides)
        if len(self.network.backbone_channels) != n_levels:
            raise ConfigError("network.backbone_channels needs one entry per pyramid level")
        if len(self.losses.context_branch_weights) != len(self.match.context_ratios):
            raise ConfigError("losses.context_branch_weights needs one weight per context ratio")
        if not 0 <= self.network.lfpn_levels < n_levels:
            raise ConfigError("network.lfpn_levels must be below the number of levels")
        if not 0 <= self.network.anchor_free_level < n_levels:
            raise ConfigError("network.anchor_free_level out of range")

    @property
    def num_branches(self) -> int:
        return len(self.match.context_ratios)

    @classmethod
    def full_scale(cls) -> "DetectorConfig":
        """Hyperparameters of the full-size recipe (640 px crops, 120k iterations)."""
        sizes = [16, 32, 64, 128, 256, 512]
        return cls(
            sampler=SamplerConfig(anchor_sizes=list(sizes), crop_size=640),
            anchors=AnchorConfig(strides=[4, 8, 16, 32, 64, 128], sizes=list(sizes)),
            network=NetworkConfig(
                backbone_channels=[256, 512, 1024, 2048, 512, 256],
                lfpn_channels=256,
                dense=DenseContextConfig(stages=4, growth_channels=32, projection_channels=64),
                anchor_free_scale=32.0,
            ),
            optim=OptimConfig(batch_size=28),
        )

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DetectorConfig":
        return _build(cls, data, "")

    def content_hash(self) -> str:
        """Hash of everything that shapes the trained parameters.

        Runtime-only settings (paths, evaluation knobs, cadences, determinism
        and worker count) are left out so they can change between train and
        evaluate without invalidating checkpoints.
        """
        data = self.to_dict()
        for key in RUNTIME_ONLY:
            section, _, name = key.rpartition(".")
            (data[section] if section else data).pop(name, None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        flat = self.to_dict()
        parser["run"] = {k: json.dumps(v) for k, v in flat.items() if not isinstance(v, dict)}
        for name, section in flat.items():
            if isinstance(section, dict):
                for key, value in _flatten(section, "").items():
                    parser.setdefault(name, {})
                    parser[name][key] = json.dumps(value)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, overrides: list[str] | None = None) -> "DetectorConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        data: dict[str, Any] = {}
        for section in parser.sections():
            for key, raw in parser[section].items():
                path = key if section == "run" else f"{section}.{key}"
                _assign(data, path, _parse_value(raw, path))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            path, raw = item.split("=", 1)
            _assign(data, path.strip(), _parse_value(raw.strip(), path.strip()))
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "DetectorConfig":
        return cls.loads(Path(path).read_text(), overrides)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def with_overrides(self, overrides: list[str]) -> "DetectorConfig":
        return DetectorConfig.loads(self.dumps(), overrides)


def _flatten(d: dict[str, Any], prefix: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _parse_value(raw: str, path: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        # bare strings are accepted for convenience
        return raw


def _assign(data: dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {path!r} collides with a scalar")
    node[parts[-1]] = value


def _build(cls: type, data: dict[str, Any], prefix: str) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING \
            else fields[key].default
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be a section")
            kwargs[key] = _build(type(default), value, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, default, f"{prefix}{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path} expects a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"config key {path} expects an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path} expects a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {path} expects a list")
        return value
    if isinstance(default, str):
        return str(value)
    return value
