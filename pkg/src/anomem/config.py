"""Experiment configuration: nested dataclasses loaded from strict JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from anomem.augment import AugmentPolicy
from anomem.data import SyntheticSpec
from anomem.encoder import EncoderSpec, StageSpec
from anomem.errors import ValidationError
from anomem.losses import VARIANCE_MODES, ScaleWeights

MODES = ("one-class", "ssad")


@dataclass
class MemoryConfig:
    sizes: list[int] = field(default_factory=lambda: [64, 32])
    beta: float = 2.0
    tol: float = 1e-4
    max_iters: int = 16
    init_radius: float = 1.0
    # "sphere": independent random prototypes; "repeated": one prototype copied N times
    init: str = "sphere"


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda_v: float = 0.05
    margin: float = 2.0
    lambda_base: float = 2.0
    ratios: list[float] = field(default_factory=lambda: [0.3, 1.0])
    variance_mode: str = "sample"


@dataclass
class OptimConfig:
    epochs: int = 8
    batch_size: int = 128
    lr_max: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class Stage2Config:
    epochs: int = 60
    batch_size: int = 64
    lr_max: float = 0.01
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: int = 64
    grids: list[int] = field(default_factory=lambda: [2, 1])
    # clamp head outputs below 0 before the hinge (kills anomaly gradients when on)
    clamp_negative: bool = False
    # pooled deviations share a large common offset; standardize head inputs
    standardize: bool = True


@dataclass
class ProtocolConfig:
    normal_class: int = 0
    gamma: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n_test: int = 100
    n_train_normal: int | None = 500


@dataclass
class DataConfig:
    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    cifar_files: list[str] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mode: str = "one-class"
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)
    # unit-norm queries keep retrieval off the global metastable average
    normalize_before_memory: bool = True
    use_projection_head: bool = False
    # ablation switches: memory-free contrastive training; subset of scales used
    use_memory: bool = True
    scales: list[int] | None = None

    # ------------------------------------------------------------------
    @property
    def n_scales(self) -> int:
        return len(self.encoder.stages)

    @property
    def active_scales(self) -> list[int]:
        return list(range(self.n_scales)) if self.scales is None else list(self.scales)

    def scale_weights(self) -> ScaleWeights:
        lambdas = tuple(self.loss.lambda_base**s for s in range(self.n_scales))
        return ScaleWeights(lambdas, self.loss.lambda_v, tuple(self.loss.ratios))

    def validate(self) -> "ExperimentConfig":
        self.encoder.validate()
        self.augment.validate()
        self.data.synthetic.validate()
        s = self.n_scales
        m, lo, op, st2, pr = self.memory, self.loss, self.optim, self.stage2, self.protocol
        if len(m.sizes) != s or any(n < 1 for n in m.sizes):
            raise ValidationError(f"memory.sizes needs {s} positive entries, got {m.sizes}")
        if not m.beta > 0 or not m.tol > 0 or m.max_iters < 1 or not m.init_radius > 0:
            raise ValidationError("memory beta, tol, init_radius must be > 0 and max_iters ≥ 1")
        if m.init not in ("sphere", "repeated"):
            raise ValidationError(f"memory.init must be 'sphere' or 'repeated', got {m.init!r}")
        if not lo.tau > 0 or not lo.margin > 0 or lo.lambda_v < 0 or not lo.lambda_base > 1:
            raise ValidationError("need tau > 0, margin > 0, lambda_v ≥ 0, lambda_base > 1")
        if lo.variance_mode not in VARIANCE_MODES:
            raise ValidationError(f"loss.variance_mode must be one of {VARIANCE_MODES}")
        if len(lo.ratios) != s:
            raise ValidationError(f"loss.ratios needs {s} entries, got {lo.ratios}")
        self.scale_weights()
        for name, o in (("optim", op), ("stage2", st2)):
            if o.epochs < 0 or o.batch_size < 1:
                raise ValidationError(f"{name}: epochs must be ≥ 0 and batch_size ≥ 1")
            if not 0 <= o.lr_min <= o.lr_max or not 0 <= o.momentum < 1 or o.weight_decay < 0:
                raise ValidationError(f"{name}: need 0 ≤ lr_min ≤ lr_max, 0 ≤ momentum < 1")
        if st2.hidden < 1 or len(st2.grids) != s or any(g < 1 for g in st2.grids):
            raise ValidationError(f"stage2 needs hidden ≥ 1 and {s} pooling grids")
        if not 0 <= pr.gamma < 1:
            raise ValidationError(f"protocol.gamma must lie in [0, 1), got {pr.gamma}")
        if not pr.seeds:
            raise ValidationError("protocol.seeds must not be empty")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "ssad" and pr.gamma == 0:
            raise ValidationError("ssad mode needs gamma > 0; use one-class mode for gamma = 0")
        if self.data.source not in ("synthetic", "cifar"):
            raise ValidationError(f"data.source must be 'synthetic' or 'cifar'")
        if self.data.source == "cifar" and not self.data.cifar_files:
            raise ValidationError("data.source 'cifar' needs data.cifar_files")
        if self.use_projection_head:
            raise ValidationError("use_projection_head is reserved and must stay false")
        scales = self.active_scales
        if not scales or sorted(set(scales)) != scales or scales[-1] >= s or scales[0] < 0:
            raise ValidationError(f"scales must be increasing indices below {s}, got {self.scales}")
        return self

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).digest()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _build(cls, raw, "config").validate()

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"loss.lambda_v": 0})``."""
        raw = self.to_dict()
        for key, value in changes.items():
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ValidationError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(raw)


_CONFIG_TYPES = {
    "EncoderSpec": EncoderSpec,
    "StageSpec": StageSpec,
    "AugmentPolicy": AugmentPolicy,
    "SyntheticSpec": SyntheticSpec,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls, localns={**_CONFIG_TYPES, **globals()})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _coerce(hints[key], value, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ValidationError(f"{where}: expected a list")
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)] if args else value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{where}: expected a list")
        return tuple(value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected an object")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{where}: expected a string")
        return value
    return value
