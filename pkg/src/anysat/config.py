"""Run configuration: a strict JSON schema, defaults, and a content hash."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data.specs import DatasetSpec, ModalitySpec, registry_from
from .data.synth import SyntheticConfig
from .heads import TaskConfig
from .model import ModelConfig
from .ssl.masking import MaskConfig
from .ssl.pretrain import PretrainConfig

SEED_ENV = "ANYSAT_SEED"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    E: int = Field(64, gt=0)
    heads: int = Field(4, gt=0)
    encoder_blocks: int = Field(3, ge=1)
    combiner_blocks: int = Field(3, ge=1)
    predictor_blocks: int = Field(3, ge=1)
    ltae_heads: int = Field(4, ge=1)
    ltae_dk: int = Field(8, ge=1)
    mlp_ratio: float = Field(2.0, gt=0)


class ModalitySection(_Strict):
    name: str
    R_m: float = Field(gt=0)
    T_range: tuple[int, int]
    C_m: int = Field(ge=1)
    delta_m: int = Field(ge=1)
    role: Literal["normal", "context"] = "normal"
    has_dates: bool = True


class SyntheticSection(_Strict):
    K: int = 4
    noise_std: float = 0.1
    mixing_seed: int = 1234
    temporal_amplitude: float = 0.5
    nuisance_std: float = 0.0
    label_mode: Literal["semantic", "change"] = "semantic"
    field: Literal["iid", "voronoi"] = "iid"
    n_regions: int = 4

    @field_validator("K")
    @classmethod
    def _k(cls, v):
        if v < 2:
            raise ValueError("K must be >= 2")
        return v


class DatasetSection(_Strict):
    name: str
    S_d: float = Field(gt=0)
    modalities: list[str]
    B_d: int = Field(ge=1)
    P_d: list[float]
    num_tiles: int = Field(ge=1)
    weight: float = Field(1.0, gt=0)
    channel_masks: dict[str, list[bool]] = Field(default_factory=dict)
    label_resolution: Optional[float] = None
    synthetic: Optional[SyntheticSection] = None


class MaskSection(_Strict):
    n_rects: int = 5
    area: tuple[float, float] = (0.15, 0.20)
    aspect: tuple[float, float] = (0.75, 1.5)
    modality_mask_rate: float = 0.5
    max_resample: int = 20


class SslSection(_Strict):
    tau: float = Field(0.1, gt=0)
    ema_decay: float = Field(0.996, gt=0, le=1)
    lambda_con: float = Field(1.0, ge=0)
    mask: MaskSection = MaskSection()
    random_drop: bool = False
    no_contrastive: bool = False


class OptimSection(_Strict):
    lr: float = Field(5e-5, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    schedule: Literal["warmup-cosine", "reduce-on-plateau", "constant"] = "reduce-on-plateau"
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    eval_every: int = 10
    warmup_frac: float = 0.05
    min_lr: float = 1e-6
    max_grad_norm: Optional[float] = None


class DataSection(_Strict):
    seed: int = 0
    modalities: list[ModalitySection]
    datasets: list[DatasetSection]


class TaskSection(_Strict):
    task: Literal["classify", "segment", "changedet"] = "segment"
    mode: Literal["scratch", "finetune", "probe"] = "probe"
    N: Optional[int] = None  # default: the dataset's class count
    multilabel: bool = False
    m_ref: Optional[str] = None
    P: Optional[float] = None
    head: Optional[Literal["linear", "mlp"]] = None
    naive_semseg: bool = False
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: Optional[Literal["warmup-cosine", "reduce-on-plateau", "constant"]] = None
    test_fraction: float = 0.2


class RunConfig(_Strict):
    model: ModelSection = ModelSection()
    ssl: SslSection = SslSection()
    optim: OptimSection = OptimSection()
    data: DataSection
    task: TaskSection = TaskSection()

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    # ---- conversions to the library's own dataclasses

    def registry(self) -> dict[str, ModalitySpec]:
        return registry_from([ModalitySpec(**m.model_dump()) for m in self.data.modalities])

    def dataset_spec(self, name: str | None = None) -> DatasetSpec:
        sec = self.dataset_section(name)
        d = sec.model_dump(exclude={"synthetic"})
        return DatasetSpec(**d)

    def dataset_section(self, name: str | None = None) -> DatasetSection:
        if name is None:
            return self.data.datasets[0]
        for d in self.data.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"no dataset named {name!r} in the config")

    def synthetic(self, name: str | None = None) -> SyntheticConfig:
        sec = self.dataset_section(name).synthetic or SyntheticSection()
        return SyntheticConfig(seed=self.data.seed, **sec.model_dump())

    def network_config(self) -> ModelConfig:
        return ModelConfig(**self.model.model_dump())

    def pretrain_config(self, random_drop: bool | None = None, no_contrastive: bool | None = None) -> PretrainConfig:
        m = self.ssl.mask
        mask = MaskConfig(m.n_rects, tuple(m.area), tuple(m.aspect), m.modality_mask_rate, m.max_resample)
        o = self.optim
        return PretrainConfig(
            tau=self.ssl.tau,
            ema_decay=self.ssl.ema_decay,
            lambda_con=self.ssl.lambda_con,
            lr=o.lr,
            weight_decay=o.weight_decay,
            schedule=o.schedule,
            plateau_patience=o.plateau_patience,
            plateau_factor=o.plateau_factor,
            eval_every=o.eval_every,
            warmup_frac=o.warmup_frac,
            min_lr=o.min_lr,
            mask=mask,
            no_contrastive=self.ssl.no_contrastive if no_contrastive is None else no_contrastive,
            random_drop=self.ssl.random_drop if random_drop is None else random_drop,
            max_grad_norm=o.max_grad_norm,
            seed=self.data.seed,
        )

    def task_config(self, num_classes: int | None = None, **overrides) -> TaskConfig:
        d = self.task.model_dump()
        d.update({k: v for k, v in overrides.items() if v is not None})
        if d["N"] is None:
            d["N"] = 2 if d["task"] == "changedet" else num_classes
        if d["N"] is None:
            raise ConfigError("task.N not set and the dataset does not declare a class count")
        return TaskConfig(seed=self.data.seed, **d)


def _format(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(doc: dict, env: dict | None = None) -> RunConfig:
    """Validate a config document; ``ANYSAT_SEED`` in ``env`` overrides ``data.seed``."""
    env = os.environ if env is None else env
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    seed = env.get(SEED_ENV)
    if seed is not None:
        try:
            seed_val = int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"seed": seed_val})})
    return cfg


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc, env)
