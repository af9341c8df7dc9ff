"""Modality and dataset descriptors, and their validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from ..geometry import DivisibilityError, LayoutError, SubPatchLayout, is_multiple, subpatch_layout, tile_pixels


class DatasetSpecError(ValueError):
    pass


class UnknownModalityError(DatasetSpecError):
    pass


class PatchSizeError(DatasetSpecError):
    pass


class SubPatchLayoutError(DatasetSpecError):
    pass


class BatchSizeError(DatasetSpecError):
    pass


class ChannelMaskError(DatasetSpecError):
    pass


class ModalitySpecError(DatasetSpecError):
    pass


ROLES = ("normal", "context")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    R_m: float
    T_range: tuple[int, int]
    C_m: int
    delta_m: int
    role: str = "normal"
    has_dates: bool = True

    def __post_init__(self):
        object.__setattr__(self, "T_range", tuple(int(t) for t in self.T_range))
        t_min, t_max = self.T_range
        if self.R_m <= 0:
            raise ModalitySpecError(f"{self.name}: R_m must be positive")
        if self.C_m < 1:
            raise ModalitySpecError(f"{self.name}: C_m must be >= 1")
        if t_min < 1 or t_max < t_min:
            raise ModalitySpecError(f"{self.name}: invalid T_range {self.T_range}")
        if self.delta_m < 1:
            raise ModalitySpecError(f"{self.name}: delta_m must be >= 1")
        if self.role not in ROLES:
            raise ModalitySpecError(f"{self.name}: role must be one of {ROLES}")

    @property
    def is_time_series(self) -> bool:
        return self.T_range[1] > 1

    @property
    def is_context(self) -> bool:
        return self.role == "context"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T_range"] = list(self.T_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModalitySpec:
        return cls(**{**d, "T_range": tuple(d["T_range"])})


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    S_d: float
    modalities: tuple[str, ...]
    B_d: int
    P_d: tuple[float, ...]
    num_tiles: int
    weight: float = 1.0
    channel_masks: Mapping[str, tuple[bool, ...]] = field(default_factory=dict)
    label_resolution: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "P_d", tuple(float(p) for p in self.P_d))
        object.__setattr__(
            self, "channel_masks", {k: tuple(bool(b) for b in v) for k, v in dict(self.channel_masks).items()}
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "S_d": self.S_d,
            "modalities": list(self.modalities),
            "B_d": self.B_d,
            "P_d": list(self.P_d),
            "num_tiles": self.num_tiles,
            "weight": self.weight,
            "channel_masks": {k: list(v) for k, v in self.channel_masks.items()},
            "label_resolution": self.label_resolution,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> DatasetSpec:
        return cls(**d)


@dataclass(frozen=True)
class ValidatedDataset:
    spec: DatasetSpec
    modalities: dict[str, ModalitySpec]
    layouts: dict[tuple[float, str], SubPatchLayout]

    @property
    def name(self) -> str:
        return self.spec.name

    def patch_modalities(self) -> list[str]:
        return [m for m in self.spec.modalities if not self.modalities[m].is_context]

    def context_modalities(self) -> list[str]:
        return [m for m in self.spec.modalities if self.modalities[m].is_context]

    def stored_channels(self, modality: str) -> int:
        mask = self.spec.channel_masks.get(modality)
        return self.modalities[modality].C_m if mask is None else sum(mask)

    def spatial_side(self, modality: str) -> int:
        if self.modalities[modality].is_context:
            return 1
        return tile_pixels(self.spec.S_d, self.modalities[modality].R_m)

    def label_resolution(self) -> float:
        if self.spec.label_resolution is not None:
            return self.spec.label_resolution
        return min(self.modalities[m].R_m for m in self.patch_modalities())


def validate_dataset_spec(spec: DatasetSpec, registry: Mapping[str, ModalitySpec]) -> ValidatedDataset:
    """Check every dataset invariant and attach the per-(P, modality) layouts."""
    missing = [m for m in spec.modalities if m not in registry]
    if missing:
        raise UnknownModalityError(f"{spec.name}: unknown modalities {missing}")
    if not spec.modalities:
        raise DatasetSpecError(f"{spec.name}: no modalities")
    if spec.B_d < 1:
        raise BatchSizeError(f"{spec.name}: B_d must be >= 1, got {spec.B_d}")
    if spec.num_tiles < 1:
        raise DatasetSpecError(f"{spec.name}: num_tiles must be >= 1")
    if spec.weight <= 0:
        raise DatasetSpecError(f"{spec.name}: sampling weight must be positive")
    if not spec.P_d:
        raise PatchSizeError(f"{spec.name}: empty patch-size set")
    mods = {m: registry[m] for m in spec.modalities}
    if all(mods[m].is_context for m in spec.modalities):
        raise DatasetSpecError(f"{spec.name}: needs at least one non-context modality")

    for name, mask in spec.channel_masks.items():
        if name not in mods:
            raise ChannelMaskError(f"{spec.name}: channel mask for absent modality {name!r}")
        if len(mask) != mods[name].C_m or not any(mask):
            raise ChannelMaskError(
                f"{spec.name}/{name}: mask must have {mods[name].C_m} entries with at least one present"
            )

    layouts: dict[tuple[float, str], SubPatchLayout] = {}
    for P in spec.P_d:
        if not is_multiple(spec.S_d, P):
            raise PatchSizeError(str(DivisibilityError(spec.S_d, P)) + f" in dataset {spec.name}")
        for m, ms in mods.items():
            if ms.is_context:
                continue
            try:
                tile_pixels(spec.S_d, ms.R_m)
                layouts[(P, m)] = subpatch_layout(P, ms.R_m, ms.delta_m)
            except LayoutError as exc:
                raise SubPatchLayoutError(f"{spec.name}, P={P}, modality {m}: {exc}") from None
    if spec.label_resolution is not None and not is_multiple(spec.S_d, spec.label_resolution):
        raise DatasetSpecError(f"{spec.name}: label resolution must divide S_d")
    return ValidatedDataset(spec, mods, layouts)


def registry_from(specs: Sequence[ModalitySpec]) -> dict[str, ModalitySpec]:
    reg: dict[str, ModalitySpec] = {}
    for s in specs:
        if s.name in reg:
            raise ModalitySpecError(f"duplicate modality {s.name!r}")
        reg[s.name] = s
    return reg
