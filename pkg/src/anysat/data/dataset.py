"""Dataset directories: ``manifest.json`` plus one file per tile."""

from __future__ import annotations

import json
from pathlib import Path

from .specs import DatasetSpec, ModalitySpec, ValidatedDataset, registry_from, validate_dataset_spec
from .synth import SyntheticConfig
from .tilefile import TileSample, load_tile


class DatasetDirError(OSError):
    pass


class TileDataset:
    """A validated dataset whose tiles are read on first access and cached."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.is_file():
            raise DatasetDirError(f"{self.root}: no manifest.json")
        self.manifest = json.loads(manifest_path.read_text())
        registry = registry_from([ModalitySpec.from_dict(m) for m in self.manifest["modalities"]])
        self.info: ValidatedDataset = validate_dataset_spec(DatasetSpec.from_dict(self.manifest["spec"]), registry)
        self.files = list(self.manifest["tiles"])
        if len(self.files) != self.info.spec.num_tiles:
            raise DatasetDirError(f"{self.root}: manifest lists {len(self.files)} tiles, spec says {self.info.spec.num_tiles}")
        synth = self.manifest.get("synthetic")
        self.synthetic = SyntheticConfig(**synth) if synth else None
        self.num_classes: int | None = self.manifest.get("num_classes")
        self._cache: dict[int, TileSample] = {}

    @property
    def name(self) -> str:
        return self.info.name

    @property
    def spec(self) -> DatasetSpec:
        return self.info.spec

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, tile_id: int) -> TileSample:
        if tile_id not in self._cache:
            self._cache[tile_id] = load_tile(self.root / self.files[tile_id], self.info)
        return self._cache[tile_id]

    def __iter__(self):
        return (self[i] for i in range(len(self)))


class MemoryDataset:
    """Same interface as :class:`TileDataset`, holding already generated tiles."""

    def __init__(self, info: ValidatedDataset, tiles: list[TileSample], num_classes: int | None = None, synthetic=None):
        if len(tiles) != info.spec.num_tiles:
            raise DatasetDirError(f"{info.name}: {len(tiles)} tiles given, spec says {info.spec.num_tiles}")
        self.info = info
        self.tiles = list(tiles)
        self.num_classes = num_classes
        self.synthetic = synthetic

    @classmethod
    def generate(cls, info: ValidatedDataset, cfg: SyntheticConfig) -> MemoryDataset:
        from .synth import generate_tile, num_classes

        tiles = [generate_tile(info, cfg, i) for i in range(info.spec.num_tiles)]
        return cls(info, tiles, num_classes(cfg), cfg)

    @property
    def name(self) -> str:
        return self.info.name

    @property
    def spec(self) -> DatasetSpec:
        return self.info.spec

    def __len__(self) -> int:
        return len(self.tiles)

    def __getitem__(self, tile_id: int) -> TileSample:
        return self.tiles[tile_id]

    def __iter__(self):
        return iter(self.tiles)
