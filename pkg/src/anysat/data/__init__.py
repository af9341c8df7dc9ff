"""Modality/dataset descriptors, synthetic tiles, tile files and sampling."""

from .dataset import DatasetDirError, MemoryDataset, TileDataset
from .padding import ChannelPadError, pad_channels
from .sampler import SamplerError, StepDraw, sample_step
from .specs import (
    BatchSizeError,
    ChannelMaskError,
    DatasetSpec,
    DatasetSpecError,
    ModalitySpec,
    ModalitySpecError,
    PatchSizeError,
    SubPatchLayoutError,
    UnknownModalityError,
    ValidatedDataset,
    registry_from,
    validate_dataset_spec,
)
from .synth import SyntheticConfig, SyntheticConfigError, directory_checksum, generate_tile, num_classes, synth_generate
from .tilefile import (
    BadMagicError,
    CorruptHeaderError,
    TileFormatError,
    TileLabels,
    TileSample,
    TileShapeError,
    load_tile,
    store_tile,
)
