"""Per-layer energy exporter for pretrained vision models."""

from .hooks import (
    DatasetError,
    TapError,
    TapSpec,
    export,
    extract_energy_matrix,
    leaf_module_names,
    list_images,
    read_taps_file,
    resolve_taps,
)
from .lire import write_lire

__version__ = "0.1.0"

__all__ = [
    "DatasetError",
    "TapError",
    "TapSpec",
    "export",
    "extract_energy_matrix",
    "leaf_module_names",
    "list_images",
    "read_taps_file",
    "resolve_taps",
    "write_lire",
]
