"""Forward-hook energy extraction from vision models.

For every tapped module the hook flattens the per-sample output to one
vector and records its free energy -logsumexp(a) in double precision
(t = 1). Only those scalars cross the process boundary: an N x (taps+1)
matrix instead of the full hidden state, with the logit energy always in
the last column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class TapError(ValueError):
    """A tap path does not resolve to a module on the loaded model."""


class DatasetError(ValueError):
    """The dataset directory yields no images."""


@dataclass
class TapSpec:
    """Which modules to tap and how to present images to the model."""

    model: str
    taps: list[str] = field(default_factory=lambda: ["*"])
    image_size: int = 224
    normalize: str = "none"  # none | imagenet

    def __post_init__(self):
        if not self.taps:
            raise TapError("tap list must be nonempty")
        if self.normalize not in ("none", "imagenet"):
            raise ValueError(f"normalize must be 'none' or 'imagenet', got {self.normalize}")


def leaf_module_names(model: torch.nn.Module) -> list[str]:
    """Named modules without children, in registration order."""
    return [name for name, m in model.named_modules() if name and not list(m.children())]


def resolve_taps(model: torch.nn.Module, taps: list[str]) -> list[str]:
    """Expand '*' to every named leaf module; validate explicit paths."""
    if taps == ["*"]:
        names = leaf_module_names(model)
        if not names:
            raise TapError("model exposes no named leaf modules")
        return names
    lookup = dict(model.named_modules())
    missing = [t for t in taps if t not in lookup or t == ""]
    if missing:
        raise TapError(f"tap paths not found on the model: {missing}")
    return list(taps)


def read_taps_file(path) -> list[str]:
    taps = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            taps.append(line)
    if not taps:
        raise TapError(f"taps file {path} lists no modules")
    return taps


def list_images(dataset_dir) -> tuple[list[Path], np.ndarray | None]:
    """Dataset layout: id/ and ood/ subdirectories set the dist labels;
    a flat directory of images exports without labels. Row order follows
    the sorted file listing."""
    root = Path(dataset_dir)
    id_dir, ood_dir = root / "id", root / "ood"

    def images_under(d: Path) -> list[Path]:
        return sorted(
            p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )

    if id_dir.is_dir() or ood_dir.is_dir():
        id_files = images_under(id_dir) if id_dir.is_dir() else []
        ood_files = images_under(ood_dir) if ood_dir.is_dir() else []
        files = id_files + ood_files
        labels = np.array([0] * len(id_files) + [1] * len(ood_files), dtype=np.uint8)
    else:
        files = images_under(root)
        labels = None
    if not files:
        raise DatasetError(f"no images found under {root}")
    return files, labels


def load_image_batch(paths: list[Path], spec: TapSpec) -> torch.Tensor:
    from PIL import Image

    rows = []
    for p in paths:
        with Image.open(p) as img:
            img = img.convert("RGB").resize((spec.image_size, spec.image_size))
        arr = np.asarray(img, dtype=np.float32) / 255.0
        rows.append(arr.transpose(2, 0, 1))
    batch = torch.from_numpy(np.stack(rows))
    if spec.normalize == "imagenet":
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        batch = (batch - mean) / std
    return batch


def _flat_energy(out: torch.Tensor) -> torch.Tensor:
    flat = out.detach().to(torch.float64).reshape(out.shape[0], -1)
    return -torch.logsumexp(flat, dim=1)


def extract_energy_matrix(
    model: torch.nn.Module,
    batches,
    tap_names: list[str],
    device: str = "cpu",
) -> np.ndarray:
    """Run the model over batches and collect per-tap energies plus the
    logit energy as the last column. Deterministic in eval mode."""
    model = model.to(device).eval()
    lookup = dict(model.named_modules())
    collected: dict[str, list[torch.Tensor]] = {name: [] for name in tap_names}
    # a module reused inside one forward (e.g. a shared ReLU) fires its hook
    # several times; the tap records the final invocation of each pass
    pending: dict[str, torch.Tensor] = {}
    handles = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            if not torch.is_tensor(output):
                raise TapError(f"tap {name} returned a non-tensor output")
            pending[name] = _flat_energy(output).cpu()

        return hook

    for name in tap_names:
        handles.append(lookup[name].register_forward_hook(make_hook(name)))
    logit_energies = []
    try:
        with torch.no_grad():
            for batch in batches:
                pending.clear()
                logits = model(batch.to(device))
                missing = [n for n in tap_names if n not in pending]
                if missing:
                    raise TapError(f"taps {missing} never fired during the forward pass")
                for name in tap_names:
                    collected[name].append(pending[name])
                logit_energies.append(_flat_energy(logits).cpu())
    finally:
        for h in handles:
            h.remove()

    cols = [torch.cat(collected[name]).numpy() for name in tap_names]
    cols.append(torch.cat(logit_energies).numpy())
    return np.column_stack(cols)


def export(
    model: torch.nn.Module,
    dataset_dir,
    spec: TapSpec,
    out_path,
    batch_size: int = 32,
    device: str = "cpu",
) -> tuple[int, int]:
    """Export one LIRE file: a row per image, a column per tap plus logits.

    Returns (n_rows, n_columns). The file is written atomically at the end.
    """
    from .lire import write_lire

    tap_names = resolve_taps(model, spec.taps)
    files, dist_labels = list_images(dataset_dir)

    def batches():
        for start in range(0, len(files), batch_size):
            yield load_image_batch(files[start : start + batch_size], spec)

    values = extract_energy_matrix(model, batches(), tap_names, device=device)
    write_lire(values, out_path, dist_labels=dist_labels)
    return values.shape
