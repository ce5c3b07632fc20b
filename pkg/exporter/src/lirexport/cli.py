"""lir-export: dump per-layer energies of a vision model to a LIRE file.

Example:
    lir-export --model resnet18 --taps taps.txt --data ./images --out run.lire

The taps file lists one module path per line ('#' comments allowed); a
single '*' line taps every named leaf module. The dataset directory uses
id/ and ood/ subdirectories to set distribution labels, or a flat layout
for unlabeled export.
"""

from __future__ import annotations

import argparse
import sys

import torch

from .hooks import DatasetError, TapError, TapSpec, export, read_taps_file


def load_model(name: str, checkpoint: str | None, num_classes: int | None, pretrained: bool):
    import torchvision.models

    factory = getattr(torchvision.models, name, None)
    if factory is None:
        raise ValueError(f"unknown torchvision model {name!r}")
    kwargs = {}
    if num_classes is not None:
        kwargs["num_classes"] = num_classes
    model = factory(weights="DEFAULT" if pretrained else None, **kwargs)
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state)
    return model


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lir-export",
        description="Extract per-layer energies from a vision model into a LIRE file.",
    )
    p.add_argument("--model", required=True, help="torchvision model name, e.g. resnet18")
    p.add_argument("--taps", required=True, help="file listing module paths to tap ('*' = all leaves)")
    p.add_argument("--data", required=True, help="image directory (id/ and ood/ subdirs, or flat)")
    p.add_argument("--out", required=True, help="output LIRE file")
    p.add_argument("--checkpoint", default=None, help="state-dict file to load into the model")
    p.add_argument("--num-classes", type=int, default=None, help="classifier head size")
    p.add_argument("--pretrained", action="store_true", help="load torchvision default weights")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--normalize", choices=("none", "imagenet"), default="none")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model, args.checkpoint, args.num_classes, args.pretrained)
        spec = TapSpec(
            model=args.model,
            taps=read_taps_file(args.taps),
            image_size=args.image_size,
            normalize=args.normalize,
        )
        n, l = export(
            model, args.data, spec, args.out, batch_size=args.batch_size, device=args.device
        )
    except (TapError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {n} rows x {l} columns to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
