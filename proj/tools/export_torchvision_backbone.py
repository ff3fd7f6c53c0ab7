#!/usr/bin/env python3
"""Export a torchvision ResNet state dict to an HLGW weights archive.

The archive keeps conv1/bn1 and layer1..layerN (the fc head, layers past
--layers and num_batches_tracked counters are dropped). Batch-norm statistics
are stored as-is; the loader folds them into the preceding convolutions.

Example:
    python tools/export_torchvision_backbone.py --arch wide_resnet50_2 \
        --weights IMAGENET1K_V1 --out wrn50.hlgw
"""

import argparse
import json
import struct
import sys

import numpy as np

MAGIC = b"HLGW"
VERSION = 1


def write_archive(path, tensors, metadata):
    index = {}
    payload = bytearray()
    for name, array in tensors:
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        index[name] = {
            "dtype": "F32",
            "shape": list(array.shape),
            "offset": len(payload),
            "length": len(data),
        }
        payload += data
    index["__metadata__"] = metadata
    index_text = json.dumps(index, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(index_text)))
        f.write(index_text)
        f.write(payload)


def select(state_dict, layers):
    keep = ["conv1.", "bn1."] + [f"layer{i}." for i in range(1, layers + 1)]
    out = []
    for name, value in state_dict.items():
        if name.endswith("num_batches_tracked"):
            continue
        if any(name.startswith(prefix) for prefix in keep):
            out.append((name, value.detach().cpu().numpy()))
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--arch", default="resnet18", help="torchvision model constructor name")
    parser.add_argument("--weights", default="DEFAULT",
                        help="torchvision weights enum name, or 'none' for random init")
    parser.add_argument("--state-dict", help="load a local .pth state dict instead of torchvision weights")
    parser.add_argument("--layers", type=int, default=3, choices=[1, 2, 3, 4],
                        help="keep layer1..layerN (3 for stage strides 4, 8, 16)")
    parser.add_argument("--seed", type=int, default=0, help="torch seed for random init")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    import torch
    import torchvision

    torch.manual_seed(args.seed)
    constructor = getattr(torchvision.models, args.arch)
    if args.state_dict:
        model = constructor(weights=None)
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
    elif args.weights.lower() == "none":
        model = constructor(weights=None)
    else:
        model = constructor(weights=args.weights)
    model.eval()

    tensors = select(model.state_dict(), args.layers)
    metadata = {"source": f"torchvision.models.{args.arch}", "weights": args.weights, "layers": str(args.layers)}
    write_archive(args.out, tensors, metadata)
    channels = []
    for i in range(1, args.layers + 1):
        convs = [a for n, a in tensors if n.startswith(f"layer{i}.") and ".conv" in n]
        channels.append(convs[-1].shape[0])
    print(f"wrote {len(tensors)} tensors to {args.out}; stage_channels = {', '.join(map(str, channels))}",
          file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
