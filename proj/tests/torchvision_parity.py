#!/usr/bin/env python3
"""Compares archived torchvision backbones run in C++ against torch itself.

Usage: torchvision_parity.py <hlgfa_extract_features> <work_dir>
"""

import json
import os
import struct
import subprocess
import sys

import numpy as np
import torch
import torchvision
from PIL import Image

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "tools"))
import export_torchvision_backbone as exporter  # noqa: E402

MEAN = torch.tensor([0.485, 0.456, 0.406], dtype=torch.float64)[:, None, None]
STD = torch.tensor([0.229, 0.224, 0.225], dtype=torch.float64)[:, None, None]


def read_archive(path):
    data = open(path, "rb").read()
    n = struct.unpack("<Q", data[8:16])[0]
    index = json.loads(data[16:16 + n])
    payload = data[16 + n:]
    out = {}
    for name, rec in index.items():
        if name == "__metadata__":
            continue
        dtype = "<f8" if rec["dtype"] == "F64" else "<f4"
        raw = payload[rec["offset"]:rec["offset"] + rec["length"]]
        out[name] = np.frombuffer(raw, dtype).reshape(rec["shape"])
    return out


def randomized(arch, seed):
    torch.manual_seed(seed)
    model = getattr(torchvision.models, arch)(weights=None)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 2.0)
                m.weight.uniform_(0.5, 1.5)
                m.bias.uniform_(-0.2, 0.2)
    return model.eval()


def reference(model, image):
    x = torch.tensor(image, dtype=torch.float64).permute(2, 0, 1)[None] / 255.0
    x = (x - MEAN) / STD
    model = model.double()
    with torch.no_grad():
        h = model.maxpool(model.relu(model.bn1(model.conv1(x))))
        outs = []
        for layer in (model.layer1, model.layer2, model.layer3):
            h = layer(h)
            outs.append(h[0].numpy())
    return outs


def main():
    tool, work = sys.argv[1], sys.argv[2]
    os.makedirs(work, exist_ok=True)
    image = (np.random.default_rng(0).random((64, 64, 3)) * 255).astype(np.uint8)
    image_path = os.path.join(work, "probe.png")
    Image.fromarray(image).save(image_path)
    failures = 0
    for arch in ("resnet18", "resnet50"):
        model = randomized(arch, 1)
        archive = os.path.join(work, arch + ".hlgw")
        tensors = exporter.select(model.state_dict(), 3)
        exporter.write_archive(archive, tensors, {"source": arch})
        expected = reference(model, image)
        channels = ",".join(str(e.shape[0]) for e in expected)
        out = os.path.join(work, arch + "_features.hlgw")
        subprocess.run([tool, archive, arch, channels, image_path, out], check=True)
        got = read_archive(out)
        for s, ref in enumerate(expected):
            dev = float(np.abs(got[f"stage{s}"] - ref).max())
            ok = got[f"stage{s}"].shape == ref.shape and dev < 1e-9
            failures += 0 if ok else 1
            print(f"{arch} stage {s + 1} {ref.shape}: max deviation {dev:.2e} {'ok' if ok else 'FAIL'}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
