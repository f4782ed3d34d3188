#!/usr/bin/env python3
"""Convert an OpenAI CLIP checkpoint (ViT-B-32.pt) to the safetensors layout dpclip loads.

Vision tensors keep their OpenAI names ("visual.*"); text tensors gain a "text." prefix.
Optionally decompresses the BPE merges file next to the weights.

    python3 tools/convert_openai_clip.py ViT-B-32.pt weights/clip_vitb32.safetensors \
        --bpe bpe_simple_vocab_16e6.txt.gz --bpe-out weights/bpe_simple_vocab_16e6.txt
"""

import argparse
import gzip
import json
import shutil
import struct
from pathlib import Path

import numpy as np
import torch

TEXT_KEYS = ("token_embedding.", "positional_embedding", "transformer.", "ln_final.", "text_projection")
SKIP_KEYS = ("logit_scale", "input_resolution", "context_length", "vocab_size")


def load_state_dict(path):
    try:
        model = torch.jit.load(str(path), map_location="cpu")
        return model.state_dict()
    except RuntimeError:
        obj = torch.load(str(path), map_location="cpu")
        return obj.get("state_dict", obj) if isinstance(obj, dict) else obj.state_dict()


def rename(key):
    if key.startswith("visual."):
        return key
    if key.startswith(TEXT_KEYS):
        return "text." + key
    return None


def write_safetensors(tensors, path, metadata):
    header = {"__metadata__": metadata}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(blob)]}
        offset += len(blob)
        blobs.append(blob)
    raw = json.dumps(header, separators=(",", ":")).encode()
    raw += b" " * ((8 - len(raw) % 8) % 8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--bpe", type=Path, help="bpe_simple_vocab_16e6.txt.gz")
    ap.add_argument("--bpe-out", type=Path, help="where to write the decompressed merges")
    args = ap.parse_args()

    state = load_state_dict(args.checkpoint)
    tensors = {}
    for key, value in state.items():
        if key in SKIP_KEYS:
            continue
        name = rename(key)
        if name is None:
            print(f"skipping {key}")
            continue
        tensors[name] = value.detach().float().numpy()
    write_safetensors(tensors, args.out, {"source": args.checkpoint.name})
    print(f"wrote {len(tensors)} tensors to {args.out}")

    if args.bpe:
        out = args.bpe_out or args.out.parent / args.bpe.name.removesuffix(".gz")
        opener = gzip.open if args.bpe.suffix == ".gz" else open
        with opener(args.bpe, "rb") as src, open(out, "wb") as dst:
            shutil.copyfileobj(src, dst)
        print(f"wrote {out}")


if __name__ == "__main__":
    main()
