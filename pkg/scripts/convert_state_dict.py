#!/usr/bin/env python3
"""Convert a PyTorch ``.pth`` state dict into the weights.bin + manifest.json layout.

    python scripts/convert_state_dict.py senet50_vggface2.pth weights/vggface2 --strip-prefix module.
"""

import argparse

import torch

from multires_fer.model import write_tensors


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help=".pth/.pt file holding a state dict (or {'state_dict': ...})")
    ap.add_argument("out_dir")
    ap.add_argument("--strip-prefix", action="append", default=[], help="remove this key prefix (repeatable)")
    args = ap.parse_args()

    state = torch.load(args.source, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    tensors = {}
    for name, t in state.items():
        for prefix in args.strip_prefix:
            if name.startswith(prefix):
                name = name[len(prefix):]
        tensors[name] = t.float() if t.is_floating_point() else t.long()
    write_tensors(tensors, args.out_dir)
    print(f"wrote {len(tensors)} tensors to {args.out_dir}")


if __name__ == "__main__":
    main()
