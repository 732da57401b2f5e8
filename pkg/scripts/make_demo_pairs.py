"""Render a few aligned visible/thermal scene pairs as PNGs.

The output directory can be fed to ``rgbtreg synth --source`` to build a
misalignment dataset from fixed imagery instead of procedural scenes.
"""

import argparse
from pathlib import Path

from rgbtreg.fileio import write_png
from rgbtreg.synth import make_aligned_scene


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True, help="directory for the PNG pairs")
    ap.add_argument("--count", type=int, default=4, help="number of scene pairs")
    ap.add_argument("--size", default="128x160", help="HxW of each scene")
    ap.add_argument("--seed", type=int, default=0, help="first scene seed")
    args = ap.parse_args()

    h, w = (int(v) for v in args.size.lower().split("x"))
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        visible, thermal = make_aligned_scene(args.seed + i, (h, w))
        write_png(args.out / f"scene{i:02d}_visible.png", visible.data)
        write_png(args.out / f"scene{i:02d}_thermal.png", thermal.data)
        print(f"scene{i:02d}: {h}x{w} seed {args.seed + i}")
    print(f"wrote {args.count} aligned pairs to {args.out}")


if __name__ == "__main__":
    main()
