"""Write N procedural scenes as JSON files into a directory."""

import argparse
from pathlib import Path

from grounded3d.scene import save_scene
from grounded3d.synthetic import make_scenes


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("-n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for scene in make_scenes(args.n, args.seed):
        save_scene(scene, args.out / f"{scene.scene_id}.json")
    print(f"wrote {args.n} scenes to {args.out}")


if __name__ == "__main__":
    main()
