"""generate -> convert -> stats -> eval --self over procedural scenes.

Writes scenes/, captions.jsonl, samples.jsonl, stats.json and eval.json into
OUT and prints the stage timings.
"""

import argparse
import sys
import time
from pathlib import Path

from grounded3d.cli import main as cli
from grounded3d.scene import save_scene
from grounded3d.synthetic import make_scenes


def run(out: Path, n_scenes: int, seed: int, extra: list[str]) -> int:
    scenes = out / "scenes"
    scenes.mkdir(parents=True, exist_ok=True)
    for s in make_scenes(n_scenes, seed):
        save_scene(s, scenes / f"{s.scene_id}.json")
    stages = [
        ["generate", "--scenes", str(scenes), "--seed", str(seed), "-o", str(out / "captions.jsonl"), *extra],
        ["convert", str(out / "captions.jsonl"), "--scenes", str(scenes), "--seed", str(seed),
         "-o", str(out / "samples.jsonl")],
        ["stats", str(out / "captions.jsonl"), "-o", str(out / "stats.json")],
        ["eval", "--self", "--scenes", str(scenes), "--samples", str(out / "samples.jsonl"),
         "-o", str(out / "eval.json")],
    ]
    for argv in stages:
        t0 = time.perf_counter()
        code = cli(argv)
        print(f"{argv[0]:<9} {time.perf_counter() - t0:6.2f}s  exit {code}")
        if code:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("-n", type=int, default=50, help="number of scenes")
    ap.add_argument("--seed", type=int, default=0)
    args, extra = ap.parse_known_args()
    sys.exit(run(args.out, args.n, args.seed, extra))
