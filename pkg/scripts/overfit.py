"""Train the default model on the synthetic benchmark and report held-out AP.

    python3 scripts/overfit.py --iterations 5000 --out runs/overfit
"""

import argparse
import json
import time
from pathlib import Path

from svis import config as C
from svis.data import make_benchmark
from svis.frame import save_checkpoint
from svis.inference import evaluate_clips
from svis.train import train

from recipe import BASE, BENCHMARK


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = ap.parse_args()

    cfg = C.apply_overrides(BASE.replace(iterations=args.iterations), args.overrides)
    clips = make_benchmark(**BENCHMARK)
    args.out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, args.out / "config.toml")

    start = time.perf_counter()
    with open(args.out / "metrics.jsonl", "w") as log:
        def progress(it, rec):
            if it % 250 == 0:
                print(f"iter {it:5d}  loss {rec['loss']:.3f}  {time.perf_counter() - start:6.0f}s", flush=True)
        params = train(cfg, clips, log=log, on_step=progress)
    minutes = (time.perf_counter() - start) / 60
    save_checkpoint(args.out / "model.ckpt", params)

    rows = {}
    for split in ("train", "test"):
        report, switches = evaluate_clips([c for c in clips if c.split == split], params, cfg)
        rows[split] = {"ap": report.ap, "ap50": report.ap50, "ap75": report.ap75,
                       "ar1": report.ar1, "ar10": report.ar10, "id_switches": switches}
        print(f"{split:5s} {report.header()}\n      {report.row()}   id switches {switches}")
    rows["train_minutes"] = minutes
    (args.out / "report.json").write_text(json.dumps(rows, indent=1))
    print(f"training took {minutes:.1f} min")


if __name__ == "__main__":
    main()
