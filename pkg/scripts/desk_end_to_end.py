"""Desk-scale disk reconstruction: synthesize views, train, extract, score.

    UDFVR_THREADS=8 python3 scripts/desk_end_to_end.py --work desk_run --seeds 0 1 2
"""

import argparse
import dataclasses
import json
import logging
import os
from pathlib import Path

import torch

from udfvr.desk import desk_config, run_end_to_end


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="desk_run")
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--scene", default="disk")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if os.environ.get("UDFVR_THREADS"):
        torch.set_num_threads(int(os.environ["UDFVR_THREADS"]))

    def progress(rec, elapsed):
        logging.info("it %6d  L_c %.4f  L_e %.4f  L_m %.4f  r %.3g  s %.3g  (%.0fs)", rec["iteration"],
                     rec["L_c"], rec["L_e"], rec["L_m"], rec["r"], rec["s"], elapsed)

    results = {}
    for seed in args.seeds:
        cfg = desk_config(iterations=args.iterations, seed=seed)
        res = run_end_to_end(Path(args.work) / f"seed{seed}", args.scene, cfg=cfg, progress=progress)
        results[seed] = dataclasses.asdict(res)
        print(f"seed {seed}: Chamfer {res.chamfer:.3e}, {res.n_points} points, {res.seconds / 60:.1f} min")
    Path(args.work).mkdir(parents=True, exist_ok=True)
    (Path(args.work) / "results.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
