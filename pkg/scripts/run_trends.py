"""Run every cell the trend criteria compare and write a report.

    python3 scripts/run_trends.py --out runs/trends [--seeds 0 1 2]
"""
import argparse
import json
import logging
import time

from cs3d.experiments import Cell, Runner, benchmark_configs, write_report


def trend_cells(seed: int) -> list[Cell]:
    cells = [Cell("baseline-no-onehot", seed), Cell("boxpc-r-p", seed),
             Cell("r", seed, reproj_scale=1.0), Cell("r", seed, reproj_scale=1.5),
             Cell("boxpc", seed), Cell("boxpc", seed, encoder="independent"), Cell("boxpc-r", seed)]
    for f in (0.0, 0.5, 1.0):
        cells += [Cell("baseline", seed, label_fraction=f), Cell("boxpc-r-p", seed, label_fraction=f)]
    return cells


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    data, base = benchmark_configs()
    runner = Runner(f"{args.out}/work", data, base)
    t0 = time.perf_counter()
    for seed in args.seeds:
        for cell in trend_cells(seed):
            res = runner.run(cell)
            aps = json.dumps({k: round(v, 3) for k, v in res.ap.items()})
            print(f"{time.perf_counter() - t0:6.0f}s {cell.name:55s} {res.status} mAP {res.mean_ap:.3f} {aps}",
                  flush=True)
    for key, rep in runner.pretrain_reports.items():
        print("boxpc", key, f"auc {rep.auc:.3f}", f"{rep.seconds:.0f}s")
    paths = write_report(list(runner.results.values()), args.out)
    print("report:", paths["csv"])


if __name__ == "__main__":
    main()
