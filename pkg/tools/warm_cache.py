"""Precompute the benchmark run cache used by the test suite.

The full grid takes a few hours on a laptop CPU; interrupting and
restarting is safe because finished runs are skipped.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from vflsim.config import parse_config
from vflsim.experiment import cached_run, run_cache_key
from vflsim.presets import benchmark_suite


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--cache-dir",
        default=str(Path(__file__).resolve().parent.parent / ".run_cache"),
    )
    parser.add_argument(
        "--max-runs", type=int, default=None,
        help="stop after this many cache misses (for time-boxed sessions)",
    )
    args = parser.parse_args(argv)
    cache = Path(args.cache_dir)
    suite = benchmark_suite()
    fresh = 0
    for i, (label, doc) in enumerate(suite, 1):
        cfg = parse_config(doc)
        hit = (cache / (run_cache_key(cfg) + ".json")).exists()
        if not hit and args.max_runs is not None and fresh >= args.max_runs:
            print(f"[{i}/{len(suite)}] {label}: deferred", flush=True)
            continue
        if not hit:
            print(f"[{i}/{len(suite)}] {label}: running...", flush=True)
        t0 = time.monotonic()
        metrics = cached_run(cfg, cache)
        dt = time.monotonic() - t0
        state = "cached" if hit else f"{dt / 60:.1f} min"
        fresh += 0 if hit else 1
        print(
            f"[{i}/{len(suite)}] {label}: acc={metrics.accuracy:.2f} "
            f"status={metrics.status} ({state})",
            flush=True,
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
