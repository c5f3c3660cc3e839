#!/usr/bin/env python3
"""
Print the median log perplexity table of a finished run.

Usage:
    uv run scripts/summarize_run.py --run runs/standard-0123456789ab
"""
from __future__ import annotations

import argparse
from pathlib import Path

from mixedprefix.utils.files import read_json


def main() -> None:
    parser = argparse.ArgumentParser(description="Summarize metrics.json of a mixedprefix run.")
    parser.add_argument("--run", required=True, help="Run directory containing metrics.json")
    args = parser.parse_args()

    metrics_path = Path(args.run) / "metrics.json"
    if not metrics_path.exists():
        raise SystemExit(f"No metrics.json in {args.run}")
    metrics = read_json(metrics_path)
    if metrics["status"] != "ok":
        print(f"⚠️ Run failed at stage {metrics['failure']['stage']}: {metrics['failure']['message']}")

    print(f"config {metrics['config']['name']} ({metrics['config_hash'][:12]}), seeds {metrics['seeds']}")
    for partition, block in metrics["summary"].items():
        print(f"\n[{partition}]")
        for strategy, median in block["median"].items():
            wins = block["met_wins"].get(strategy)
            tally = f"  met wins {wins['wins']}/{wins['seeds']}" if wins else ""
            print(f"  {strategy:<24} {median:8.4f}{tally}")


if __name__ == "__main__":
    main()
