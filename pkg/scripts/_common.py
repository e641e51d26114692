"""Argument handling shared by the experiment scripts."""

import argparse
import logging

from diffairec.config import load_config
from diffairec.experiments import median_table
from diffairec.metrics import MetricsReport, format_table


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key = value run configuration")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return load_config(args.config, args.overrides)


def print_results(results, title):
    rows = [("run", *MetricsReport.KEYS)]
    for name, reps in results.items():
        for seed, r in enumerate(reps):
            rows.append((f"{name} seed {seed}", *(f"{getattr(r, k):.5f}" for k in MetricsReport.KEYS)))
    for name, med in median_table(results):
        rows.append((f"{name} median", *(f"{med[k]:.5f}" for k in MetricsReport.KEYS)))
    print(format_table(rows, title), end="")
