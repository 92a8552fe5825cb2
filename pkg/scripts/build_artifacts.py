"""Train and cache every artifact the acceptance suite uses, then print probe results.

Usage: python3 scripts/build_artifacts.py [--cache DIR] [--only overfit|ablation|layout]
"""
import argparse
import json
import logging

from windowgen.config import Config
from windowgen.probes import (ArtifactStore, ablation_probe, default_cache_dir, layout_probe,
                              overfit_probe)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default=None)
    p.add_argument("--only", choices=("overfit", "ablation", "layout"), nargs="*")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    store = ArtifactStore(args.cache or default_cache_dir())
    cfg = Config()
    todo = args.only or ("overfit", "ablation", "layout")
    probes = {"overfit": overfit_probe, "ablation": ablation_probe, "layout": layout_probe}
    for name in todo:
        res = probes[name](cfg, store)
        print(name, json.dumps(res, indent=1, default=str)[:4000], flush=True)


if __name__ == "__main__":
    main()
