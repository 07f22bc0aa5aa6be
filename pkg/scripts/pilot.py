"""Pilot run on held-out seeds: fixes em_iterations and sanity-checks thresholds.

Usage: python3 scripts/pilot.py [--out pilot/pilot_results.json] [--utterances 6]

Utterance seeds here start at PILOT_SEED and never overlap the acceptance
suite's. Trained models come from the shared cache.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from swvae.experiments import ExperimentConfig, default_cache_dir, run_grid, utterance_set, train_pair, train_regime_models
from swvae.inference import EnhancerConfig

PILOT_SEED = 5000
SNRS = (-5.0, 0.0, 5.0, 10.0, 15.0)
ITERATIONS = (20, 30, 50)


def grid_summary(report, snrs):
    out = {}
    for vis in ("clean", "occluded"):
        rows = {}
        for snr in snrs:
            rows[str(snr)] = {
                "sdr": report.mean("sdr", snr=snr, visual=vis),
                "input_sdr": report.mean("input_sdr", snr=snr, visual=vis),
                "gain": report.mean("sdr_gain", snr=snr, visual=vis),
            }
        out[vis] = rows
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="pilot/pilot_results.json")
    ap.add_argument("--utterances", type=int, default=6)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig()
    cache = default_cache_dir()
    results = {"config": repr(cfg), "pilot_seed": PILOT_SEED, "utterances": args.utterances}

    t0 = time.time()
    models, _ = train_pair(cfg, cache)
    regime_models, _ = train_regime_models(cfg, cache)
    results["training_seconds"] = time.time() - t0

    utts = utterance_set(cfg, args.utterances, PILOT_SEED)

    # switching recovery with regime-matched models at 5 dB
    acc = []
    for i, utt in enumerate(utts):
        rep = run_grid(regime_models, [utt], [5.0], ["clean"], EnhancerConfig(seed=PILOT_SEED + i))
        acc.append({"accuracy": rep.runs[0]["switch_accuracy"], "seconds": rep.runs[0]["seconds"]})
        logging.info("regime utt %d: accuracy %.3f", i, acc[-1]["accuracy"])
    results["switching"] = {"runs": acc, "min": min(a["accuracy"] for a in acc), "mean": float(np.mean([a["accuracy"] for a in acc]))}

    # gain and occlusion gap against the iteration budget
    results["iterations"] = {}
    for n in ITERATIONS:
        enh = replace(EnhancerConfig(seed=PILOT_SEED), em_iterations=n)
        report = run_grid(models, utts, SNRS, ("clean", "occluded"), enh)
        summary = grid_summary(report, SNRS)
        gap = {s: summary["clean"][s]["sdr"] - summary["occluded"][s]["sdr"] for s in summary["clean"]}
        results["iterations"][str(n)] = {
            "grid": summary,
            "occlusion_gap": gap,
            "violations": int(sum(r["wiener_violations"] for r in report.runs)),
            "mean_seconds": float(np.mean([r["seconds"] for r in report.runs])),
        }
        logging.info("iterations %d: gains %s", n, {s: round(v["gain"], 2) for s, v in summary["clean"].items()})

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=1))
    logging.info("wrote %s", out)


if __name__ == "__main__":
    main()
