"""Objective evaluation: SDR, segmental SNR, switching accuracy, reports."""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

SDR_CAP = 100.0


def _samples(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clamped to [-100, 100].

    The estimate is split into its projection on the reference (target) and
    the remainder (distortion).
    """
    s = _samples(reference)
    e = _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.size}, estimate {e.size}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zero")
    target = (float(e @ s) / ref_energy) * s
    dist = e - target
    num = float(target @ target)
    den = float(dist @ dist)
    if den <= num * 10 ** (-SDR_CAP / 10):
        return SDR_CAP
    if num <= den * 10 ** (-SDR_CAP / 10):
        return -SDR_CAP
    return float(10 * np.log10(num / den))


def seg_snr(reference, estimate, frame: int = 256, lo: float = -10.0, hi: float = 35.0) -> float:
    """Mean per-frame SNR over non-overlapping frames, each clamped to [lo, hi]."""
    s = _samples(reference)
    e = _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.size}, estimate {e.size}")
    n = s.size // frame
    if n == 0:
        raise ValueError("signal shorter than one frame")
    s = s[: n * frame].reshape(n, frame)
    err = e[: n * frame].reshape(n, frame) - s
    ps = np.sum(s**2, axis=1)
    pe = np.sum(err**2, axis=1)
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10(np.maximum(ps, 1e-300) / np.maximum(pe, 1e-300))
    return float(np.mean(np.clip(snr, lo, hi)))


def switch_accuracy(true_labels, posterior) -> float:
    """Frame accuracy of argmax r^m(m_t), maximized over label permutations."""
    r = np.asarray(getattr(posterior, "marginals", posterior), dtype=np.float64)
    labels = np.asarray(true_labels).astype(np.int64)
    if r.ndim != 2 or r.shape[0] != labels.size:
        raise ValueError(f"posterior {r.shape} not aligned with {labels.size} labels")
    pred = np.argmax(r, axis=1)
    K = max(r.shape[1], int(labels.max()) + 1)
    best = 0.0
    for perm in itertools.permutations(range(K)):
        acc = float(np.mean(np.asarray(perm)[pred] == labels))
        best = max(best, acc)
    return best


def evaluate_run(clean, mixture, enhanced, labels=None, posterior=None, condition=None) -> dict:
    """Per-utterance metrics. ``condition`` is a dict of grouping keys."""
    rec = dict(condition or {})
    rec["input_sdr"] = sdr(clean, mixture)
    rec["sdr"] = sdr(clean, enhanced)
    rec["sdr_gain"] = rec["sdr"] - rec["input_sdr"]
    rec["input_seg_snr"] = seg_snr(clean, mixture)
    rec["seg_snr"] = seg_snr(clean, enhanced)
    if labels is not None and posterior is not None:
        rec["switch_accuracy"] = switch_accuracy(labels, posterior)
    return rec


METRIC_KEYS = ("input_sdr", "sdr", "sdr_gain", "input_seg_snr", "seg_snr", "switch_accuracy")


@dataclass
class EvalReport:
    runs: list[dict] = field(default_factory=list)
    group_keys: tuple = ("noise", "snr", "visual")

    def add(self, rec: dict) -> None:
        self.runs.append(rec)

    def mean(self, key: str, **where) -> float:
        vals = [r[key] for r in self.runs if key in r and all(r.get(k) == v for k, v in where.items())]
        if not vals:
            return float("nan")
        return float(np.mean(vals))

    def breakdown(self, keys=None) -> list[dict]:
        """Mean of every metric per distinct combination of ``keys``."""
        keys = tuple(keys or self.group_keys)
        groups = defaultdict(list)
        for r in self.runs:
            groups[tuple(r.get(k) for k in keys)].append(r)
        out = []
        for combo in sorted(groups, key=lambda c: tuple(str(x) for x in c)):
            rows = groups[combo]
            rec = dict(zip(keys, combo))
            rec["n"] = len(rows)
            for m in METRIC_KEYS:
                vals = [r[m] for r in rows if m in r]
                if vals:
                    rec[m] = float(np.mean(vals))
            out.append(rec)
        return out

    def to_json(self) -> str:
        doc = {
            "n_runs": len(self.runs),
            "overall": {m: self.mean(m) for m in METRIC_KEYS if any(m in r for r in self.runs)},
            "by_condition": self.breakdown(),
            "runs": self.runs,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def table(self, metric: str = "sdr") -> str:
        """Plain-text grid: SNR columns, one row for the input and one per visual condition."""
        snrs = sorted({r["snr"] for r in self.runs if "snr" in r})
        visuals = sorted({r["visual"] for r in self.runs if "visual" in r})
        input_metric = "input_" + metric
        rows = [("Input", {s: self.mean(input_metric, snr=s) for s in snrs})]
        for vcond in visuals:
            rows.append(
                (f"SwVAE - {vcond}", {s: self.mean(metric, snr=s, visual=vcond) for s in snrs})
            )
        width = max(len(name) for name, _ in rows) + 2
        head = "SNR (dB)".ljust(width) + "".join(f"{s:>9g}" for s in snrs)
        sep = "-" * len(head)
        lines = [f"{metric.upper()} (dB)", sep, head, sep]
        for name, vals in rows:
            lines.append(name.ljust(width) + "".join(f"{vals[s]:9.2f}" for s in snrs))
        lines.append(sep)
        return "\n".join(lines) + "\n"
