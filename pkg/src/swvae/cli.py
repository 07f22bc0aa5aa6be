"""Command-line entry point: ``swvae {synth,train-vae,enhance,eval}``.

Every command reads one JSON config (all keys optional, missing keys take
the defaults in ``DEFAULT_CONFIG``) and writes under an output root chosen
by ``--out``, else ``$SWVAE_OUT``, else ``./runs``. The resolved config is
echoed next to the outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from swvae.experiments import ExperimentConfig, make_utterance
from swvae.inference import EnhancerConfig, enhance
from swvae.metrics import EvalReport, evaluate_run
from swvae.numerics import NumericalError
from swvae.signal import (
    StftConfig,
    Waveform,
    istft,
    mix_at_snr,
    read_wav,
    stft,
    synth_clean,
    write_wav,
)
from swvae.signal.stft import is_cola
from swvae.signal.synth import NOISE_KINDS
from swvae.signal.visual import load_labels, load_visual, save_labels, save_visual
from swvae.vae import AUDIO, AUDIOVISUAL, VaeModel, load_model, save_model, train_vae

log = logging.getLogger("swvae")

OUT_ENV = "SWVAE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VISUAL_CONDITIONS = ("clean", "occluded")

DEFAULT_CONFIG = {
    "seed": 0,
    "stft": {"sample_rate": 16000, "win_length": 1024, "hop": 256, "window": "hann"},
    "data": {
        "regimes": 2,
        "visual_dim": 8,
        "visual_noise": 0.1,
        "level_rms": 0.05,
        "train_duration": 120.0,
        "n_test": 20,
        "test_duration": 3.0,
        "noise_kinds": ["white", "pink"],
        "snr_grid": [-5.0, 0.0, 5.0, 10.0, 15.0],
        "occlusion_fraction": 1.0 / 3.0,
        "occlusion_burst": 20,
        "wav_format": "float32",
    },
    "vae": {"latent_dim": 16, "hidden": 128, "epochs": 400, "lr": 1e-3, "batch_size": 64},
    "enhancer": {
        f.name: f.default for f in fields(EnhancerConfig) if f.name != "seed"
    },
    "paths": {"data": "data", "models": "models", "enhanced": "enhanced", "reports": "reports"},
}


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class DataError(RuntimeError):
    """Missing or malformed input files."""


# --------------------------------------------------------------------------
# config


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{path}' must be a table")
            out[key] = _merge(ref, val, path + ".")
        elif isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"'{path}' must be true or false")
            out[key] = val
        elif isinstance(ref, (int, float)):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"'{path}' must be a number")
            if isinstance(ref, int) and not isinstance(ref, bool) and float(val) != int(val):
                raise ConfigError(f"'{path}' must be an integer")
            out[key] = type(ref)(val)
        elif isinstance(ref, list):
            if not isinstance(val, list):
                raise ConfigError(f"'{path}' must be a list")
            out[key] = list(val)
        else:
            if not isinstance(val, type(ref)):
                raise ConfigError(f"'{path}' must be a {type(ref).__name__}")
            out[key] = val
    return out


def validate(cfg: dict) -> None:
    try:
        sc = stft_config(cfg)
        sc.window_array()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"stft: {exc}") from exc
    if not is_cola(sc):
        raise ConfigError("stft: window/hop combination does not allow perfect reconstruction")
    try:
        enhancer_config(cfg, 0)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"enhancer: {exc}") from exc
    d = cfg["data"]
    if d["regimes"] < 1 or d["visual_dim"] < 1 or d["n_test"] < 1:
        raise ConfigError("data: regimes, visual_dim and n_test must be >= 1")
    min_dur = cfg["stft"]["win_length"] / cfg["stft"]["sample_rate"]
    if d["train_duration"] <= min_dur or d["test_duration"] <= min_dur:
        raise ConfigError("data: durations must exceed one STFT window")
    if not d["noise_kinds"] or any(k not in NOISE_KINDS for k in d["noise_kinds"]):
        raise ConfigError(f"data.noise_kinds must be a nonempty subset of {NOISE_KINDS}")
    if not d["snr_grid"]:
        raise ConfigError("data.snr_grid must be nonempty")
    if not 0 <= d["occlusion_fraction"] < 1 or d["occlusion_burst"] < 1:
        raise ConfigError("data: occlusion fraction must be in [0, 1) and burst >= 1")
    if d["wav_format"] not in ("pcm16", "float32"):
        raise ConfigError("data.wav_format must be pcm16 or float32")
    v = cfg["vae"]
    if min(v["latent_dim"], v["hidden"], v["batch_size"]) < 1 or v["epochs"] < 0 or v["lr"] < 0:
        raise ConfigError("vae: sizes must be >= 1, epochs and lr nonnegative")


def load_config(path: str | None, seed: int | None = None) -> dict:
    override = {}
    if path is not None:
        try:
            override = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = _merge(DEFAULT_CONFIG, override)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def stft_config(cfg: dict) -> StftConfig:
    return StftConfig(**cfg["stft"])


def experiment_config(cfg: dict) -> ExperimentConfig:
    d, v = cfg["data"], cfg["vae"]
    return ExperimentConfig(
        seed=cfg["seed"], regimes=d["regimes"], visual_dim=d["visual_dim"], visual_noise=d["visual_noise"],
        level_rms=d["level_rms"], train_duration=d["train_duration"], epochs=v["epochs"],
        latent_dim=v["latent_dim"], hidden=v["hidden"], lr=v["lr"], batch_size=v["batch_size"],
        test_duration=d["test_duration"], occlusion_fraction=d["occlusion_fraction"],
        occlusion_burst=d["occlusion_burst"], stft=stft_config(cfg),
    )


def enhancer_config(cfg: dict, seed: int) -> EnhancerConfig:
    return EnhancerConfig(seed=seed, **cfg["enhancer"])


def _run_seed(base: int, *keys: int) -> int:
    # independent, order-free stream per (utterance, snr, visual) cell
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def _echo_config(root: Path, command: str, cfg: dict) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / f"config.{command}.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise DataError(f"missing file: {path}")
    return json.loads(path.read_text())


def _map(fn, jobs: list, n_jobs: int) -> list:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# synth


def _snr_tag(snr: float) -> str:
    return f"{snr:g}".replace("-", "m")


def _synth_utterance(job):
    cfg, root, idx, seed = job
    d = cfg["data"]
    rng = np.random.default_rng(seed)
    name = f"utt{idx:03d}"
    udir = root / "test" / name
    udir.mkdir(parents=True, exist_ok=True)
    kind = d["noise_kinds"][idx % len(d["noise_kinds"])]
    utt = make_utterance(experiment_config(cfg), rng, kind)
    clean, noise, vis, occ, labels = utt.clean, utt.noise, utt.visual, utt.occluded, utt.labels
    rec = {"name": name, "noise": kind, "mixtures": {}}
    files = {
        "clean": ("clean.wav", lambda p: write_wav(p, clean, d["wav_format"])),
        "noise_wav": ("noise.wav", lambda p: write_wav(p, noise, d["wav_format"])),
        "visual": ("visual.bin", lambda p: save_visual(p, vis)),
        "visual_occluded": ("visual_occluded.bin", lambda p: save_visual(p, occ)),
        "labels": ("labels.bin", lambda p: save_labels(p, labels)),
    }
    for key, (fname, writer) in files.items():
        writer(udir / fname)
        rec[key] = f"test/{name}/{fname}"
    for snr in d["snr_grid"]:
        mix = mix_at_snr(clean, noise, snr)
        fname = f"mix_snr{_snr_tag(snr)}.wav"
        write_wav(udir / fname, mix, d["wav_format"])
        rec["mixtures"][f"{snr:g}"] = f"test/{name}/{fname}"
    return rec


def cmd_synth(cfg: dict, root: Path, jobs: int = 1) -> dict:
    d = cfg["data"]
    sc = stft_config(cfg)
    data = root / cfg["paths"]["data"]
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(d["n_test"] + 1)
    train_rng = np.random.default_rng(seeds[0])
    clean, vis, labels = synth_clean(
        d["regimes"], d["train_duration"], train_rng, sc, d["visual_dim"], d["level_rms"],
        visual_noise=d["visual_noise"],
    )
    (data / "train").mkdir(parents=True, exist_ok=True)
    write_wav(data / "train/clean.wav", clean, d["wav_format"])
    save_visual(data / "train/visual.bin", vis)
    save_labels(data / "train/labels.bin", labels)
    train = {"clean": "train/clean.wav", "visual": "train/visual.bin", "labels": "train/labels.bin"}

    job_list = [(cfg, data, i, seeds[i + 1]) for i in range(d["n_test"])]
    utterances = _map(_synth_utterance, job_list, jobs)

    written = sorted(p for p in data.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "seed": cfg["seed"],
        "snr_grid": d["snr_grid"],
        "train": train,
        "test": utterances,
        "files": {str(p.relative_to(data)): sha256(p) for p in written},
    }
    _write_json(data / "manifest.json", manifest)
    log.info("synth: %d test utterances, %d files", len(utterances), len(written))
    return manifest


# --------------------------------------------------------------------------
# train-vae


def _train_one(job):
    cfg, kind, power, vis, seed = job
    v = cfg["vae"]
    init_seed, train_seed = seed.spawn(2)
    model = VaeModel.create(
        kind,
        power.shape[1],
        np.random.default_rng(init_seed),
        latent_dim=v["latent_dim"],
        hidden=v["hidden"],
        visual_dim=cfg["data"]["visual_dim"],
        model_id=KIND_ORDER.index(kind),
    )
    res = train_vae(
        model,
        power,
        vis if kind == AUDIOVISUAL else None,
        v["epochs"],
        np.random.default_rng(train_seed),
        lr=v["lr"],
        batch_size=v["batch_size"],
    )
    return kind, res.model, res.losses


KIND_ORDER = (AUDIO, AUDIOVISUAL)


def checkpoint_path(cfg: dict, root: Path, kind: str) -> Path:
    return root / cfg["paths"]["models"] / f"{kind}.ckpt"


def cmd_train_vae(cfg: dict, root: Path, jobs: int = 1) -> dict:
    data = root / cfg["paths"]["data"]
    manifest = _read_json(data / "manifest.json")
    clean = read_wav(data / manifest["train"]["clean"])
    vis = load_visual(data / manifest["train"]["visual"])
    power = stft(clean, stft_config(cfg)).power()
    if vis.n_frames != power.shape[0]:
        raise DataError("training visual sequence is not aligned with the audio")
    seeds = np.random.SeedSequence([cfg["seed"], 1]).spawn(len(KIND_ORDER))
    job_list = [(cfg, kind, power, vis.values, s) for kind, s in zip(KIND_ORDER, seeds)]
    curves = {}
    for kind, model, losses in _map(_train_one, job_list, jobs):
        path = checkpoint_path(cfg, root, kind)
        save_model(path, model, {"epochs": cfg["vae"]["epochs"], "final_loss": losses[-1]})
        curves[kind] = losses
        log.info("train-vae: %s loss %.4g -> %.4g", kind, losses[0], losses[-1])
    _write_json(root / cfg["paths"]["models"] / "losses.json", curves)
    return curves


# --------------------------------------------------------------------------
# enhance


def _enhance_one(job):
    cfg, root, rec, snr_key, vcond, seed = job
    data = root / cfg["paths"]["data"]
    models = [load_model(checkpoint_path(cfg, root, k)) for k in KIND_ORDER]
    mix = read_wav(data / rec["mixtures"][snr_key])
    key = "visual" if vcond == "clean" else "visual_occluded"
    vis = load_visual(data / rec[key])
    X = stft(mix, stft_config(cfg))
    if vis.n_frames != X.n_frames:
        raise DataError(f"{rec[key]}: {vis.n_frames} visual frames, {X.n_frames} STFT frames")
    res = enhance(X.values, vis.values, models, enhancer_config(cfg, seed))
    out = Waveform(istft(X.replace(res.s_hat)).samples, mix.sample_rate)
    odir = root / cfg["paths"]["enhanced"] / rec["name"]
    odir.mkdir(parents=True, exist_ok=True)
    stem = f"snr{_snr_tag(float(snr_key))}_{vcond}"
    write_wav(odir / f"{stem}.wav", out, "float32")
    (odir / f"{stem}.diag.jsonl").write_text(res.diagnostics.to_jsonl())
    np.save(odir / f"{stem}.posterior.npy", res.state.switch.marginals)
    return {
        "name": rec["name"],
        "snr": snr_key,
        "visual": vcond,
        "wav": f"{rec['name']}/{stem}.wav",
        "diagnostics": f"{rec['name']}/{stem}.diag.jsonl",
        "posterior": f"{rec['name']}/{stem}.posterior.npy",
        "seed": seed,
        "final_elbo": res.diagnostics.elbo[-1],
        "wiener_violations": res.diagnostics.violations,
    }


def _visual_conditions(rec: dict) -> list[str]:
    return [c for c in VISUAL_CONDITIONS if (c == "clean" and "visual" in rec) or (c == "occluded" and "visual_occluded" in rec)]


def cmd_enhance(cfg: dict, root: Path, jobs: int = 1) -> dict:
    data = root / cfg["paths"]["data"]
    manifest = _read_json(data / "manifest.json")
    for kind in KIND_ORDER:
        path = checkpoint_path(cfg, root, kind)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
    job_list = []
    for u, rec in enumerate(manifest["test"]):
        for s, snr_key in enumerate(sorted(rec["mixtures"], key=float)):
            for c, vcond in enumerate(_visual_conditions(rec)):
                seed = _run_seed(cfg["seed"], u, s, c)
                job_list.append((cfg, root, rec, snr_key, vcond, seed))
    runs = _map(_enhance_one, job_list, jobs)
    index = {"runs": runs}
    _write_json(root / cfg["paths"]["enhanced"] / "index.json", index)
    log.info("enhance: %d runs", len(runs))
    return index


# --------------------------------------------------------------------------
# eval


def cmd_eval(cfg: dict, root: Path, jobs: int = 1) -> EvalReport:
    data = root / cfg["paths"]["data"]
    enh = root / cfg["paths"]["enhanced"]
    manifest = _read_json(data / "manifest.json")
    index = _read_json(enh / "index.json")
    by_name = {rec["name"]: rec for rec in manifest["test"]}
    report = EvalReport()
    for run in index["runs"]:
        rec = by_name.get(run["name"])
        if rec is None:
            raise DataError(f"enhanced run {run['name']} is not in the manifest")
        clean = read_wav(data / rec["clean"])
        mix = read_wav(data / rec["mixtures"][run["snr"]])
        est = read_wav(enh / run["wav"])
        labels = load_labels(data / rec["labels"])
        post = np.load(enh / run["posterior"])
        cond = {"name": run["name"], "noise": rec["noise"], "snr": float(run["snr"]), "visual": run["visual"]}
        report.add(evaluate_run(clean, mix, est, labels, post, cond))
    rdir = root / cfg["paths"]["reports"]
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "report.json").write_text(report.to_json() + "\n")
    tables = report.table("sdr") + "\n" + report.table("seg_snr")
    (rdir / "table.txt").write_text(tables)
    log.info("eval: %d runs\n%s", len(report.runs), tables)
    return report


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "synth": cmd_synth,
    "train-vae": cmd_train_vae,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
}


HELP = {
    "synth": "write the synthetic training set, test utterances and mixtures",
    "train-vae": "train the A-VAE and AV-VAE checkpoints",
    "enhance": "run the switching enhancer on every test mixture",
    "eval": "score enhanced outputs and write the report tables",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON config file (missing keys use defaults)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
    sub.add_parser("defaults", help="print the default config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "defaults":
        print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.seed)
        root = output_root(args.out)
        _echo_config(root, args.command, cfg)
        COMMANDS[args.command](cfg, root, args.jobs)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
