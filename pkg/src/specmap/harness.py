"""Command-line orchestration: datasets, training, evaluation, sweeps and reports."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import idw_complete
from .channel import ChannelConfig, transmit_samples
from .codec import Codec, CodecConfig, Predictor
from .errors import NumericalError, ValidationError
from .radiomap import (DESK_GRID, EMPTY_DBM, FULL_GRID, PropagationParams,
                       SpectrumMap, apply_mask, generate_mask, load_dataset, make_record,
                       sample_dataset)
from .training import (MapSet, TrainConfig, aggregate, evaluate_maps, load_checkpoint,
                       reconstruct, save_checkpoint, train_stage1, train_stage2_offline,
                       tune_online)

log = logging.getLogger("specmap")

SWEEP_AXES = ("snr", "tau", "n_win", "n_tx")
SWEEP_COLUMNS = ("method", "axis", "value", "repeat", "seed", "n_maps", "mse", "kmse",
                 "rkmse", "knowledge_supervised", "knowledge_unsupervised")

# flat config keys and their defaults
DEFAULTS = {
    "grid": "desk", "n_train": 256, "n_test": 64, "tau": 0.15, "tx_min": 1, "tx_max": 3,
    "shadow_sigma_db": 0.0, "freq_hz": 75e6, "seed": 0, "mask_mode": "trajectory",
    "patch": 4, "scales": 2, "channels": 32, "heads": 4, "depth": 2, "n_win": 4,
    "codebook_size": 256,
    "epochs": 30, "batch_size": 16, "lr": 1e-3, "kappa": 0.5, "w_k": 0.5, "w_c": 1.0,
    "gamma": 0.25, "snr_db": 30.0, "online_steps": 50, "online_lr": 1e-4,
    "region_radius": 3, "varphi": 2, "zeta": 3.0, "knowledge_form": "direction",
    "codebook_init": "data",
    "eval_snr_db": 30.0, "distance_m": -1.0, "idw_p": 2.0, "workers": 1,
}


TEST_START = 10_000  # first record index of the test split


class ConfigError(ValidationError):
    pass


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Read a flat TOML or JSON file; unknown keys and wrong types are schema errors."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
        if p.suffix == ".json":
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from exc
        else:
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            try:
                raw = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from exc
        for k, v in raw.items():
            if k not in DEFAULTS:
                raise ConfigError(f"{p}: unknown key {k!r}")
            if isinstance(v, dict):
                raise ConfigError(f"{p}: key {k!r} must be a scalar (flat config)")
            cfg[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def _coerce(key, value):
    ref = DEFAULTS[key]
    try:
        if isinstance(ref, bool):
            return bool(value)
        if isinstance(ref, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(ref, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: cannot use {value!r} as {type(ref).__name__}") from None


def grid_of(cfg: dict):
    if cfg["grid"] == "desk":
        return DESK_GRID
    if cfg["grid"] == "full":
        return FULL_GRID
    raise ConfigError(f"grid must be 'desk' or 'full', not {cfg['grid']!r}")


def codec_config(cfg: dict) -> CodecConfig:
    return CodecConfig(grid_shape=grid_of(cfg).shape, patch=cfg["patch"], scales=cfg["scales"],
                       channels=cfg["channels"], heads=cfg["heads"], depth=cfg["depth"],
                       n_win=cfg["n_win"], codebook_size=cfg["codebook_size"], seed=cfg["seed"])


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: cfg[k] for k in names if k in cfg})


def channel_config(cfg: dict, snr_db: float | None = None, seed: int = 0) -> ChannelConfig:
    d = cfg["distance_m"]
    return ChannelConfig(distance_m=None if d <= 0 else d,
                         snr_db=cfg["eval_snr_db"] if snr_db is None else snr_db, rng_seed=seed)


def load_maps(directory) -> MapSet:
    recs = load_dataset(directory)
    if not recs:
        raise FileNotFoundError(f"no records in {directory}")
    return MapSet.from_records(recs)


def write_csv(path, rows: list[dict], columns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ----------------------------------------------------------------- scoring

def idw_reconstruct(maps: MapSet, channel: ChannelConfig | None, p: float) -> np.ndarray:
    """Measured samples are sent as 16-bit fixed point, then interpolated."""
    out = np.empty_like(maps.values)
    for i in range(len(maps)):
        measured = maps.measured[i]
        vals = maps.masked[i].copy()
        if channel is not None:
            vals[measured] = transmit_samples(vals[measured], channel.with_seed(channel.rng_seed + i))
        filled = idw_complete(SpectrumMap(maps.grid, np.where(measured, vals, EMPTY_DBM)),
                              measured, p)
        out[i] = filled.values_dbm
    return out


@dataclass
class ExperimentSpec:
    dataset: str
    checkpoint: str | None
    axis: str
    values: list
    repeats: int
    seed: int
    output: str
    method: str = "learned"

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, not {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep needs at least one axis value")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.method not in ("learned", "idw"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "learned" and not self.checkpoint:
            raise ConfigError("learned sweeps need a checkpoint")


def _remask(maps: MapSet, tau: float, cfg: dict, seed: int) -> MapSet:
    masked = np.empty_like(maps.values)
    for i in range(len(maps)):
        m = generate_mask(maps.grid, tau, cfg["mask_mode"], int(seed * 100003 + i))
        masked[i] = apply_mask(SpectrumMap(maps.grid, maps.values[i]), m).values_dbm
    return MapSet(maps.grid, maps.params, maps.values, masked, maps.transmitters, maps.ids)


def _fresh_maps(cfg: dict, n_tx: int, count: int, seed: int) -> MapSet:
    params = PropagationParams(freq_hz=cfg["freq_hz"], shadow_sigma_db=cfg["shadow_sigma_db"])
    recs = [make_record(i, grid_of(cfg), (n_tx, n_tx), params=params, tau=cfg["tau"],
                        rng_seed=seed, mode=cfg["mask_mode"]) for i in range(count)]
    return MapSet.from_records(recs)


def sweep_point(spec: ExperimentSpec, cfg: dict, value, repeat: int) -> dict:
    """One (axis value, repeat) evaluation; the channel is re-seeded per repeat."""
    ad.set_precision("float64")
    maps = load_maps(spec.dataset)
    snr = cfg["eval_snr_db"]
    ch_seed = spec.seed * 1000 + repeat
    codec = predictor = None
    if spec.method == "learned":
        codec, predictor, _ = load_checkpoint(spec.checkpoint)
    if spec.axis == "snr":
        snr = float(value)
    elif spec.axis == "tau":
        maps = _remask(maps, float(value), cfg, spec.seed + repeat)
    elif spec.axis == "n_tx":
        maps = _fresh_maps(cfg, int(value), len(maps), spec.seed + 7919 * repeat)
    elif spec.axis == "n_win" and codec is not None:
        c = codec.config.to_dict()
        c["n_win"] = int(value)
        ccfg = CodecConfig(**c)
        codec = Codec(ccfg, {k: t.data for k, t in codec.params.items()})
        predictor = Predictor(ccfg, {k: t.data for k, t in predictor.params.items()})
    channel = channel_config(cfg, snr, ch_seed)
    tc = train_config(cfg)
    if spec.method == "idw":
        recon = idw_reconstruct(maps, None if math.isinf(snr) else channel, cfg["idw_p"])
    else:
        if predictor is None:
            raise ConfigError(f"checkpoint {spec.checkpoint} has no predictor")
        recon = reconstruct(codec, predictor, maps, channel, seed=ch_seed)
    if not np.all(np.isfinite(recon)):
        raise NumericalError(f"non-finite reconstruction at {spec.axis}={value}")
    agg = aggregate(evaluate_maps(maps, recon, tc))
    return {"method": spec.method, "axis": spec.axis, "value": value, "repeat": repeat,
            "seed": spec.seed, **agg}


def run_sweep(spec: ExperimentSpec, cfg: dict, workers: int = 1) -> list[dict]:
    jobs = [(v, r) for v in spec.values for r in range(spec.repeats)]
    if workers <= 1:
        rows = [sweep_point(spec, cfg, v, r) for v, r in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(sweep_point, spec, cfg, v, r) for v, r in jobs]
            rows = [f.result() for f in futs]
    # merge in axis order regardless of completion order
    order = {v: i for i, v in enumerate(spec.values)}
    rows.sort(key=lambda r: (order[r["value"]], r["repeat"]))
    write_csv(spec.output, rows, SWEEP_COLUMNS)
    return rows


def read_sweep_csv(path) -> list[dict]:
    """Parse and validate a sweep CSV; raises ConfigError on schema problems."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sweep CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ConfigError(f"{path}: columns {reader.fieldnames} != {list(SWEEP_COLUMNS)}")
        rows = []
        for n, raw in enumerate(reader, start=2):
            try:
                row = {"method": raw["method"], "axis": raw["axis"], "value": float(raw["value"]),
                       "repeat": int(raw["repeat"]), "seed": int(raw["seed"]),
                       "n_maps": int(raw["n_maps"])}
                for k in SWEEP_COLUMNS[6:]:
                    row[k] = float(raw[k])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{n}: {exc}") from None
            if row["axis"] not in SWEEP_AXES:
                raise ConfigError(f"{path}:{n}: unknown axis {row['axis']!r}")
            rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: no rows")
    return rows


def render_report(rows: list[dict]) -> str:
    """Markdown table of mean/std per (method, value) plus directional checks."""
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["axis"], r["value"]), []).append(r)
    lines = ["| method | axis | value | repeats | MSE | KMSE | RKMSE (mean) | RKMSE (std) |",
             "|---|---|---|---|---|---|---|---|"]
    means = {}
    for (m, a, v), rs in groups.items():
        rk = np.array([r["rkmse"] for r in rs])
        means.setdefault((m, a), []).append((v, float(rk.mean())))
        lines.append(f"| {m} | {a} | {v:g} | {len(rs)} | {np.mean([r['mse'] for r in rs]):.4f} "
                     f"| {np.mean([r['kmse'] for r in rs]):.4f} | {rk.mean():.4f} "
                     f"| {rk.std():.4f} |")
    lines += ["", "## Plot columns", "", "| method | axis | value | rkmse |", "|---|---|---|---|"]
    for (m, a), pts in means.items():
        for v, rk in sorted(pts):
            lines.append(f"| {m} | {a} | {v:g} | {rk:.6g} |")
    lines += ["", "## Directional checks", ""]
    for (m, a), pts in means.items():
        pts = sorted(pts)
        if a == "snr" and len(pts) > 1:
            ok = all(b[1] <= x[1] + 1e-12 for x, b in zip(pts, pts[1:]))
            lines.append(f"- {m}: RKMSE non-increasing as SNR grows: {'yes' if ok else 'no'}")
    methods = sorted({m for m, _ in means})
    if "learned" in methods and "idw" in methods:
        for (m, a), pts in means.items():
            if m != "learned" or ("idw", a) not in means:
                continue
            base = dict(means[("idw", a)])
            for v, rk in sorted(pts):
                if v in base:
                    rel = "<" if rk < base[v] else ">="
                    lines.append(f"- {a}={v:g}: learned {rel} idw ({rk:.4g} vs {base[v]:.4g})")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- commands

def cmd_gen_dataset(args, cfg):
    params = PropagationParams(freq_hz=cfg["freq_hz"], shadow_sigma_db=cfg["shadow_sigma_db"])
    default = cfg["n_test"] if args.split == "test" else cfg["n_train"]
    count = args.count if args.count is not None else default
    paths = sample_dataset(args.out, count, grid_of(cfg), (cfg["tx_min"], cfg["tx_max"]),
                           params=params, tau=cfg["tau"], rng_seed=cfg["seed"],
                           mode=cfg["mask_mode"], start=TEST_START if args.split == "test" else 0)
    print(f"wrote {len(paths)} maps to {args.out}")


def cmd_train_stage1(args, cfg):
    maps = load_maps(args.data)
    codec = Codec(codec_config(cfg))
    tc = train_config(cfg)
    hist = train_stage1(maps, codec, channel_config(cfg, cfg["snr_db"], cfg["seed"]), tc)
    out = save_checkpoint(args.out, codec, meta={"train": tc.__dict__, "stage": 1})
    write_csv(out / "stage1_trace.csv", hist, hist[0].keys())
    print(f"stage 1: loss {hist[0]['loss']:.4f} -> {hist[-1]['loss']:.4f}; checkpoint {out}")


def cmd_train_stage2(args, cfg):
    maps = load_maps(args.data)
    codec, _, info = load_checkpoint(args.ckpt)
    predictor = Predictor(codec.config)
    hist = train_stage2_offline(maps, codec, predictor, train_config(cfg))
    out = save_checkpoint(args.out or args.ckpt, codec, predictor, meta={**info, "stage": 2})
    write_csv(Path(out) / "stage2_trace.csv", hist, hist[0].keys())
    print(f"stage 2: accuracy {hist[-1]['accuracy']:.4f}; checkpoint {out}")


def cmd_tune_online(args, cfg):
    maps = load_maps(args.data)
    codec, predictor, info = load_checkpoint(args.ckpt)
    if predictor is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no predictor")
    tc = train_config(cfg)
    trace = tune_online(codec, predictor, maps.masked, maps.grid, maps.params, tc,
                        channel_config(cfg, cfg["eval_snr_db"], cfg["seed"]))
    out = save_checkpoint(args.out, codec, predictor, meta={**info, "stage": "online"})
    rows = [{"step": i + 1, "loss": l, "n_peaks": p}
            for i, (l, p) in enumerate(zip(trace.losses, trace.peaks))]
    write_csv(Path(out) / "online_trace.csv", rows, ("step", "loss", "n_peaks"))
    print(f"online: {trace.steps} steps, {trace.skipped} skipped; checkpoint {out}")


def _emit_scores(rows, out, label):
    agg = aggregate(rows)
    if out:
        out = Path(out)
        write_csv(out.with_suffix(".csv"), rows, rows[0].keys())
        out.with_suffix(".json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    if not all(math.isfinite(r["rkmse"]) for r in rows):
        raise NumericalError(f"{label}: non-finite RKMSE")
    print(f"{label}: MSE {agg['mse']:.4f} KMSE {agg['kmse']:.4f} RKMSE {agg['rkmse']:.4f}")


def cmd_evaluate(args, cfg):
    maps = load_maps(args.data)
    codec, predictor, _ = load_checkpoint(args.ckpt)
    snr = cfg["eval_snr_db"]
    recon = reconstruct(codec, predictor, maps, channel_config(cfg, snr, cfg["seed"]),
                        seed=cfg["seed"])
    _emit_scores(evaluate_maps(maps, recon, train_config(cfg)), args.out, "evaluate")


def cmd_idw(args, cfg):
    maps = load_maps(args.data)
    snr = cfg["eval_snr_db"]
    ch = None if math.isinf(snr) else channel_config(cfg, snr, cfg["seed"])
    recon = idw_reconstruct(maps, ch, cfg["idw_p"])
    _emit_scores(evaluate_maps(maps, recon, train_config(cfg)), args.out, "idw")


def _parse_values(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"axis values must be numbers: {text!r}") from None
    return [int(v) if v.is_integer() else v for v in vals]


def cmd_sweep(args, cfg):
    spec = ExperimentSpec(args.data, args.ckpt, args.axis, _parse_values(args.values),
                          args.repeats, cfg["seed"], args.out, args.method)
    rows = run_sweep(spec, cfg, args.workers or cfg["workers"])
    print(f"sweep: {len(rows)} rows -> {spec.output}")


def cmd_report(args, cfg):
    rows = []
    for path in args.csv:
        rows += read_sweep_csv(path)
    text = render_report(rows)
    Path(args.out).write_text(text)
    print(f"report: {len(rows)} rows -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specmap", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, *opts):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")
        for o in opts:
            o(p)
        p.set_defaults(func=fn)
        return p

    data = lambda p: p.add_argument("--data", required=True, help="dataset directory")
    ckpt = lambda p: p.add_argument("--ckpt", required=True, help="checkpoint directory")
    out = lambda p: p.add_argument("--out", required=True)
    out_opt = lambda p: p.add_argument("--out")

    add("gen-dataset", cmd_gen_dataset, out,
        lambda p: (p.add_argument("--count", type=int),
                   p.add_argument("--split", choices=("train", "test"), default="train")))
    add("train-stage1", cmd_train_stage1, data, out)
    add("train-stage2", cmd_train_stage2, data, ckpt, out_opt)
    add("tune-online", cmd_tune_online, data, ckpt, out)
    add("evaluate", cmd_evaluate, data, ckpt, out_opt)
    add("idw", cmd_idw, data, out_opt)

    def sweep_opts(p):
        p.add_argument("--ckpt")
        p.add_argument("--axis", required=True, choices=SWEEP_AXES)
        p.add_argument("--values", required=True, help="comma-separated axis values")
        p.add_argument("--repeats", type=int, default=1)
        p.add_argument("--method", default="learned", choices=("learned", "idw"))
        p.add_argument("--workers", type=int)
    add("sweep", cmd_sweep, data, out, sweep_opts)
    add("report", cmd_report, out,
        lambda p: p.add_argument("--csv", required=True, nargs="+"))
    return ap


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ad.set_precision("float64")
    try:
        cfg = load_config(args.config, _overrides(args.set))
        args.func(args, cfg)
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValidationError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
