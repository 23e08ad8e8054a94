"""Command-line entry point: ``mccf {ingest,train,calibrate,evaluate,simulate}``.

Each command reads an optional JSON config, applies command-line overrides
(flags win), writes everything into ``--out`` and drops a
``resolved_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import persistence
from .baselines import IDMParams, params_from_config
from .calibrate import BOUNDS, CalibrationError, DEConfig, calibrate_model
from .inference import (GHOST_SPACING_EXTENDED, GHOST_SPACING_URBAN, InferenceConfig, MCCFFollower,
                        augment_solo, one_step_predict, open_loop_rollout)
from .metrics import (EvalReport, fair_filter, format_prob_table, format_table, open_loop_metrics,
                      overlap_rate, prob_report, rmse_one_step)
from .ringsim import (SCENARIOS, PerturbationProfile, RingConfig, config_to_dict, idm_equilibrium_speed,
                      run_experiment, scenario_config, write_spacetime_svg, write_trials_csv)
from .state_space import EXTENDED_RANGES, URBAN_RANGES, DegenerateDistributionError, TrainingError, train_model
from .trajdata import (Dataset, ParseError, ValidationError, derive_states, duration_summary,
                       parse_trajectory_csv, preprocess_pairs, split_train_test, write_trajectory_csv)

logger = logging.getLogger("mccf")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_K = [1, 3, 6, 10, 15]


class NoEligiblePairs(ValueError):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def _resolve(args: argparse.Namespace, keys: list[str]) -> dict:
    cfg = _load_config(args.config)
    for key in keys + ["seed", "out", "threads"]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", 1)
    if "out" not in cfg:
        raise ValueError("an output directory is required (--out or \"out\" in the config)")
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg, out / "resolved_config.json")
    return out


def _ranges(name: str):
    if name == "urban":
        return URBAN_RANGES
    if name == "extended":
        return EXTENDED_RANGES
    raise ValueError(f"unknown range preset {name!r}; use 'urban' or 'extended'")


def _read(path, cfg: dict) -> Dataset:
    return parse_trajectory_csv(path, schema=cfg.get("columns"))


# ---- ingest -------------------------------------------------------------

def _summary_table(rows: dict[str, dict]) -> str:
    lines = [f"{'Split':<8}{'CF Pairs':>10}{'Mean':>10}{'Std':>10}{'Max':>10}{'Min':>10}"]
    for name, s in rows.items():
        lines.append(f"{name:<8}{s['pairs']:>10d}{s['mean']:>10.2f}{s['std']:>10.2f}"
                     f"{s['max']:>10.2f}{s['min']:>10.2f}")
    return "\n".join(lines)


def cmd_ingest(cfg: dict) -> int:
    inputs = cfg.get("input")
    if not inputs:
        raise ValueError("ingest needs at least one input CSV")
    inputs = [inputs] if isinstance(inputs, str) else list(inputs)
    out = _out_dir(cfg)
    pairs = []
    for path in inputs:
        pairs.extend(_read(path, cfg).pairs)
    raw = Dataset(pairs)
    pp = cfg.get("preprocess", {})
    clean = preprocess_pairs(raw, **{k: tuple(v) if isinstance(v, list) else v for k, v in pp.items()})
    if not clean.pairs:
        (out / "summary.txt").write_text("no eligible pairs\n", encoding="utf-8")
        raise NoEligiblePairs(f"no eligible pairs among {len(raw)} raw pairs")
    train, test = split_train_test(clean, cfg.get("test_fraction", 0.1), cfg["seed"])
    write_trajectory_csv(train, out / "train.csv")
    write_trajectory_csv(test, out / "test.csv")
    rows = {"raw": duration_summary(raw), "clean": duration_summary(clean),
            "train": duration_summary(train), "test": duration_summary(test)}
    _dump_json(rows, out / "summary.json")
    table = _summary_table(rows)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# ---- train --------------------------------------------------------------

def training_report(model) -> dict:
    m = model.meta
    occupied, clusters = int(m["occupied_bins"]), int(m["n_clusters"])
    return {
        "bins_per_dimension": dict(zip(("dv", "d", "v"), (int(k) for k in model.grid.bin_counts))),
        "bin_widths": dict(zip(("dv", "d", "v"), (float(h) for h in model.grid.bin_widths))),
        "total_bins": int(np.prod(model.grid.bin_counts)),
        "occupied_bins": occupied,
        "final_clusters": clusters,
        "compression_ratio": occupied / clusters,
        "n_samples": int(m["n_samples"]),
    }


def cmd_train(cfg: dict) -> int:
    if not cfg.get("train"):
        raise ValueError("train needs a training CSV (--train)")
    out = _out_dir(cfg)
    preset = cfg.get("ranges", "urban")
    ds = _read(cfg["train"], cfg)
    if cfg.get("augment_solo", False):
        ghost = GHOST_SPACING_URBAN if preset == "urban" else GHOST_SPACING_EXTENDED
        ds = augment_solo(ds, ghost)
    model = train_model(ds, _ranges(preset), cfg.get("n_min", 10))
    persistence.save_model(model, out / "model.json")
    rep = training_report(model)
    _dump_json(rep, out / "training_report.json")
    b = rep["bins_per_dimension"]
    text = (f"{'Dimension':<12}{'Bins':>8}\n"
            + "".join(f"{k:<12}{v:>8d}\n" for k, v in b.items())
            + f"{'Total':<12}{rep['total_bins']:>8d}\n"
            + f"occupied bins {rep['occupied_bins']}, final clusters {rep['final_clusters']}, "
              f"compression ratio {rep['compression_ratio']:.2f}\n")
    (out / "training_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# ---- calibrate ----------------------------------------------------------

def cmd_calibrate(cfg: dict) -> int:
    if not cfg.get("train"):
        raise ValueError("calibrate needs a training CSV (--train)")
    models = cfg.get("models") or sorted(BOUNDS)
    if isinstance(models, str):
        models = [m for m in models.split(",") if m]
    for m in models:
        if m not in BOUNDS:
            raise ValueError(f"unknown model {m!r}; choose from {sorted(BOUNDS)}")
    out = _out_dir(cfg)
    ds = _read(cfg["train"], cfg)
    de_kw = dict(cfg.get("de", {}))
    if "mutation" in de_kw:
        de_kw["mutation"] = tuple(de_kw["mutation"])
    de = DEConfig(**{**de_kw, "seed": cfg["seed"]})
    for name in models:
        res = calibrate_model(name, ds, de)
        _dump_json(res.report(), out / f"calibration_{name}.json")
        print(f"{name:<14} RMSE_v = {res.cost:.4f}  ({res.wall_time:.1f}s)")
    return EXIT_OK


# ---- evaluate -----------------------------------------------------------

def _followers(cfg: dict) -> dict:
    """name -> follower, built from the MC-CF model file and calibration reports."""
    out = {}
    if cfg.get("model"):
        model = persistence.load_model(cfg["model"])
        for mode in cfg.get("mccf_modes", ["mccf-det", "mccf-stoch", "mccf-cons"]):
            if mode == "mccf-det":
                ic = InferenceConfig(mode="deterministic")
            elif mode == "mccf-stoch":
                ic = InferenceConfig(mode="stochastic")
            elif mode == "mccf-cons":
                ic = InferenceConfig(mode="stochastic", conservative=True)
            else:
                raise ValueError(f"unknown MC-CF mode {mode!r}")
            f = MCCFFollower(model, ic)
            f.name = mode
            out[mode] = f
    for path in cfg.get("calibrations", []):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        p = params_from_config(doc)
        out[p.name] = p
    if not out:
        raise ValueError("nothing to evaluate: give --model and/or --calibrations")
    return out


def _state_rows(r) -> np.ndarray:
    s = r.states
    return np.column_stack([s.dv, s.d, s.v])


def cmd_evaluate(cfg: dict) -> int:
    if not cfg.get("test"):
        raise ValueError("evaluate needs a test CSV (--test)")
    out = _out_dir(cfg)
    test = _read(cfg["test"], cfg)
    if not test.pairs:
        raise ValueError("test set is empty")
    ks = sorted(int(k) for k in cfg.get("k", DEFAULT_K))
    followers = _followers(cfg)
    seed = cfg["seed"]
    ids = [p.pair_id for p in test.pairs]
    k_max = max(ks)

    one_step = EvalReport(k=1)
    for name, f in followers.items():
        d_p, v_p, a_p, d_t, v_t, a_t = [], [], [], [], [], []
        for j, pair in enumerate(test.pairs):
            res = one_step_predict(f, pair, None, np.random.default_rng([seed, j]))
            d_p.append(res.d), v_p.append(res.v), a_p.append(res.a)
            d_t.append(res.truth_d), v_t.append(res.truth_v), a_t.append(res.truth_a)
        one_step.rows[name] = {"rmse_s": rmse_one_step(d_p, d_t), "rmse_v": rmse_one_step(v_p, v_t),
                               "rmse_a": rmse_one_step(a_p, a_t)}
    one_step.counts = {"pairs": len(ids)}

    rollouts = {}
    for name, f in followers.items():
        k = k_max if getattr(f, "stochastic", False) else 1
        rollouts[name] = {p.pair_id: open_loop_rollout(f, p, None, k, [seed, j])
                          for j, p in enumerate(test.pairs)}

    per_k, curve = {}, []
    truth = {p.pair_id: p for p in test.pairs}
    for k in ks:
        sub = {n: {pid: r[:k] for pid, r in per.items()} for n, per in rollouts.items()}
        keep = fair_filter(ids, sub, [n for n, f in followers.items() if getattr(f, "stochastic", False)])
        rep = EvalReport(k=k, counts={"pairs": len(ids), "fair": len(keep)})
        for name, per in sub.items():
            if k > 1 and not getattr(followers[name], "stochastic", False):
                continue
            vals = [open_loop_metrics(per[pid], truth[pid].x_f, truth[pid].v_f, truth[pid].spacing)
                    for pid in keep]
            row = {m: float(np.mean([v[m] for v in vals])) if vals else float("nan")
                   for m in ("min_dtw_s", "min_dtw_v", "min_ade", "min_fde")}
            row["overlap_rate"] = overlap_rate([per[pid][0] for pid in ids])
            rep.rows[name] = row
            curve.append({"model": name, "k": k, **row})
        per_k[k] = rep

    gt = [derive_states(p) for p in test.pairs]
    generated = {}
    if cfg.get("model"):
        model = next(f.model for f in followers.values() if isinstance(f, MCCFFollower))
        for name, per in rollouts.items():
            generated[name] = [_state_rows(per[pid][0]) for pid in ids if len(per[pid][0]) >= 2]
        prob = prob_report(model, gt, generated)
    else:
        prob = None

    doc = {"one_step": one_step.to_dict(), "open_loop": {str(k): r.to_dict() for k, r in per_k.items()}}
    if prob is not None:
        doc["probability"] = prob.summary()
    _dump_json(doc, out / "evaluation.json")
    text = ["One-step prediction (K = 1)", format_table(one_step, ("rmse_s", "rmse_v", "rmse_a"))]
    for k, rep in per_k.items():
        text += ["", f"Open-loop, K = {k} ({rep.counts['fair']} of {rep.counts['pairs']} pairs)",
                 format_table(rep, ("min_dtw_s", "min_dtw_v", "min_ade", "min_fde", "overlap_rate"))]
    if prob is not None:
        text += ["", "Geometric-mean transition probability vs ground truth", format_prob_table(prob)]
    (out / "evaluation.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    with open(out / "k_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["model", "k", "min_dtw_s", "min_dtw_v", "min_ade", "min_fde", "overlap_rate"])
        w.writeheader()
        w.writerows(curve)
    print("\n".join(text))
    return EXIT_OK


# ---- simulate -----------------------------------------------------------

def _ring_model(source):
    """Follower from a config entry: a model-name string, a params doc, or an MC-CF model file."""
    if source is None or source == "idm":
        return IDMParams()
    if isinstance(source, str):
        p = Path(source)
        with open(p, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema") == persistence.SCHEMA:
            return MCCFFollower(persistence.model_from_dict(doc))
        return params_from_config(doc)
    if source.get("type") == "mccf":
        ic = InferenceConfig(mode=source.get("mode", "stochastic"), conservative=source.get("conservative", False))
        return MCCFFollower(persistence.load_model(source["path"]), ic)
    return params_from_config(source)


def cmd_simulate(cfg: dict) -> int:
    out = _out_dir(cfg)
    model = _ring_model(cfg.get("ring_model"))
    if cfg.get("scenario_file"):
        doc = _load_config(cfg["scenario_file"])
        pert = doc.pop("perturbation", None)
        ring = RingConfig(model=model, perturbation=PerturbationProfile(**pert) if pert else None, **doc)
    else:
        name = cfg.get("scenario", "normal-equilibrium")
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        ring = scenario_config(name, model)
    overrides = {k: cfg[k] for k in ("trials", "horizon") if k in cfg}
    ring = replace(ring, seed=cfg["seed"], **overrides)
    if cfg.get("equilibrium_start") and isinstance(model, IDMParams):
        ring = replace(ring, v_start=idm_equilibrium_speed(model, ring.n_vehicles, ring.length,
                                                           ring.vehicle_length))
    every = int(cfg.get("record_every", 10))
    res = run_experiment(ring, record_every=every, threads=int(cfg["threads"]))
    stats = {**res.to_dict(), "config": config_to_dict(ring)}
    _dump_json(stats, out / "stats.json")
    write_trials_csv(res.trials, out / "trajectories.csv")
    if cfg.get("svg", True):
        for k, rec in enumerate(res.trials):
            write_spacetime_svg(rec, ring.length, out / f"spacetime_trial{k:02d}.svg")
    print(f"collisions per trial: {res.mean:.2f} +/- {res.std:.2f} over {len(res.counts)} trials")
    return EXIT_OK


# ---- wiring -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mccf", description="Markov-chain car-following toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        return p

    p = common(sub.add_parser("ingest", help="parse, clean and split trajectory CSVs"))
    p.add_argument("--input", nargs="+")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = common(sub.add_parser("train", help="train an MC-CF model"))
    p.add_argument("--train")
    p.add_argument("--ranges", choices=["urban", "extended"])
    p.add_argument("--n-min", dest="n_min", type=int)
    p.add_argument("--augment-solo", dest="augment_solo", action="store_true", default=None)

    p = common(sub.add_parser("calibrate", help="calibrate parametric baselines"))
    p.add_argument("--train")
    p.add_argument("--models", help="comma-separated model names")

    p = common(sub.add_parser("evaluate", help="one-step, open-loop and likelihood evaluation"))
    p.add_argument("--test")
    p.add_argument("--model", help="MC-CF model file")
    p.add_argument("--calibrations", nargs="*")
    p.add_argument("--k", type=lambda s: [int(x) for x in s.split(",")])

    p = common(sub.add_parser("simulate", help="ring-road experiments"))
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--scenario-file", dest="scenario_file")
    p.add_argument("--ring-model", dest="ring_model", help="'idm', a params JSON or an MC-CF model file")
    p.add_argument("--trials", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--equilibrium-start", dest="equilibrium_start", action="store_true", default=None)
    return parser


COMMANDS = {
    "ingest": (cmd_ingest, ["input", "test_fraction"]),
    "train": (cmd_train, ["train", "ranges", "n_min", "augment_solo"]),
    "calibrate": (cmd_calibrate, ["train", "models"]),
    "evaluate": (cmd_evaluate, ["test", "model", "calibrations", "k"]),
    "simulate": (cmd_simulate, ["scenario", "scenario_file", "ring_model", "trials", "horizon",
                                "equilibrium_start"]),
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, keys = COMMANDS[args.command]
    try:
        cfg = _resolve(args, keys)
        return fn(cfg)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CalibrationError, DegenerateDistributionError, FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, TrainingError, persistence.ModelFormatError, ValueError, KeyError,
            TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
