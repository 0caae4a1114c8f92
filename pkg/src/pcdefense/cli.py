"""Command-line operator surface: train, attack, purify, evaluate, report.

All randomness flows through explicit seeds recorded in the outputs, so any
subcommand re-run with the same config produces identical files. Existing
outputs are never overwritten without --force.

Exit codes: 2 config error, 3 data error, 4 integration divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks as at
from . import dataio
from . import ffnet as ff
from . import harness as hz
from . import pcnet as pc
from .errors import DivergenceError, ModelFileError, ParseError, ValidationError

log = logging.getLogger("pcdefense")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(Exception):
    pass


def _data_root() -> Path:
    return Path(os.environ.get("PCDEFENSE_DATA_ROOT", "."))


def _out_root() -> Path:
    return Path(os.environ.get("PCDEFENSE_OUT_ROOT", "."))


def _resolve(root: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    return cfg


def _load_dataset(spec: dict) -> dataio.Dataset:
    _check_keys(spec, {"kind", "images", "labels", "batches", "name"}, "dataset")
    root = _data_root()
    kind = spec.get("kind", "mnist")
    try:
        if kind == "mnist":
            return dataio.load_mnist(
                _resolve(root, spec["images"]), _resolve(root, spec["labels"]),
                name=spec.get("name", "mnist"),
            )
        if kind == "cifar10":
            return dataio.load_cifar10(
                [_resolve(root, p) for p in spec["batches"]], name=spec.get("name", "cifar10")
            )
    except FileNotFoundError as e:
        raise ParseError(f"dataset file missing: {e}") from e
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _fresh(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"refusing to overwrite {path} (pass --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# --- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"dataset", "train", "subset", "arch", "kind"}, "train config")
    kind = args.kind or cfg.get("kind")
    arch = args.arch or cfg.get("arch")
    if kind not in ("ffnet", "pcnet"):
        raise ConfigError(f"kind must be ffnet or pcnet, got {kind!r}")
    if not arch:
        raise ConfigError("no architecture given (flag --arch or config key 'arch')")
    ds = _load_dataset(cfg["dataset"])
    tr = dict(cfg.get("train", {}))

    if "subset" in cfg:
        sub = cfg["subset"]
        _check_keys(sub, {"count", "seed"}, "subset")
        ds = dataio.subset(ds, sub["count"], sub.get("seed", 0))
        log.info("training on a %d-sample subset", len(ds))

    out = _fresh(_resolve(_out_root(), args.out), args.force)
    log_path = out.with_suffix(out.suffix + ".log.json")

    if kind == "ffnet":
        _check_keys(tr, {"batch_size", "epochs", "lr", "seed", "momentum"}, "train")
        tcfg = ff.TrainConfig(**tr)
        model = ff.build(arch, seed=tcfg.seed)
        history = ff.train(model, ds, tcfg)
        ff.save(model, out)
        train_cfg = tcfg.__dict__
    else:
        _check_keys(tr, {"batch_size", "epochs", "lr_scale", "seed", "hyper"}, "train")
        hyper = pc.PCHyper(**tr.pop("hyper", {}))
        tcfg = pc.PCTrainConfig(**tr)
        net = pc.build_pcnet(arch, hyper=hyper, seed=tcfg.seed)
        history = pc.train_pcnet(net, ds, tcfg)
        pc.save(net, out)
        train_cfg = {**tcfg.__dict__, "hyper": hyper.__dict__}

    _write_json(log_path, {"kind": kind, "arch": arch, "train": train_cfg,
                           "n_train": len(ds), "epochs": history})
    log.info("wrote %s and %s", out, log_path)
    return 0


# --- attack ------------------------------------------------------------------


def _select_panel(args, ds, part: hz.Partition | None):
    if args.panel_per_class:
        if part is None:
            raise ConfigError("--panel-per-class needs --pcnet for the partition")
        return hz.select_per_class(part, ds, args.panel_per_class, args.seed)
    if args.wrong_panel:
        if part is None:
            raise ConfigError("--wrong-panel needs --pcnet for the partition")
        rng = np.random.default_rng(args.seed)
        pool = part.wrong
        n = min(args.wrong_panel, len(pool))
        return rng.choice(pool, size=n, replace=False)
    n = min(args.limit or len(ds), len(ds))
    return np.arange(n)


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"dataset", "attacks"}, "attack config")
    ds = _load_dataset(cfg["dataset"])
    model = ff.load(args.model)
    part = None
    if args.pcnet:
        part = hz.partition(pc.load(args.pcnet), ds)
    idx = np.sort(np.asarray(_select_panel(args, ds, part)))

    configs = []
    for a in cfg.get("attacks", []):
        _check_keys(a, {"method", "eps", "steps", "step_size", "cw_lambda",
                        "cw_confidence_stop", "seed"}, "attack")
        method = a.pop("method")
        configs.append(at.AttackConfig.defaults(method, **a))
    if args.method:
        configs = [c for c in configs if c.method == args.method]
        if not configs:
            configs = [at.AttackConfig.defaults(args.method, eps=args.eps, seed=args.seed)]
    if not configs:
        raise ConfigError("no attacks configured")

    out_dir = _resolve(_out_root(), args.out_dir)
    jsonl = _fresh(out_dir / "manifest.jsonl", args.force)
    sidecar = _fresh(out_dir / "sidecar.npz", args.force)
    timing = _fresh(out_dir / "timing.json", args.force)

    records, summary = at.attack_sweep(model, ds.images[idx], ds.labels[idx], idx, configs)
    at.write_manifest(records, jsonl, sidecar)
    _write_json(timing, {"per_method": summary, "note": "wall times are hardware-bound"})
    for method, s in summary.items():
        log.info("%s: n=%d success=%.1f%% time/example=%.3gs",
                 method, s["n"], 100 * s["success_rate"], s["time_mean_s"])
    return 0


# --- purify ------------------------------------------------------------------


def cmd_purify(args) -> int:
    net = pc.load(args.pcnet)
    records = at.load_manifest(args.manifest, args.sidecar)
    out_dir = _resolve(_out_root(), args.out_dir)
    out_npz = _fresh(out_dir / "purified.npz", args.force)
    out_csv = _fresh(out_dir / "energy_traces.csv", args.force)

    z = np.stack([r.z for r in records])
    res = pc.purify(net, z.reshape(len(records), -1), record_traces=len(records) <= 64)
    np.savez(out_npz, ids=np.array([r.record_id for r in records]),
             p=res.purified.reshape(z.shape), labels=res.labels)
    import csv as _csv

    with open(out_csv, "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["record_id", "step", "phase", "energy"])
        if res.clamped.traces is not None:
            for i, r in enumerate(records):
                step = 0
                for e in res.clamped.traces[i]:
                    wr.writerow([r.record_id, step, "clamped", repr(float(e))])
                    step += 1
                for e in res.free.traces[i][1:]:
                    wr.writerow([r.record_id, step, "free", repr(float(e))])
                    step += 1
    log.info("purified %d records -> %s", len(records), out_npz)
    return 0


# --- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"dataset", "ffnet_model", "pcnet_model", "manifest", "sidecar",
                      "out_dir", "seed", "filter"}, "evaluate config")
    for key in ("dataset", "ffnet_model", "pcnet_model", "manifest", "sidecar", "out_dir"):
        if key not in cfg:
            raise ConfigError(f"evaluate config missing key {key!r}")
    ds = _load_dataset(cfg["dataset"])
    try:
        victim = ff.load(_resolve(_data_root(), cfg["ffnet_model"]))
        net = pc.load(_resolve(_data_root(), cfg["pcnet_model"]))
        records = at.load_manifest(_resolve(_data_root(), cfg["manifest"]),
                                   _resolve(_data_root(), cfg["sidecar"]))
    except FileNotFoundError as e:
        raise ParseError(f"missing input: {e}") from e

    seed = int(cfg.get("seed", 0))
    out_dir = _resolve(_out_root(), cfg["out_dir"])
    _fresh(out_dir / "report.json", args.force)

    part = hz.partition(net, ds)
    correct = set(part.correct.tolist())
    pools = {
        "correct": [r for r in records if r.image_index in correct],
        "wrong": [r for r in records if r.image_index not in correct],
    }
    for pool_name, pool_records in pools.items():
        ok = [r for r in pool_records if r.success]
        if not ok:
            log.info("pool %s: no successful records; skipping", pool_name)
            continue
        meta = {
            "victim": victim.arch_id,
            "pool": pool_name,
            "dataset": ds.name,
            "seed": seed,
            "n_attempted": len(pool_records),
            "n_successful": len(ok),
        }
        report = hz.run_phases(victim, net, ok, meta=meta)
        stem = f"report_{pool_name}" if pool_name != "correct" else "report"
        hz.emit_report(report, out_dir, stem=stem)
        hz.emit_phase_rows(report, out_dir, stem=f"phases_{pool_name}")
        hz.emit_purified(report, out_dir, stem=f"purified_{pool_name}")
        hz.emit_energy_traces(report, out_dir, stem=f"energy_traces_{pool_name}")
        comp = hz.filter_comparison(victim, net, ok, purified=report.purified,
                                    spec=hz.FilterSpec(**cfg.get("filter", {})))
        hz.emit_cosine(comp, out_dir, stem=f"cosine_{pool_name}")
        comp.pop("rows")
        _write_json(out_dir / f"filter_comparison_{pool_name}.json", comp)
        log.info("pool %s: phase misrates %.3f / %.3f / %.3f",
                 pool_name,
                 report.totals["phases"]["ffnet_z"]["mis_rate"],
                 report.totals["phases"]["pcnet_z"]["mis_rate"],
                 report.totals["phases"]["ffnet_p"]["mis_rate"])
    return 0


# --- report ------------------------------------------------------------------


def cmd_report(args) -> int:
    data = json.loads(Path(args.report).read_text())
    print(f"victim={data['meta'].get('victim')} pool={data['meta'].get('pool')} "
          f"n={data['totals']['n']}")
    print(f"{'phase':<10}{'mis_rate':>10}   A/B/C/D")
    for phase in hz.PHASES:
        ph = data["totals"]["phases"][phase]
        hist = "/".join(str(ph["hist"][c]) for c in hz.CATEGORIES)
        print(f"{phase:<10}{ph['mis_rate']:>10.4f}   {hist}")
    return 0


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pcdefense",
        description="Train models, generate adversarial examples, and evaluate "
        "predictive-coding purification.",
    )
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier and save it")
    p.add_argument("--kind", choices=["ffnet", "pcnet"], help="model family")
    p.add_argument("--arch", help="architecture id (e.g. mnist_fc, mnist_pc)")
    p.add_argument("--config", required=True, help="JSON config with dataset/train keys")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="generate adversarial examples")
    p.add_argument("--config", required=True, help="JSON config with dataset/attacks keys")
    p.add_argument("--model", required=True, help="victim model file")
    p.add_argument("--pcnet", help="settling classifier used for pool selection")
    p.add_argument("--method", choices=list(at.METHODS), help="restrict to one method")
    p.add_argument("--eps", type=float, default=0.75, help="L-inf budget in pixel units")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="attack only the first N images")
    p.add_argument("--panel-per-class", type=int, help="stratified panel from the correct pool")
    p.add_argument("--wrong-panel", type=int, help="panel size from the misclassified pool")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("purify", help="purify manifested adversarial examples")
    p.add_argument("--pcnet", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("evaluate", help="run the three-phase evaluation pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print a saved report")
    p.add_argument("--report", required=True, help="path to report.json")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (ParseError, ModelFileError, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except DivergenceError as e:
        log.error("integration diverged: %s", e)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
