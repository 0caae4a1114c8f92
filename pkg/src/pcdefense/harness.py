"""Three-phase evaluation of the purification defense.

Pipeline: partition the evaluation set by whether the predictive-coding
network classifies it correctly, attack the feed-forward victim on sampled
panels, then measure misclassification of (1) the raw adversarial examples
on the victim, (2) the adversarial examples on the settling classifier, and
(3) the purified images back on the victim. Every (record, phase) outcome
falls in exactly one category: A pred==target, B pred==true under a targeted
attack, C pred outside {true, target}, D pred==true under a non-targeted
attack.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ffnet as ffnet_mod
from . import pcnet as pcnet_mod
from .attacks import AdvRecord
from .dataio import Dataset
from .errors import ValidationError
from .filters import FilterSpec, apply_filter, cosine

SCHEMA_VERSION = 1
CATEGORIES = ("A", "B", "C", "D")
PHASES = ("ffnet_z", "pcnet_z", "ffnet_p")


@dataclass
class Partition:
    """Indices split by settling-classifier correctness."""

    correct: np.ndarray
    wrong: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.correct, self.wrong).size:
            raise ValidationError("partition halves overlap")


def partition(pcnet, ds: Dataset, chunk: int = 256) -> Partition:
    pred = pcnet_mod.classify(pcnet, ds.images, chunk=chunk)
    hit = pred == ds.labels
    return Partition(np.flatnonzero(hit), np.flatnonzero(~hit))


def select_batches(
    part: Partition,
    seed: int,
    n_batches_correct: int = 20,
    n_batches_wrong: int = 3,
    batch_size: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample evaluation slices from each pool without replacement.

    Pools smaller than the request are taken whole, with a warning.
    """
    rng = np.random.default_rng(seed)

    def draw(pool, want, name):
        if len(pool) < want:
            warnings.warn(f"{name} pool has {len(pool)} < requested {want}; taking all")
            return pool.copy()
        return rng.choice(pool, size=want, replace=False)

    return (
        draw(part.correct, n_batches_correct * batch_size, "correct"),
        draw(part.wrong, n_batches_wrong * batch_size, "wrong"),
    )


def select_per_class(part: Partition, ds: Dataset, per_class: int, seed: int) -> np.ndarray:
    """Stratified draw from the correctly-classified pool (desk-scale panels)."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(ds.k):
        pool = part.correct[ds.labels[part.correct] == c]
        if len(pool) < per_class:
            warnings.warn(f"class {c} pool has {len(pool)} < requested {per_class}; taking all")
            picked.append(pool.copy())
        else:
            picked.append(rng.choice(pool, size=per_class, replace=False))
    return np.concatenate(picked)


def categorize(targeted: bool, true_label: int, target, pred: int) -> str:
    if targeted:
        if pred == target:
            return "A"
        if pred == true_label:
            return "B"
        return "C"
    return "D" if pred == true_label else "C"


@dataclass
class PhaseReport:
    meta: dict
    per_class: dict
    totals: dict
    rows: list = field(repr=False, default_factory=list)
    purified: np.ndarray | None = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "meta": self.meta,
            "per_class": self.per_class,
            "totals": self.totals,
        }


def _aggregate(rows: list[dict], k: int) -> tuple[dict, dict]:
    per_class = {}
    for c in list(range(k)) + ["all"]:
        sel = [r for r in rows if c == "all" or r["true_label"] == c]
        entry = {"n": len(sel), "phases": {}}
        for phase in PHASES:
            hist = {cat: 0 for cat in CATEGORIES}
            mis = 0
            for r in sel:
                hist[r[f"cat_{phase}"]] += 1
                mis += r[f"pred_{phase}"] != r["true_label"]
            entry["phases"][phase] = {
                "mis_rate": mis / len(sel) if sel else 0.0,
                "hist": hist,
            }
        if c == "all":
            totals = entry
        else:
            per_class[str(c)] = entry
    return per_class, totals


def run_phases(
    ffnet,
    pcnet,
    records: list[AdvRecord],
    meta: dict | None = None,
    chunk: int = 256,
    trace_count: int = 8,
) -> PhaseReport:
    """Evaluate success-filtered records through the three phases."""
    if any(not r.success for r in records):
        raise ValidationError("run_phases expects success-filtered records")
    if not records:
        per_class, totals = _aggregate([], ffnet.k)
        return PhaseReport(meta or {}, per_class, totals, rows=[], purified=np.zeros((0,)))

    z = np.stack([r.z for r in records])
    rows = []
    purified = np.empty((len(records),) + records[0].z.shape)
    for start in range(0, len(records), chunk):
        rs = records[start : start + chunk]
        zc = z[start : start + chunk]
        pred1, _ = ffnet_mod.predict(ffnet, zc)
        res = pcnet_mod.purify(pcnet, zc.reshape(len(rs), -1),
                               record_traces=start < trace_count)
        p = res.purified.reshape(zc.shape)
        purified[start : start + chunk] = p
        pred3, _ = ffnet_mod.predict(ffnet, p)
        for j, r in enumerate(rs):
            targeted = r.target is not None
            row = {
                "record_id": r.record_id,
                "method": r.method,
                "image_index": r.image_index,
                "true_label": r.true_label,
                "target": r.target,
                "pred_ffnet_z": int(pred1[j]),
                "pred_pcnet_z": int(res.labels[j]),
                "pred_ffnet_p": int(pred3[j]),
                "energy_clamped_end": float(res.clamped.energy_end[j]),
                "energy_free_start": float(res.free.energy_start[j]),
                "energy_free_end": float(res.free.energy_end[j]),
                "free_steps": int(res.free.steps[j]),
                "free_upticks": int(res.free.upticks[j]),
            }
            for phase in PHASES:
                row[f"cat_{phase}"] = categorize(targeted, r.true_label, r.target, row[f"pred_{phase}"])
            if res.clamped.traces is not None and start + j < trace_count:
                row["trace_clamped"] = res.clamped.traces[j]
                row["trace_free"] = res.free.traces[j]
            rows.append(row)

    per_class, totals = _aggregate(rows, ffnet.k)
    return PhaseReport(meta or {}, per_class, totals, rows=rows, purified=purified)


def filter_comparison(
    ffnet,
    pcnet,
    records: list[AdvRecord],
    purified: np.ndarray | None = None,
    spec: FilterSpec | None = None,
    chunk: int = 256,
) -> dict:
    """Victim accuracy on purified images versus blurred ones, plus cosines.

    Cosines are reported in two forms: raw cos(p,x) vs cos(g,x), and the
    displacement form cos(p-z, x-z) vs cos(g-z, x-z). Records whose
    displacement is exactly zero are skipped in the displacement means.
    """
    spec = spec or FilterSpec("gaussian")
    if purified is None:
        res_rows = []
        for start in range(0, len(records), chunk):
            zs = np.stack([r.z for r in records[start : start + chunk]])
            res_rows.append(pcnet_mod.purify(pcnet, zs.reshape(len(zs), -1)).purified.reshape(zs.shape))
        purified = np.concatenate(res_rows) if res_rows else np.zeros((0,))

    rows = []
    for i, r in enumerate(records):
        g = apply_filter(r.z, spec)
        p = purified[i]
        pred_g, _ = ffnet_mod.predict(ffnet, g)
        pred_p, _ = ffnet_mod.predict(ffnet, p)
        row = {
            "record_id": r.record_id,
            "true_label": r.true_label,
            "pred_filtered": int(pred_g[0]),
            "pred_purified": int(pred_p[0]),
            "cos_p_x": cosine(p, r.x),
            "cos_g_x": cosine(g, r.x),
        }
        dp, dg, dx = (p - r.z).ravel(), (g - r.z).ravel(), (r.x - r.z).ravel()
        if np.any(dp) and np.any(dg) and np.any(dx):
            row["cos_dir_p"] = cosine(dp, dx)
            row["cos_dir_g"] = cosine(dg, dx)
        rows.append(row)

    def acc(key):
        per_class = {}
        for c in range(ffnet.k):
            sel = [r for r in rows if r["true_label"] == c]
            per_class[str(c)] = (
                float(np.mean([r[key] == r["true_label"] for r in sel])) if sel else 0.0
            )
        overall = float(np.mean([r[key] == r["true_label"] for r in rows])) if rows else 0.0
        return per_class, overall

    acc_g_class, acc_g = acc("pred_filtered")
    acc_p_class, acc_p = acc("pred_purified")
    dir_rows = [r for r in rows if "cos_dir_p" in r]
    return {
        "filter": {"kind": spec.kind, "kernel_size": spec.kernel_size, "sigma": spec.gaussian_sigma},
        "n": len(rows),
        "accuracy_purified": acc_p,
        "accuracy_filtered": acc_g,
        "accuracy_purified_per_class": acc_p_class,
        "accuracy_filtered_per_class": acc_g_class,
        "mean_cos_p_x": float(np.mean([r["cos_p_x"] for r in rows])) if rows else 0.0,
        "mean_cos_g_x": float(np.mean([r["cos_g_x"] for r in rows])) if rows else 0.0,
        "mean_cos_dir_p": float(np.mean([r["cos_dir_p"] for r in dir_rows])) if dir_rows else None,
        "mean_cos_dir_g": float(np.mean([r["cos_dir_g"] for r in dir_rows])) if dir_rows else None,
        "n_dir": len(dir_rows),
        "rows": rows,
    }


# --- emission ---------------------------------------------------------------


def _canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def emit_report(report: PhaseReport, out_dir, stem: str = "report") -> dict[str, Path]:
    """Write report.json and report.csv (one row per class x phase)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    jpath = out_dir / f"{stem}.json"
    jpath.write_text(_canon_json(report.to_json_dict()))
    paths["json"] = jpath

    cpath = out_dir / f"{stem}.csv"
    with open(cpath, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["class", "phase", "n", "mis_rate", "A", "B", "C", "D"])
        for c in sorted(report.per_class, key=int):
            entry = report.per_class[c]
            for phase in PHASES:
                ph = entry["phases"][phase]
                wr.writerow(
                    [c, phase, entry["n"], repr(ph["mis_rate"])]
                    + [ph["hist"][cat] for cat in CATEGORIES]
                )
    paths["csv"] = cpath
    return paths


def emit_phase_rows(report: PhaseReport, out_dir, stem: str = "phases") -> Path:
    """Per-record phase predictions as JSON lines (recountable)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}.jsonl"
    with open(path, "w") as fh:
        for row in report.rows:
            slim = {k: v for k, v in row.items() if not k.startswith("trace_")}
            fh.write(json.dumps(slim, sort_keys=True) + "\n")
    return path


def emit_purified(report: PhaseReport, out_dir, stem: str = "purified") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}.npz"
    np.savez(path, ids=np.array([r["record_id"] for r in report.rows]), p=report.purified)
    return path


def emit_energy_traces(report: PhaseReport, out_dir, stem: str = "energy_traces") -> Path:
    """CSV of (record, step, phase, energy) for the traced subset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["record_id", "step", "phase", "energy"])
        for row in report.rows:
            if "trace_clamped" not in row:
                continue
            step = 0
            for e in row["trace_clamped"]:
                wr.writerow([row["record_id"], step, "clamped", repr(float(e))])
                step += 1
            for e in row["trace_free"][1:]:  # first point repeats the clamped end
                wr.writerow([row["record_id"], step, "free", repr(float(e))])
                step += 1
    return path


def emit_cosine(comparison: dict, out_dir, stem: str = "cosine") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["record_id", "true_label", "pred_filtered", "pred_purified",
                     "cos_p_x", "cos_g_x", "cos_dir_p", "cos_dir_g"])
        for r in comparison["rows"]:
            wr.writerow([
                r["record_id"], r["true_label"], r["pred_filtered"], r["pred_purified"],
                repr(r["cos_p_x"]), repr(r["cos_g_x"]),
                repr(r["cos_dir_p"]) if "cos_dir_p" in r else "",
                repr(r["cos_dir_g"]) if "cos_dir_g" in r else "",
            ])
    return path
