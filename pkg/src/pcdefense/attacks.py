"""Gradient-based adversarial example generation against a victim model.

Non-targeted: fgsm (one signed step), bim (iterated signed steps), pgd
(random start in the eps-ball, projected steps). Targeted: cw, iterative
descent on cross-entropy-to-target plus an L2 perturbation penalty, keeping
the smallest successful perturbation seen.

All attacks operate on the raw [0,1] pixel scale and are deterministic
given (model, input, config); pgd randomness is derived per image index.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ffnet
from . import numkernel as nk
from .errors import ValidationError

METHODS = ("fgsm", "bim", "pgd", "cw")


@dataclass
class AttackConfig:
    method: str = "fgsm"
    eps: float = 0.75
    steps: int = 1
    step_size: float | None = None  # bim/pgd step, cw descent rate
    cw_lambda: float = 1e-2
    cw_confidence_stop: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown attack method {self.method!r}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValidationError(f"eps must be in [0,1], got {self.eps}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValidationError(f"step_size must be > 0, got {self.step_size}")
        if self.cw_lambda < 0:
            raise ValidationError(f"cw_lambda must be >= 0, got {self.cw_lambda}")

    @classmethod
    def defaults(cls, method: str, eps: float = 0.75, seed: int = 0, **kw) -> "AttackConfig":
        table = {
            "fgsm": dict(steps=1),
            "bim": dict(steps=10),
            "pgd": dict(steps=40),
            "cw": dict(steps=1000, step_size=0.01),
        }
        return cls(method=method, eps=eps, seed=seed, **{**table[method], **kw})


@dataclass
class AdvRecord:
    """One attack attempt; image arrays ride along outside the JSON fields."""

    record_id: str
    method: str
    image_index: int
    true_label: int
    target: int | None
    pred: int
    success: bool
    targeted_success: bool | None
    linf: float
    l2: float
    steps: int
    wall_time_s: float = 0.0
    x: np.ndarray = field(repr=False, default=None)
    z: np.ndarray = field(repr=False, default=None)

    def json_dict(self) -> dict:
        # wall time is deliberately excluded: manifests must be byte-identical
        # across reruns; timing lives in the sweep summary instead
        return {
            "record_id": self.record_id,
            "method": self.method,
            "image_index": self.image_index,
            "true_label": self.true_label,
            "target": self.target,
            "pred": self.pred,
            "success": self.success,
            "targeted_success": self.targeted_success,
            "linf": self.linf,
            "l2": self.l2,
            "steps": self.steps,
        }


def _record_id(method: str, image_index: int, target) -> str:
    return f"{method}:{image_index}" if target is None else f"{method}:{image_index}:t{target}"


def _as_image_batch(model, x) -> np.ndarray:
    x = nk.as_f64(x)
    if x.shape == model.input_shape:
        return x[None]
    if x.ndim == 4 and x.shape[1:] == model.input_shape:
        return x
    raise ValidationError(f"attack input {x.shape} does not match model shape {model.input_shape}")


def _signed_grad(model, z, labels):
    g = ffnet.input_grad(model, z, nk.onehot(labels, model.k))
    return np.sign(g)


def _finish(method, model, x, z, indices, labels, targets, steps, elapsed):
    """Build records from final adversarial batches."""
    pred, _ = ffnet.predict(model, z)
    n = x.shape[0]
    per = elapsed / max(n, 1)
    flat_x = x.reshape(n, -1)
    flat_z = z.reshape(n, -1)
    linf = np.abs(flat_z - flat_x).max(axis=1) if flat_x.size else np.zeros(n)
    l2 = np.linalg.norm(flat_z - flat_x, axis=1)
    records = []
    for i in range(n):
        t = None if targets is None else int(targets[i])
        records.append(
            AdvRecord(
                record_id=_record_id(method, int(indices[i]), t),
                method=method,
                image_index=int(indices[i]),
                true_label=int(labels[i]),
                target=t,
                pred=int(pred[i]),
                success=bool(pred[i] != labels[i]),
                targeted_success=None if t is None else bool(pred[i] == t),
                linf=float(linf[i]),
                l2=float(l2[i]),
                steps=int(steps[i]) if np.ndim(steps) else int(steps),
                wall_time_s=per,
                x=x[i],
                z=z[i],
            )
        )
    return records


def _fgsm_batch(model, x, labels, eps):
    z = np.clip(x + eps * _signed_grad(model, x, labels), 0.0, 1.0)
    return z


def _bim_batch(model, x, labels, eps, steps, alpha=None):
    alpha = eps / steps if alpha is None else alpha
    z = x.copy()
    for _ in range(steps):
        z = z + alpha * _signed_grad(model, z, labels)
        z = x + np.clip(z - x, -eps, eps)
        z = np.clip(z, 0.0, 1.0)
    return z


def _pgd_batch(model, x, labels, indices, eps, steps, seed, alpha=None):
    alpha = 2.5 * eps / steps if alpha is None else alpha
    noise = np.stack(
        [np.random.default_rng([seed, int(ix)]).uniform(-eps, eps, size=x.shape[1:]) for ix in indices]
    )
    z = np.clip(x + noise, 0.0, 1.0)
    for _ in range(steps):
        z = z + alpha * _signed_grad(model, z, labels)
        z = x + np.clip(z - x, -eps, eps)
        z = np.clip(z, 0.0, 1.0)
    return z


def _cw_batch(model, x, labels, targets, cfg: AttackConfig):
    """Targeted descent; keeps the smallest-L2 misclassifying iterate per row.

    Rows that reach the confidence stop are dropped from further forward and
    backward passes.
    """
    n = x.shape[0]
    lr = cfg.step_size or 0.01
    best_z = x.copy()
    best_l2 = np.full(n, np.inf)
    steps_used = np.zeros(n, dtype=np.int64)
    final_z = np.clip(x.copy(), 0.0, 1.0)

    live = np.arange(n)  # original row ids still being optimized
    xl, tl, yl = x.copy(), targets.copy(), labels.copy()
    delta = np.zeros_like(x)
    for step in range(cfg.steps + 1):
        z = np.clip(xl + delta, 0.0, 1.0)
        pred, probs = ffnet.predict(model, z)
        mis = pred != yl
        l2 = np.linalg.norm((z - xl).reshape(len(live), -1), axis=1)
        better = mis & (l2 < best_l2[live])
        rows = live[better]
        best_l2[rows] = l2[better]
        best_z[rows] = z[better]
        p_t = probs[np.arange(len(live)), tl]
        rest = probs.copy()
        rest[np.arange(len(live)), tl] = -np.inf
        margin = p_t - rest.max(axis=1)
        hit = (pred == tl) & (margin >= cfg.cw_confidence_stop)
        if step == cfg.steps or hit.all():
            steps_used[live] = step
            final_z[live] = z
            break
        if hit.any():
            done = live[hit]
            steps_used[done] = step
            final_z[done] = z[hit]
            keep = ~hit
            live, xl, tl, yl, delta = live[keep], xl[keep], tl[keep], yl[keep], delta[keep]
            z = z[keep]
        g = ffnet.input_grad(model, z, nk.onehot(tl, model.k))
        # proximal step for the quadratic penalty: stable for any lambda and
        # equal to the explicit step to first order in lr*lambda
        delta = (delta - lr * g) / (1.0 + 2.0 * lr * cfg.cw_lambda)
        # keep z = x + delta inside the image box
        delta = np.clip(xl + delta, 0.0, 1.0) - xl
    found = np.isfinite(best_l2)
    out = np.where(found[:, None, None, None], best_z, final_z)
    return out, steps_used


def fgsm(model, x, y, eps: float) -> AdvRecord:
    """Single signed-gradient step of size eps, clipped to the image box."""
    x = _as_image_batch(model, x)
    t0 = time.perf_counter()
    z = _fgsm_batch(model, x, np.asarray([y]).reshape(-1), eps)
    return _finish("fgsm", model, x, z, [0], [y], None, 1, time.perf_counter() - t0)[0]


def bim(model, x, y, eps: float, steps: int = 10) -> AdvRecord:
    x = _as_image_batch(model, x)
    t0 = time.perf_counter()
    z = _bim_batch(model, x, np.asarray([y]).reshape(-1), eps, steps)
    return _finish("bim", model, x, z, [0], [y], None, steps, time.perf_counter() - t0)[0]


def pgd(model, x, y, eps: float, steps: int = 40, seed: int = 0) -> AdvRecord:
    x = _as_image_batch(model, x)
    t0 = time.perf_counter()
    z = _pgd_batch(model, x, np.asarray([y]).reshape(-1), [0], eps, steps, seed)
    return _finish("pgd", model, x, z, [0], [y], None, steps, time.perf_counter() - t0)[0]


def cw_targeted(model, x, y, target: int, cfg: AttackConfig | None = None) -> AdvRecord:
    if target == y:
        raise ValidationError(f"target {target} equals the true label")
    cfg = cfg or AttackConfig.defaults("cw")
    x = _as_image_batch(model, x)
    t0 = time.perf_counter()
    z, steps = _cw_batch(model, x, np.asarray([y]).reshape(-1), np.asarray([target]), cfg)
    return _finish("cw", model, x, z, [0], [y], [target], steps, time.perf_counter() - t0)[0]


def attack_sweep(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    indices: np.ndarray | None = None,
    configs: list[AttackConfig] | None = None,
    chunk: int = 256,
) -> tuple[list[AdvRecord], dict]:
    """Run each configured attack over the image panel.

    cw expands every image into 9 records (one per wrong target). Records are
    sorted by (method, image index, target); timing is reported per method as
    mean/std seconds per example.
    """
    images = _as_image_batch(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    indices = np.arange(len(labels)) if indices is None else np.asarray(indices)
    configs = configs or [AttackConfig.defaults(m) for m in METHODS]
    records: list[AdvRecord] = []
    for cfg in configs:
        for start in range(0, len(labels), chunk):
            x = images[start : start + chunk]
            y = labels[start : start + chunk]
            ix = indices[start : start + chunk]
            if x.size == 0:
                continue
            t0 = time.perf_counter()
            if cfg.method == "fgsm":
                z = _fgsm_batch(model, x, y, cfg.eps)
                records += _finish("fgsm", model, x, z, ix, y, None, 1, time.perf_counter() - t0)
            elif cfg.method == "bim":
                z = _bim_batch(model, x, y, cfg.eps, cfg.steps, cfg.step_size)
                records += _finish("bim", model, x, z, ix, y, None, cfg.steps, time.perf_counter() - t0)
            elif cfg.method == "pgd":
                z = _pgd_batch(model, x, y, ix, cfg.eps, cfg.steps, cfg.seed, cfg.step_size)
                records += _finish("pgd", model, x, z, ix, y, None, cfg.steps, time.perf_counter() - t0)
            else:  # cw: all 9 wrong targets per image
                xs, ys, ts, ixs = [], [], [], []
                for t in range(model.k):
                    keep = y != t
                    xs.append(x[keep])
                    ys.append(y[keep])
                    ixs.append(ix[keep])
                    ts.append(np.full(int(keep.sum()), t))
                xs = np.concatenate(xs)
                ys = np.concatenate(ys)
                ts = np.concatenate(ts)
                ixs = np.concatenate(ixs)
                t0 = time.perf_counter()
                z, steps = _cw_batch(model, xs, ys, ts, cfg)
                records += _finish("cw", model, xs, z, ixs, ys, ts, steps, time.perf_counter() - t0)
    records.sort(key=lambda r: (r.method, r.image_index, -1 if r.target is None else r.target))
    summary = sweep_summary(records)
    return records, summary


def sweep_summary(records: list[AdvRecord]) -> dict:
    out = {}
    for method in sorted({r.method for r in records}):
        rs = [r for r in records if r.method == method]
        times = np.array([r.wall_time_s for r in rs])
        out[method] = {
            "n": len(rs),
            "success_rate": float(np.mean([r.success for r in rs])),
            "time_mean_s": float(times.mean()),
            "time_std_s": float(times.std()),
        }
    return out


# --- manifest persistence ----------------------------------------------------


def write_manifest(records: list[AdvRecord], jsonl_path, sidecar_path):
    """JSON-lines manifest plus an npz sidecar holding x and z keyed by id."""
    with open(jsonl_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.json_dict(), sort_keys=True) + "\n")
    np.savez(
        sidecar_path,
        ids=np.array([r.record_id for r in records]),
        x=np.stack([r.x for r in records]) if records else np.zeros((0,)),
        z=np.stack([r.z for r in records]) if records else np.zeros((0,)),
    )


def load_manifest(jsonl_path, sidecar_path) -> list[AdvRecord]:
    with open(jsonl_path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    side = np.load(sidecar_path)
    by_id = {rid: i for i, rid in enumerate(side["ids"])}
    records = []
    for row in rows:
        i = by_id[row["record_id"]]
        records.append(AdvRecord(**row, x=side["x"][i], z=side["z"][i]))
    return records
