"""Predictive-coding network: settling dynamics, Hebbian training, purification.

Layers 0..L hold value nodes v_i; layer 0 is the image, layer L the class
vector. Layer i+1 predicts layer i through weights M_i and bias b_i; the
prediction error eps_i is sent back up through correction weights W_i. State
evolves by explicit Euler integration of

    tau_eps * d(eps_i)/dt = v_i - M_i s(v_{i+1}) - b_i - xi * eps_i
    tau_v   * d(v_i)/dt   = -eps_i + (W_{i-1} eps_{i-1}) * s'(v_i)

with clamped layers held fixed, until the energy (xi/2) sum_i |eps_i|^2
stops changing. Parameters move only between settles, by one Euler step of
the Hebbian dynamics (eps outer s(v)).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import modelio
from .dataio import Dataset, batches
from .errors import DivergenceError, ShapeError, ValidationError
from .numkernel import as_f64, sigmoid

# activation value -> derivative, exploiting s' expressible in s for speed
_ACTS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "sigmoid": (sigmoid, lambda a: a * (1.0 - a)),
    "identity": (lambda x: x, np.ones_like),
}

PC_ARCHS = {
    "mnist_pc": [784, 128, 64, 32, 16, 10],
    "cifar_pc": [3072, 512, 16, 10],
}


@dataclass
class PCHyper:
    """Integrator constants. Time constants are in seconds, dt too."""

    tau_v: float = 0.1
    tau_eps: float = 0.1
    gamma_m: float = 0.2
    gamma_w: float = 0.2
    gamma_b: float = 0.1
    xi: float = 1.0
    dt: float = 1e-3
    max_steps: int = 2000
    purify_max_steps: int = 5000
    energy_tol: float = 1e-5
    window: int = 10
    activation: str = "tanh"

    def validate(self):
        numbers = [self.tau_v, self.tau_eps, self.gamma_m, self.gamma_w, self.gamma_b,
                   self.xi, self.dt, self.energy_tol]
        if any(x <= 0 for x in numbers) or self.max_steps < 1 or self.window < 1:
            raise ValidationError(f"hyperparameters must be positive: {self}")
        if max(self.tau_v, self.tau_eps) > min(self.gamma_m, self.gamma_w, self.gamma_b):
            raise ValidationError("state time constants must not exceed parameter time constants")
        if self.dt / min(self.tau_v, self.tau_eps) > 0.1 + 1e-12:
            raise ValidationError(
                f"dt/tau = {self.dt / min(self.tau_v, self.tau_eps):.3g} exceeds the "
                "0.1 explicit-Euler stability margin"
            )
        if self.activation not in _ACTS:
            raise ValidationError(f"unknown activation {self.activation!r}")


@dataclass
class PCTrainConfig:
    batch_size: int = 64
    epochs: int = 5
    lr_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr_scale <= 0:
            raise ValidationError(f"non-positive training config: {self}")


class PCState:
    """Per-sample value/error vectors for every layer, batched on axis 0."""

    def __init__(self, v: list[np.ndarray], eps: list[np.ndarray]):
        self.v = v
        self.eps = eps

    @property
    def batch(self) -> int:
        return self.v[0].shape[0]

    def copy(self) -> "PCState":
        return PCState([a.copy() for a in self.v], [a.copy() for a in self.eps])

    def norm(self) -> np.ndarray:
        sq = sum((a * a).sum(axis=1) for a in self.v) + sum((a * a).sum(axis=1) for a in self.eps)
        return np.sqrt(sq)


class PCNetwork:
    def __init__(self, dims: list[int], hyper: PCHyper | None = None, seed: int = 0,
                 arch_id: str = "custom", init_std: float = 0.05):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValidationError(f"bad layer sizes {dims}")
        self.hyper = hyper or PCHyper()
        self.hyper.validate()
        self.dims = list(dims)
        self.arch_id = arch_id
        rng = np.random.default_rng(seed)
        self.m = [rng.normal(0.0, init_std, size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        self.w = [rng.normal(0.0, init_std, size=(b, a)) for a, b in zip(dims[:-1], dims[1:])]
        self.b = [np.zeros(d) for d in dims[:-1]]

    @property
    def n_layers(self) -> int:
        return len(self.dims)

    def zero_state(self, batch: int) -> PCState:
        return PCState(
            [np.zeros((batch, d)) for d in self.dims],
            [np.zeros((batch, d)) for d in self.dims[:-1]],
        )


def build_pcnet(arch_id: str, hyper: PCHyper | None = None, seed: int = 0) -> PCNetwork:
    if arch_id not in PC_ARCHS:
        raise ValidationError(f"unknown pcnet arch {arch_id!r} (known: {sorted(PC_ARCHS)})")
    return PCNetwork(PC_ARCHS[arch_id], hyper=hyper, seed=seed, arch_id=arch_id)


def energy(state: PCState, xi: float = 1.0):
    """Summed squared prediction error, (xi/2) sum_i |eps_i|^2, per sample."""
    e = 0.5 * xi * sum((a * a).sum(axis=1) for a in state.eps)
    return float(e[0]) if state.batch == 1 else e


@dataclass
class SettleInfo:
    """Per-sample integration bookkeeping from one settle call."""

    energy_start: np.ndarray
    energy_end: np.ndarray
    steps: np.ndarray
    upticks: np.ndarray
    max_uptick: np.ndarray
    converged: np.ndarray
    traces: list | None = None


def _flat_input(net: PCNetwork, images) -> np.ndarray:
    x = as_f64(images)
    d0 = net.dims[0]
    if x.ndim == 1 and x.size == d0:
        return x[None]
    if x.ndim >= 2 and int(np.prod(x.shape[1:])) == d0:
        return x.reshape(x.shape[0], d0)
    raise ShapeError(f"input {np.shape(images)} does not flatten to (*, {d0})")


def settle(
    net: PCNetwork,
    input: np.ndarray | None = None,
    output: np.ndarray | None = None,
    state: PCState | None = None,
    max_steps: int | None = None,
    record_traces: bool = False,
) -> tuple[PCState, SettleInfo]:
    """Integrate the state dynamics (parameters frozen) until the energy settles.

    `input`/`output` clamp layers 0/L to the given rows. Stops per sample when
    the relative energy change stays below `energy_tol` for `window`
    consecutive steps, or at `max_steps`. Raises DivergenceError on
    non-finite state.
    """
    hp = net.hyper
    act, dact = _ACTS[hp.activation]
    L = net.n_layers - 1
    max_steps = hp.max_steps if max_steps is None else max_steps

    if input is not None:
        input = _flat_input(net, input)
    if output is not None:
        output = as_f64(output)
        if output.ndim == 1:
            output = output[None]
        if output.shape[1] != net.dims[L]:
            raise ShapeError(f"output clamp {output.shape} vs layer size {net.dims[L]}")

    sizes = [a.shape[0] for a in (input, output) if a is not None]
    if state is not None:
        sizes.append(state.batch)
    if not sizes:
        raise ValidationError("settle needs an input, an output, or a state")
    n = sizes[0]
    if any(s != n for s in sizes):
        raise ShapeError(f"batch sizes disagree: {sizes}")

    if state is None:
        state = net.zero_state(n)
    v = [a.copy() for a in state.v]
    eps = [a.copy() for a in state.eps]
    if input is not None:
        v[0] = input.copy()
    if output is not None:
        v[L] = output.copy()

    inv_te = hp.dt / hp.tau_eps
    inv_tv = hp.dt / hp.tau_v

    # result buffers indexed by original row; live arrays are compacted as
    # rows converge so late stragglers do not pay for the whole batch
    out_v = [np.empty_like(a) for a in v]
    out_eps = [np.empty_like(a) for a in eps]
    live = np.arange(n)

    e0 = 0.5 * hp.xi * sum((a * a).sum(axis=1) for a in eps)
    energy_start = e0.copy()
    energy_end = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    upticks = np.zeros(n, dtype=np.int64)
    max_uptick = np.zeros(n)
    converged = np.zeros(n, dtype=bool)
    traces: list | None = None
    if record_traces:
        traces = [[float(e0[i])] for i in range(n)]

    prev_e = e0
    streak = np.zeros(n, dtype=np.int64)

    def finish(rows_local: np.ndarray, t: int, ok: bool):
        rows = live[rows_local]
        for i in range(L + 1):
            out_v[i][rows] = v[i][rows_local]
        for i in range(L):
            out_eps[i][rows] = eps[i][rows_local]
        energy_end[rows] = prev_e[rows_local]
        steps[rows] = t
        converged[rows] = ok

    t = 0
    # overflow before the finiteness check raises is reported as divergence,
    # not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        while t < max_steps and live.size:
            t += 1
            a_vals = [None] + [act(v[i]) for i in range(1, L + 1)]
            pred = [a_vals[i + 1] @ net.m[i].T + net.b[i] for i in range(L)]
            corr = [eps[i - 1] @ net.w[i - 1].T for i in range(1, L + 1)]

            new_eps = [eps[i] + inv_te * (v[i] - pred[i] - hp.xi * eps[i]) for i in range(L)]
            for i in range(L + 1):
                if i == 0 and input is not None:
                    continue
                if i == L and output is not None:
                    continue
                if i == 0:
                    v[0] = v[0] - inv_tv * eps[0]
                elif i == L:
                    v[L] = v[L] + inv_tv * corr[L - 1] * dact(a_vals[L])
                else:
                    v[i] = v[i] + inv_tv * (-eps[i] + corr[i - 1] * dact(a_vals[i]))
            eps = new_eps

            e = 0.5 * hp.xi * sum((a * a).sum(axis=1) for a in eps)
            if not np.all(np.isfinite(e)):
                bad = int(live[np.flatnonzero(~np.isfinite(e))[0]])
                raise DivergenceError(f"non-finite state at step {t} (sample {bad})")
            rel = np.abs(e - prev_e) / np.maximum(prev_e, 1e-12)
            upticks[live] += e > prev_e
            np.maximum.at(max_uptick, live, e - prev_e)
            streak_live = streak[live]
            streak[live] = np.where(rel < hp.energy_tol, streak_live + 1, 0)
            if traces is not None:
                for j, row in enumerate(live):
                    traces[row].append(float(e[j]))
            prev_e = e

            done = streak[live] >= hp.window
            if done.any():
                finish(np.flatnonzero(done), t, True)
                keep = ~done
                if keep.any():
                    live = live[keep]
                    v = [a[keep] for a in v]
                    eps = [a[keep] for a in eps]
                    if input is not None:
                        input = input[keep]
                    if output is not None:
                        output = output[keep]
                    prev_e = prev_e[keep]
                else:
                    live = live[:0]

    if live.size:
        finish(np.arange(live.size), t, False)

    info = SettleInfo(energy_start, energy_end, steps, upticks, max_uptick, converged, traces)
    return PCState(out_v, out_eps), info


def hebbian_deltas(net: PCNetwork, state: PCState, lr_scale: float = 1.0):
    """One Euler parameter step from a settled state, averaged over the batch.

    Update for connection i touches only eps_i and s(v_{i+1}).
    """
    hp = net.hyper
    act = _ACTS[hp.activation][0]
    n = state.batch
    dm, dw, db = [], [], []
    for i in range(net.n_layers - 1):
        a_next = act(state.v[i + 1])
        outer = state.eps[i].T @ a_next / n
        dm.append(lr_scale * (hp.dt / hp.gamma_m) * outer)
        dw.append(lr_scale * (hp.dt / hp.gamma_w) * outer.T)
        db.append(lr_scale * (hp.dt / hp.gamma_b) * state.eps[i].mean(axis=0))
    return dm, dw, db


def apply_deltas(net: PCNetwork, deltas):
    dm, dw, db = deltas
    for i in range(net.n_layers - 1):
        net.m[i] += dm[i]
        net.w[i] += dw[i]
        net.b[i] += db[i]


def train_pcnet(net: PCNetwork, ds: Dataset, cfg: PCTrainConfig) -> list[dict]:
    """Clamp both ends per batch, settle, then take one Hebbian step."""
    cfg.validate()
    if ds.input_dim != net.dims[0]:
        raise ShapeError(f"dataset dim {ds.input_dim} vs network input {net.dims[0]}")
    k = net.dims[-1]
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        e_sum, e_n, step_sum = 0.0, 0, 0
        for images, labels in batches(ds, cfg.batch_size, cfg.seed + 7919 * epoch):
            x = images.reshape(images.shape[0], -1)
            y = np.zeros((labels.shape[0], k))
            y[np.arange(labels.shape[0]), labels] = 1.0
            try:
                state, info = settle(net, input=x, output=y)
            except DivergenceError as e:
                raise DivergenceError(f"epoch {epoch}: {e}") from e
            apply_deltas(net, hebbian_deltas(net, state, cfg.lr_scale))
            e_sum += float(np.sum(info.energy_end))
            e_n += len(labels)
            step_sum += int(np.sum(info.steps))
        log.append(
            {
                "epoch": epoch,
                "mean_energy": e_sum / e_n,
                "mean_steps": step_sum / e_n,
                "elapsed_s": time.perf_counter() - t0,
            }
        )
    return log


def classify(net: PCNetwork, images, chunk: int = 256) -> np.ndarray:
    """Settle with the input clamped and read argmax of the top layer."""
    x = _flat_input(net, images)
    labels = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        state, _ = settle(net, input=x[start : start + chunk])
        labels[start : start + chunk] = state.v[-1].argmax(axis=1)
    return labels


@dataclass
class PurifyResult:
    """Purified images plus the settled labels and per-stage energy records."""

    purified: np.ndarray
    labels: np.ndarray
    clamped: SettleInfo
    free: SettleInfo

    def single(self) -> np.ndarray:
        return self.purified[0]


def purify(
    net: PCNetwork,
    images,
    hold_output: bool = False,
    record_traces: bool = False,
) -> PurifyResult:
    """Two-stage purification: settle clamped to the image, then release.

    Stage 1 clamps layer 0 to the image (output free) and settles; its top
    layer gives the network's label for the input. Stage 2 removes the clamp
    (optionally re-clamping the output at its stage-1 estimate) and lets the
    dynamics rewrite the input. Returns v_0 clipped to [0,1].
    """
    x = _flat_input(net, images)
    state, info1 = settle(net, input=x, record_traces=record_traces)
    labels = state.v[-1].argmax(axis=1)
    out_clamp = state.v[-1].copy() if hold_output else None
    state2, info2 = settle(
        net,
        state=state,
        output=out_clamp,
        max_steps=net.hyper.purify_max_steps,
        record_traces=record_traces,
    )
    purified = np.clip(state2.v[0], 0.0, 1.0)
    return PurifyResult(purified, labels, info1, info2)


# --- persistence -------------------------------------------------------------


def save(net: PCNetwork, path):
    tensors = {}
    for i in range(net.n_layers - 1):
        tensors[f"m{i}"] = net.m[i]
        tensors[f"w{i}"] = net.w[i]
        tensors[f"b{i}"] = net.b[i]
    extra = {"dims": net.dims, "hyper": asdict(net.hyper)}
    modelio.save_model(path, kind="pcnet", arch=net.arch_id, tensors=tensors, extra=extra)


def load(path, arch_id: str | None = None) -> PCNetwork:
    arch, tensors, extra = modelio.load_model(path, expect_kind="pcnet", expect_arch=arch_id)
    hyper = PCHyper(**extra["hyper"])
    net = PCNetwork(extra["dims"], hyper=hyper, seed=0, arch_id=arch)
    for i in range(net.n_layers - 1):
        net.m[i][...] = tensors[f"m{i}"]
        net.w[i][...] = tensors[f"w{i}"]
        net.b[i][...] = tensors[f"b{i}"]
    return net
