"""Recurrent discrepancy learner.

A window of N_p consecutive time steps is processed by N_p distinct
(unshared) LSTM cells chained through hidden and cell state, followed by
one shared linear output layer. Gradients are computed by hand-rolled
backpropagation through time in float64; optimization is full-batch Adam
with a stepwise learning-rate schedule and optional per-sample loss
weights on the ground-truth instants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, CoverageError, DimensionMismatchError, SolverError
from .fem import unit_mass
from .multifidelity import DiscrepancyDataset
from .upsample import UpsampleConfig, build_upsampled_epoch
from .util import format_float

__all__ = [
    "LstmCellParams",
    "RnnModel",
    "WindowPlan",
    "param_count",
    "initialize_model",
    "lstm_cell_forward",
    "rnn_forward",
    "weighted_loss",
    "sequence_loss",
    "backprop",
    "AdamState",
    "adam_init",
    "adam_step",
    "update_beta",
    "ScheduleSegment",
    "TrainConfig",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "save_history_csv",
]

# gate block order inside the stacked (4n, n) matrices and (4n,) biases
GATE_ORDER = ("input", "forget", "candidate", "output")


@dataclass(eq=False)
class LstmCellParams:
    """One cell's parameters: stacked gate matrices and biases.

    Rows 0..n-1 of ``w``/``u``/``b`` belong to the input gate, then the
    forget gate, the candidate, and the output gate. Parameter count is
    4*(2*n^2 + n).
    """

    w: np.ndarray
    u: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        n = self.w.shape[1]
        if self.w.shape != (4 * n, n) or self.u.shape != (4 * n, n) \
                or self.b.shape != (4 * n,):
            raise DimensionMismatchError(
                f"inconsistent cell parameter shapes {self.w.shape}, "
                f"{self.u.shape}, {self.b.shape}"
            )

    @property
    def n(self) -> int:
        return self.w.shape[1]


@dataclass(eq=False)
class RnnModel:
    """N_p unshared cells plus the shared linear output layer."""

    cells: list
    out_w: np.ndarray
    out_b: np.ndarray
    relu_hidden: bool = True

    def __post_init__(self):
        self.out_w = np.asarray(self.out_w, dtype=np.float64)
        self.out_b = np.asarray(self.out_b, dtype=np.float64)
        n = self.out_w.shape[0]
        if self.out_w.shape != (n, n) or self.out_b.shape != (n,):
            raise DimensionMismatchError("output layer must be n x n plus length-n bias")
        for cell in self.cells:
            if cell.n != n:
                raise DimensionMismatchError("cell width differs from output width")
        if not self.cells:
            raise ConfigError("model needs at least one cell")

    @property
    def n(self) -> int:
        return self.out_w.shape[0]

    @property
    def n_p(self) -> int:
        return len(self.cells)

    def param_items(self):
        """(name, array) pairs in the declared serialization order."""
        for j, cell in enumerate(self.cells):
            yield f"cell{j}.w", cell.w
            yield f"cell{j}.u", cell.u
            yield f"cell{j}.b", cell.b
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def copy_params(self) -> dict:
        return {name: arr.copy() for name, arr in self.param_items()}

    def restore_params(self, saved: dict):
        for name, arr in self.param_items():
            arr[...] = saved[name]


def param_count(n: int, n_p: int) -> int:
    """Total trainable parameters for width n and window length n_p."""
    if n < 1 or n_p < 1:
        raise ConfigError(f"need n >= 1 and n_p >= 1, got {n}, {n_p}")
    return n_p * 4 * (2 * n * n + n) + n * n + n


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, np.random.SeedSequence):
        return np.random.default_rng(rng)
    return np.random.default_rng(np.random.SeedSequence(int(rng)))


def initialize_model(n: int, n_p: int, rng=0, relu_hidden=True) -> RnnModel:
    """Fresh model: gate weights uniform in +-1/sqrt(n), forget-gate bias 1,
    all other biases and the whole output layer zero (so the initial
    prediction is identically zero)."""
    if n < 1 or n_p < 1:
        raise ConfigError(f"need n >= 1 and n_p >= 1, got {n}, {n_p}")
    gen = _as_generator(rng)
    scale = 1.0 / np.sqrt(n)
    cells = []
    for _ in range(n_p):
        w = gen.uniform(-scale, scale, (4 * n, n))
        u = gen.uniform(-scale, scale, (4 * n, n))
        b = np.zeros(4 * n)
        b[n:2 * n] = 1.0
        cells.append(LstmCellParams(w, u, b))
    return RnnModel(cells, np.zeros((n, n)), np.zeros(n), relu_hidden)


def lstm_cell_forward(cell: LstmCellParams, x, h, c):
    """Single-vector cell update; returns (new hidden, new cell state)."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = cell.n
    for name, v in (("x", x), ("h", h), ("c", c)):
        if v.shape != (n,):
            raise DimensionMismatchError(f"{name} has shape {v.shape}, expected ({n},)")
    pre = cell.w @ x + cell.u @ h + cell.b
    i = expit(pre[:n])
    f = expit(pre[n:2 * n])
    g = np.tanh(pre[2 * n:3 * n])
    o = expit(pre[3 * n:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


class WindowPlan:
    """Partition of a length-K instant sequence into N_p windows.

    Windows start at multiples of N_p; when K is not divisible by N_p the
    final window is right-aligned (ending at the last instant) and
    overlaps its predecessor. Each instant is owned by exactly one
    (window, position): for overlapped instants the later window wins,
    and only owned outputs enter the loss.
    """

    def __init__(self, num_instants: int, n_p: int):
        if n_p < 1:
            raise ConfigError(f"window length must be >= 1, got {n_p}")
        if num_instants < n_p:
            raise DimensionMismatchError(
                f"{num_instants} instants cannot fill a window of {n_p}"
            )
        starts = [l * n_p for l in range(num_instants // n_p)]
        if num_instants % n_p:
            starts.append(num_instants - n_p)
        self.n_p = n_p
        self.num_instants = num_instants
        self.starts = np.array(starts, dtype=np.int64)
        self.window_indices = self.starts[:, None] + np.arange(n_p)[None, :]
        self.owner_window = np.empty(num_instants, dtype=np.int64)
        self.owner_pos = np.empty(num_instants, dtype=np.int64)
        for w, st in enumerate(starts):
            self.owner_window[st:st + n_p] = w
            self.owner_pos[st:st + n_p] = np.arange(n_p)

    @property
    def num_windows(self) -> int:
        return self.starts.size


def _forward_windows(model: RnnModel, inputs, plan: WindowPlan, want_cache=False):
    """Run all windows as one batch. Returns (outputs (L, N_p, n), cache)."""
    x_wins = inputs[plan.window_indices]
    n = model.n
    n_windows = x_wins.shape[0]
    h = np.zeros((n_windows, n))
    c = np.zeros((n_windows, n))
    outputs = np.empty((n_windows, plan.n_p, n))
    cache = []
    for j, cell in enumerate(model.cells):
        x = x_wins[:, j]
        pre = x @ cell.w.T + h @ cell.u.T + cell.b
        i = expit(pre[:, :n])
        f = expit(pre[:, n:2 * n])
        g = np.tanh(pre[:, 2 * n:3 * n])
        o = expit(pre[:, 3 * n:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        hr = np.maximum(h_new, 0.0) if model.relu_hidden else h_new
        outputs[:, j] = hr @ model.out_w.T + model.out_b
        if want_cache:
            cache.append((x, h, c, i, f, g, o, tc, hr))
        h, c = h_new, c_new
    return outputs, cache


def _backward_windows(model: RnnModel, cache, d_outputs):
    """BPTT through all windows for given output gradients (L, N_p, n)."""
    n = model.n
    grads = {"out.w": np.zeros_like(model.out_w),
             "out.b": np.zeros_like(model.out_b)}
    shape = d_outputs.shape[0], n
    dh = np.zeros(shape)
    dc = np.zeros(shape)
    for j in reversed(range(model.n_p)):
        x, h_prev, c_prev, i, f, g, o, tc, hr = cache[j]
        dy = d_outputs[:, j]
        grads["out.w"] += dy.T @ hr
        grads["out.b"] += dy.sum(axis=0)
        dhr = dy @ model.out_w
        if model.relu_hidden:
            dhr = dhr * (hr > 0)
        dh = dh + dhr
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        d_pre = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f),
             dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        grads[f"cell{j}.w"] = d_pre.T @ x
        grads[f"cell{j}.u"] = d_pre.T @ h_prev
        grads[f"cell{j}.b"] = d_pre.sum(axis=0)
        dh = d_pre @ model.cells[j].u
        dc = dc * f
    return grads


def rnn_forward(model: RnnModel, window) -> np.ndarray:
    """Outputs for one window of exactly N_p input vectors.

    Hidden and cell state start at zero; cell j consumes input j and the
    state from cell j-1; every hidden state passes through the shared
    output layer. Returns an (N_p, n) array.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.n_p, model.n):
        raise DimensionMismatchError(
            f"window shape {window.shape} does not match "
            f"({model.n_p}, {model.n})"
        )
    plan = WindowPlan(model.n_p, model.n_p)
    outputs, _ = _forward_windows(model, window, plan)
    return outputs[0]


def predict_sequence(model: RnnModel, states, plan: WindowPlan = None) -> np.ndarray:
    """Owned model outputs at every instant of a state sequence."""
    states = np.asarray(states, dtype=np.float64)
    if plan is None:
        plan = WindowPlan(states.shape[0], model.n_p)
    outputs, _ = _forward_windows(model, states, plan)
    return outputs[plan.owner_window, plan.owner_pos]


def _loss_from_predictions(preds, target_map, n, want_grad):
    loss = 0.0
    d_preds = np.zeros_like(preds) if want_grad else None
    for k, (target, coef) in target_map.items():
        r = preds[k] - target
        norm = float(np.linalg.norm(r))
        loss += coef * norm
        if want_grad and norm > 0.0:
            d_preds[k] = (coef / (n * norm)) * r
    return loss / n, d_preds


def _target_map(dataset: DiscrepancyDataset, epoch_fill, beta_active,
                scale=1.0) -> dict:
    targets = {}
    for pos, k in enumerate(dataset.sample_indices):
        coef = float(dataset.beta[pos]) if beta_active else 1.0
        targets[int(k)] = (dataset.deltas[pos] / scale, coef)
    if epoch_fill:
        for k, vec in epoch_fill.items():
            if int(k) in targets:
                raise CoverageError(f"instant {k} is both sampled and upsampled")
            targets[int(k)] = (np.asarray(vec) / scale, 1.0)
    return targets


def weighted_loss(predictions, dataset: DiscrepancyDataset, epoch_fill=None) -> float:
    """Locally weighted training loss for given per-instant predictions.

    (1/n) * [sum over ground-truth instants of beta_k * ||delta_k - pred_k||
    + sum over upsampled instants of ||fill_k - pred_k||], all norms
    Euclidean (not squared). ``predictions`` is a (K, n) array over the
    whole grid or a {instant: vector} map covering every needed instant.
    """
    n = dataset.mesh.num_nodes
    targets = _target_map(dataset, epoch_fill, beta_active=True)
    if isinstance(predictions, dict):
        missing = [k for k in targets if k not in predictions]
        if missing:
            raise CoverageError(f"predictions missing at instants {missing[:5]}")
        preds = {k: np.asarray(predictions[k], dtype=np.float64) for k in targets}
        loss = 0.0
        for k, (target, coef) in targets.items():
            loss += coef * float(np.linalg.norm(preds[k] - target))
        return loss / n
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape[0] < dataset.lofi.num_instants:
        raise CoverageError(
            f"predictions cover {predictions.shape[0]} instants, "
            f"grid has {dataset.lofi.num_instants}"
        )
    loss, _ = _loss_from_predictions(predictions, targets, n, want_grad=False)
    return loss


def sequence_loss(model: RnnModel, inputs, target_map) -> float:
    """Forward pass over a full sequence plus the weighted loss; the
    finite-difference oracle and the trainer both use this path."""
    inputs = np.asarray(inputs, dtype=np.float64)
    plan = WindowPlan(inputs.shape[0], model.n_p)
    preds = predict_sequence(model, inputs, plan)
    loss, _ = _loss_from_predictions(preds, target_map, model.n, want_grad=False)
    return loss


def backprop(model: RnnModel, inputs, target_map):
    """Loss, exact parameter gradients, and per-instant predictions for a
    full input sequence and target map {instant: (target, weight)}."""
    inputs = np.asarray(inputs, dtype=np.float64)
    plan = WindowPlan(inputs.shape[0], model.n_p)
    outputs, cache = _forward_windows(model, inputs, plan, want_cache=True)
    preds = outputs[plan.owner_window, plan.owner_pos]
    loss, d_preds = _loss_from_predictions(preds, target_map, model.n, want_grad=True)
    d_outputs = np.zeros_like(outputs)
    d_outputs[plan.owner_window, plan.owner_pos] = d_preds
    grads = _backward_windows(model, cache, d_outputs)
    return loss, grads, preds


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_init(model: RnnModel) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(a) for name, a in model.param_items()},
        v={name: np.zeros_like(a) for name, a in model.param_items()},
    )


def adam_step(model: RnnModel, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied to the model in place."""
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for name, arr in model.param_items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        arr -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return model, state


def _mass_row_norms(mesh, rows):
    m = unit_mass(mesh)
    q = np.einsum("ij,ij->i", rows @ m, rows)
    return np.sqrt(np.maximum(q, 0.0))


def update_beta(dataset: DiscrepancyDataset, model: RnnModel, scales=None) -> np.ndarray:
    """Refresh the per-sample weights: beta_k = 1 + mass-norm of the
    current residual at ground-truth instant k. Always >= 1."""
    u_c = float(scales.u_c) if scales is not None else 1.0
    preds = predict_sequence(model, dataset.lofi.states / u_c) * u_c
    residuals = dataset.deltas - preds[dataset.sample_indices]
    dataset.beta = 1.0 + _mass_row_norms(dataset.mesh, residuals)
    return dataset.beta.copy()


@dataclass(frozen=True)
class ScheduleSegment:
    """A run of epochs sharing one learning rate and beta mode."""

    epochs: int
    lr: float
    beta_on: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"segment epoch count must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class TrainConfig:
    """Training settings: contiguous schedule segments, the prior's
    variance factor alpha, window length, and the root seed from which
    every random stream (initialization, per-epoch noise) derives."""

    segments: tuple
    alpha: float
    n_p: int
    seed: int = 0
    upsampling: bool = True
    relu_hidden: bool = True
    noise_as_variance: bool = False

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.n_p < 1:
            raise ConfigError(f"window length must be >= 1, got {self.n_p}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")

    @property
    def total_epochs(self) -> int:
        return sum(seg.epochs for seg in self.segments)

    def at(self, epoch: int) -> ScheduleSegment:
        acc = 0
        for seg in self.segments:
            acc += seg.epochs
            if epoch < acc:
                return seg
        raise ConfigError(f"epoch {epoch} beyond the schedule ({acc} epochs)")


def train(dataset: DiscrepancyDataset, cfg: TrainConfig, reference=None,
          scales=None, model: RnnModel = None):
    """Full-batch training loop.

    Each epoch: draw fresh upsampled states (when enabled), run all
    windows forward, refresh beta from the current predictions if the
    segment asks for it, evaluate the weighted loss, backpropagate, and
    take one Adam step. Inputs and targets are scaled by 1/u_c from
    ``scales``; ``reference`` (a dense discrepancy trajectory in physical
    units) enables the per-epoch relative error column in the history.
    Returns (model, history rows). Deterministic for a fixed config.
    """
    mesh = dataset.mesh
    n = mesh.num_nodes
    num_instants = dataset.lofi.num_instants
    u_c = float(scales.u_c) if scales is not None else 1.0
    if u_c <= 0:
        raise ConfigError(f"u_c must be positive, got {u_c}")
    inputs = dataset.lofi.states / u_c
    plan = WindowPlan(num_instants, cfg.n_p)
    if model is None:
        model = initialize_model(
            n, cfg.n_p, np.random.SeedSequence(cfg.seed, spawn_key=(0,)),
            cfg.relu_hidden,
        )
    if model.n != n or model.n_p != cfg.n_p:
        raise DimensionMismatchError(
            f"model ({model.n}, {model.n_p}) does not match dataset width {n} "
            f"and configured window {cfg.n_p}"
        )
    ucfg = UpsampleConfig(cfg.alpha, cfg.seed, cfg.noise_as_variance)
    state = adam_init(model)
    history = []

    ref_states = None
    ref_den = None
    if reference is not None:
        ref_states = np.asarray(reference.states, dtype=np.float64)
        if ref_states.shape != (num_instants, n):
            raise DimensionMismatchError("reference trajectory shape mismatch")
        ref_den = _mass_row_norms(mesh, ref_states[:-1]).sum()

    saved = None
    has_up = dataset.t_up.size > 0
    for epoch in range(cfg.total_epochs):
        seg = cfg.at(epoch)
        outputs, cache = _forward_windows(model, inputs, plan, want_cache=True)
        preds = outputs[plan.owner_window, plan.owner_pos]

        if seg.beta_on:
            residuals = dataset.deltas - preds[dataset.sample_indices] * u_c
            dataset.beta = 1.0 + _mass_row_norms(mesh, residuals)

        fill = None
        if cfg.upsampling and has_up:
            fill = build_upsampled_epoch(
                dataset, ucfg, np.random.SeedSequence(cfg.seed, spawn_key=(1, epoch))
            )
        targets = _target_map(dataset, fill, seg.beta_on, scale=u_c)
        loss, d_preds = _loss_from_predictions(preds, targets, n, want_grad=True)

        delta_l2 = float("nan")
        if ref_states is not None and ref_den > 0:
            err = preds[:-1] * u_c - ref_states[:-1]
            delta_l2 = _mass_row_norms(mesh, err).sum() / ref_den
        history.append({
            "epoch": epoch,
            "loss": loss,
            "delta_l2": delta_l2,
            "lr": seg.lr,
            "beta_mode": int(seg.beta_on),
        })

        if not np.isfinite(loss):
            if saved is not None:
                model.restore_params(saved)
            history[-1]["diverged"] = True
            break

        d_outputs = np.zeros_like(outputs)
        d_outputs[plan.owner_window, plan.owner_pos] = d_preds
        grads = _backward_windows(model, cache, d_outputs)
        saved = model.copy_params()
        adam_step(model, grads, state, seg.lr)
    return model, history


def save_history_csv(history, path):
    """Write ``epoch,loss,delta_l2,lr,beta_mode`` rows."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("epoch,loss,delta_l2,lr,beta_mode\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{format_float(row['loss'])},"
                f"{format_float(row['delta_l2'])},{format_float(row['lr'])},"
                f"{row['beta_mode']}\n"
            )


_CHECKPOINT_FORMAT = "dforge-rnn-checkpoint"


def save_checkpoint(path, model: RnnModel, scales=None, config_hash=""):
    """Write the documented checkpoint container.

    One ASCII JSON header line (sorted keys) declaring width, window
    length, array names with shapes, scaling constants, and the config
    hash; then the raw little-endian float64 array bytes in exactly the
    declared order. The layout is deliberately timestamp-free so
    identical models produce identical files.
    """
    arrays = list(model.param_items())
    header = {
        "format": _CHECKPOINT_FORMAT,
        "version": 1,
        "n": model.n,
        "n_p": model.n_p,
        "relu_hidden": bool(model.relu_hidden),
        "config_hash": config_hash,
        "scales": None if scales is None else {
            "t_c": scales.t_c, "r_xc": scales.r_xc,
            "r_yc": scales.r_yc, "u_c": scales.u_c,
        },
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, scales or None, config_hash)."""
    from .scaling import ScaleSet

    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad checkpoint header in {path}: {exc}") from exc
        if header.get("format") != _CHECKPOINT_FORMAT:
            raise ConfigError(f"{path} is not a model checkpoint")
        blob = fh.read()
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        chunk = blob[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ConfigError(f"truncated checkpoint {path} at array {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
    if offset != len(blob):
        raise ConfigError(f"trailing bytes in checkpoint {path}")
    n_p = int(header["n_p"])
    cells = [
        LstmCellParams(arrays[f"cell{j}.w"], arrays[f"cell{j}.u"], arrays[f"cell{j}.b"])
        for j in range(n_p)
    ]
    model = RnnModel(cells, arrays["out.w"], arrays["out.b"],
                     bool(header["relu_hidden"]))
    if model.n != int(header["n"]):
        raise ConfigError(f"checkpoint width mismatch in {path}")
    scales = None
    if header.get("scales") is not None:
        s = header["scales"]
        scales = ScaleSet(s["t_c"], s["r_xc"], s["r_yc"], s["u_c"])
    return model, scales, header.get("config_hash", "")
