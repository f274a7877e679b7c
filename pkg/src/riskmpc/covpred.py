"""Recurrent covariance predictor.

A stack of five simple recurrent layers followed by two fully connected
layers (the last linear) maps the robot position plus the five nearest
tracked-feature positions to the flattened 2x2 planar covariance. The
network is rolled out over the planner's own horizon states to provide
the per-step collision-radius inflation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Covariance2, psd_correct

INPUT_DIM = 18
OUTPUT_DIM = 4


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (NaN loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class NetSpec:
    """Fixed layer order: recurrent layers, hidden FC, linear output."""

    recurrent_widths: Tuple[int, ...] = (64, 64, 64, 64, 64)
    fc_width: int = 64
    input_dim: int = INPUT_DIM
    output_dim: int = OUTPUT_DIM

    def __post_init__(self):
        if any(w < 1 for w in self.recurrent_widths) or self.fc_width < 1:
            raise ValueError("layer widths must be positive")

    @property
    def n_recurrent(self) -> int:
        return len(self.recurrent_widths)


@dataclass
class NetParams:
    """Weights plus the input/target normalization baked in at training."""

    rec: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]  # (W, Wh, b)
    fc: List[Tuple[np.ndarray, np.ndarray]]  # (W, b); last is the output layer
    input_mean: np.ndarray
    input_std: np.ndarray
    target_scale: float = 1.0


def init_params(spec: NetSpec, rng: np.random.Generator) -> NetParams:
    rec = []
    fan_in = spec.input_dim
    for w in spec.recurrent_widths:
        W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(w, fan_in))
        Wh = rng.normal(0.0, 0.5 / math.sqrt(w), size=(w, w))
        b = np.zeros(w)
        rec.append((W, Wh, b))
        fan_in = w
    fc = []
    W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(spec.fc_width, fan_in))
    fc.append((W, np.zeros(spec.fc_width)))
    W = rng.normal(0.0, math.sqrt(1.0 / spec.fc_width), size=(spec.output_dim, spec.fc_width))
    fc.append((W, np.zeros(spec.output_dim)))
    return NetParams(
        rec=rec,
        fc=fc,
        input_mean=np.zeros(spec.input_dim),
        input_std=np.ones(spec.input_dim),
        target_scale=1.0,
    )


def zero_hidden(spec: NetSpec) -> List[np.ndarray]:
    return [np.zeros(w) for w in spec.recurrent_widths]


def _forward_cached(params: NetParams, spec: NetSpec, inputs: np.ndarray, h0):
    """Run the net over a sequence, keeping everything BPTT needs."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must be (T, {spec.input_dim})")
    T = inputs.shape[0]
    h_prev = [h.copy() for h in (h0 if h0 is not None else zero_hidden(spec))]
    for h, w in zip(h_prev, spec.recurrent_widths):
        if h.shape != (w,):
            raise ValueError("hidden state shape mismatch")
    rec_z = [np.empty((T, w)) for w in spec.recurrent_widths]
    rec_h = [np.empty((T, w)) for w in spec.recurrent_widths]
    rec_in = [np.empty((T, W.shape[1])) for W, _, _ in params.rec]
    fc_z = [np.empty((T, W.shape[0])) for W, _ in params.fc]
    fc_in = [np.empty((T, W.shape[1])) for W, _ in params.fc]
    outputs = np.empty((T, spec.output_dim))
    for t in range(T):
        x = inputs[t]
        for l, (W, Wh, b) in enumerate(params.rec):
            rec_in[l][t] = x
            z = W @ x + Wh @ h_prev[l] + b
            h = np.maximum(z, 0.0)
            rec_z[l][t] = z
            rec_h[l][t] = h
            h_prev[l] = h
            x = h
        for l, (W, b) in enumerate(params.fc):
            fc_in[l][t] = x
            z = W @ x + b
            fc_z[l][t] = z
            x = np.maximum(z, 0.0) if l < len(params.fc) - 1 else z
        outputs[t] = x
    cache = (rec_in, rec_z, rec_h, fc_in, fc_z)
    return outputs, h_prev, cache


def forward(params: NetParams, spec: NetSpec, inputs: np.ndarray, h0=None):
    """Raw network outputs for a sequence of inputs.

    Returns (outputs (T, 4), final hidden states). Deterministic; no
    normalization is applied here.
    """
    outputs, h_final, _ = _forward_cached(params, spec, inputs, h0)
    return outputs, h_final


def _zero_grads(params: NetParams):
    grec = [tuple(np.zeros_like(a) for a in layer) for layer in params.rec]
    gfc = [tuple(np.zeros_like(a) for a in layer) for layer in params.fc]
    return grec, gfc


def bptt_grad(params: NetParams, spec: NetSpec, batch: Sequence[tuple], h0=None):
    """Exact gradient of the MSE over a batch of (inputs, targets) sequences.

    MSE = (1/T_total) * sum over timesteps of the squared error summed
    over the four covariance entries. Returns (rec grads, fc grads, loss).
    """
    grec, gfc = _zero_grads(params)
    total_T = sum(np.asarray(tgt).shape[0] for _, tgt in batch)
    if total_T == 0:
        raise ValueError("empty batch")
    loss = 0.0
    n_rec = spec.n_recurrent
    for inputs, targets in batch:
        targets = np.asarray(targets, dtype=float)
        outputs, _, cache = _forward_cached(params, spec, inputs, h0)
        rec_in, rec_z, rec_h, fc_in, fc_z = cache
        err = outputs - targets
        loss += float(np.sum(err**2))
        T = err.shape[0]
        dz_next = [np.zeros(w) for w in spec.recurrent_widths]
        for t in range(T - 1, -1, -1):
            d = (2.0 / total_T) * err[t]
            # fully connected stack, top down
            for l in range(len(params.fc) - 1, -1, -1):
                W, b = params.fc[l]
                if l < len(params.fc) - 1:
                    d = d * (fc_z[l][t] > 0.0)
                gW, gb = gfc[l]
                gW += np.outer(d, fc_in[l][t])
                gb += d
                d = W.T @ d
            # recurrent stack, top down, with the through-time carry
            for l in range(n_rec - 1, -1, -1):
                W, Wh, b = params.rec[l]
                dh = d + Wh.T @ dz_next[l]
                dz = dh * (rec_z[l][t] > 0.0)
                gW, gWh, gb = grec[l]
                gW += np.outer(dz, rec_in[l][t])
                h_before = rec_h[l][t - 1] if t > 0 else (
                    h0[l] if h0 is not None else np.zeros(spec.recurrent_widths[l])
                )
                gWh += np.outer(dz, h_before)
                gb += dz
                dz_next[l] = dz
                d = W.T @ dz
    return grec, gfc, loss / total_T


def flatten_params(params: NetParams) -> np.ndarray:
    parts = []
    for layer in params.rec:
        parts.extend(a.ravel() for a in layer)
    for layer in params.fc:
        parts.extend(a.ravel() for a in layer)
    return np.concatenate(parts)


def mse_loss(params: NetParams, spec: NetSpec, batch: Sequence[tuple]) -> float:
    total = 0.0
    total_T = 0
    for inputs, targets in batch:
        outputs, _ = forward(params, spec, inputs)
        targets = np.asarray(targets, dtype=float)
        total += float(np.sum((outputs - targets) ** 2))
        total_T += targets.shape[0]
    return total / total_T


def train(
    sequences: Sequence[tuple],
    spec: NetSpec,
    epochs: int = 100,
    step_size: float = 1e-3,
    seed: int = 0,
    momentum: float = 0.9,
    clip_norm: float = 5.0,
    val_fraction: float = 0.25,
):
    """Momentum gradient descent over full-episode sequences.

    `sequences` is a list of (inputs (T, 18), targets (T, 4)) episodes;
    hidden state resets at episode boundaries. Inputs are standardized
    and targets scaled to unit spread internally; the fitted constants
    travel with the returned parameters. The loss history is reported in
    original target units, one row per epoch, evaluated at the start of
    the epoch (row 0 is the untrained loss).
    """
    if not sequences:
        raise ValueError("empty dataset")
    if epochs < 1:
        raise ValueError("epochs must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(sequences))
    n_val = min(max(1, round(val_fraction * len(sequences))), len(sequences) - 1) if len(sequences) > 1 else 0
    val_idx = idx[:n_val]
    train_idx = idx[n_val:]

    train_raw = [sequences[i] for i in train_idx]
    val_raw = [sequences[i] for i in val_idx]
    all_in = np.vstack([np.asarray(s[0], dtype=float) for s in train_raw])
    all_tgt = np.vstack([np.asarray(s[1], dtype=float) for s in train_raw])
    mean = all_in.mean(axis=0)
    std = np.maximum(all_in.std(axis=0), 1e-9)
    scale = max(float(all_tgt.std()), 1e-12)

    def normalize(seqs):
        return [
            (
                (np.asarray(x, dtype=float) - mean) / std,
                np.asarray(y, dtype=float) / scale,
            )
            for x, y in seqs
        ]

    train_set = normalize(train_raw)
    val_set = normalize(val_raw)

    params = init_params(spec, rng)
    params.input_mean = mean
    params.input_std = std
    params.target_scale = scale

    vel_rec = [tuple(np.zeros_like(a) for a in layer) for layer in params.rec]
    vel_fc = [tuple(np.zeros_like(a) for a in layer) for layer in params.fc]
    history = []
    for epoch in range(epochs):
        train_mse = mse_loss(params, spec, train_set) * scale**2
        val_mse = (mse_loss(params, spec, val_set) * scale**2) if val_set else train_mse
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise TrainingDiverged(epoch)
        history.append((train_mse, val_mse))
        order = rng.permutation(len(train_set))
        for i in order:
            grec, gfc, loss = bptt_grad(params, spec, [train_set[i]])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            gnorm = math.sqrt(
                sum(float(np.sum(a**2)) for layer in grec for a in layer)
                + sum(float(np.sum(a**2)) for layer in gfc for a in layer)
            )
            fac = min(1.0, clip_norm / gnorm) if gnorm > 0.0 else 1.0
            for layer, g, v in zip(params.rec, grec, vel_rec):
                for a, ga, va in zip(layer, g, v):
                    va *= momentum
                    va -= step_size * fac * ga
                    a += va
            for layer, g, v in zip(params.fc, gfc, vel_fc):
                for a, ga, va in zip(layer, g, v):
                    va *= momentum
                    va -= step_size * fac * ga
                    a += va
    return params, history


def predict(params: NetParams, spec: NetSpec, inputs: np.ndarray, h0=None):
    """Normalized inference: standardize inputs, rescale raw outputs."""
    inputs = (np.asarray(inputs, dtype=float) - params.input_mean) / params.input_std
    outputs, h_final = forward(params, spec, inputs, h0)
    return outputs * params.target_scale, h_final


def nearest_five(robot_xyz: np.ndarray, features: Sequence, sensing_range: float):
    """The five nearest feature positions, sorted by distance ascending.

    Fewer than five visible: the farthest visible feature is repeated.
    None visible: a sentinel at the sensing range straight ahead (+x)
    fills all slots. Sorting makes the slot assignment invariant to the
    ordering of the raw feature list.
    """
    robot_xyz = np.asarray(robot_xyz, dtype=float)
    feats = [np.asarray(f, dtype=float) for f in features]
    if not feats:
        sentinel = robot_xyz + np.array([sensing_range, 0.0, 0.0])
        return [sentinel.copy() for _ in range(5)]
    d = np.array([float(np.linalg.norm(f - robot_xyz)) for f in feats])
    order = np.argsort(d, kind="stable")
    chosen = [feats[i] for i in order[:5]]
    while len(chosen) < 5:
        chosen.append(chosen[-1])
    return chosen


def build_input(robot_xyz, feature_positions) -> np.ndarray:
    """Pack robot position and exactly five feature positions into the
    18-scalar network input."""
    robot_xyz = np.asarray(robot_xyz, dtype=float).ravel()
    if robot_xyz.shape != (3,):
        raise ValueError("robot position must have 3 components")
    feats = [np.asarray(f, dtype=float).ravel() for f in feature_positions]
    if len(feats) != 5 or any(f.shape != (3,) for f in feats):
        raise ValueError("exactly five 3D feature positions required")
    return np.concatenate([robot_xyz] + feats)


def predict_horizon(
    params: NetParams,
    spec: NetSpec,
    states: Sequence,
    features: Sequence,
    hidden: Optional[List[np.ndarray]] = None,
    z_height: float = 0.3,
    sensing_range: float = 5.0,
):
    """Covariance at each planned state, PSD-corrected.

    The hidden state is carried across the horizon in open loop; the
    second return value is the hidden state after the first (current)
    step only, which is what the caller persists between control cycles.
    """
    if len(states) < 2:
        raise ValueError("horizon must contain at least two states")
    h = [x.copy() for x in (hidden if hidden is not None else zero_hidden(spec))]
    covs = []
    hidden_after_first = None
    for i, s in enumerate(states):
        robot = np.array([s.x, s.y, z_height])
        inp = build_input(robot, nearest_five(robot, features, sensing_range))
        out, h = predict(params, spec, inp[None, :], h)
        if i == 0:
            hidden_after_first = [x.copy() for x in h]
        covs.append(psd_correct(Covariance2.from_flat(out[0])))
    return covs, hidden_after_first


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: NetSpec, params: NetParams) -> None:
    """Self-describing npz checkpoint, written atomically."""
    import os
    import tempfile

    arrays = {
        "version": np.array([CHECKPOINT_VERSION]),
        "recurrent_widths": np.array(spec.recurrent_widths),
        "fc_width": np.array([spec.fc_width]),
        "input_dim": np.array([spec.input_dim]),
        "output_dim": np.array([spec.output_dim]),
        "input_mean": params.input_mean,
        "input_std": params.input_std,
        "target_scale": np.array([params.target_scale]),
    }
    for l, (W, Wh, b) in enumerate(params.rec):
        arrays[f"rec{l}_W"] = W
        arrays[f"rec{l}_Wh"] = Wh
        arrays[f"rec{l}_b"] = b
    for l, (W, b) in enumerate(params.fc):
        arrays[f"fc{l}_W"] = W
        arrays[f"fc{l}_b"] = b
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        spec = NetSpec(
            recurrent_widths=tuple(int(w) for w in data["recurrent_widths"]),
            fc_width=int(data["fc_width"][0]),
            input_dim=int(data["input_dim"][0]),
            output_dim=int(data["output_dim"][0]),
        )
        rec = [
            (data[f"rec{l}_W"], data[f"rec{l}_Wh"], data[f"rec{l}_b"])
            for l in range(spec.n_recurrent)
        ]
        fc = [(data["fc0_W"], data["fc0_b"]), (data["fc1_W"], data["fc1_b"])]
        params = NetParams(
            rec=rec,
            fc=fc,
            input_mean=data["input_mean"],
            input_std=data["input_std"],
            target_scale=float(data["target_scale"][0]),
        )
    return spec, params
