"""Maxout networks trained with low-precision multiplier arithmetic.

The model is a stack of maxout layers (each hidden unit takes the maximum
over ``pieces`` affine filters) under a softmax output, trained by
minibatch SGD with momentum, dropout and an optional max-norm constraint.

Precision emulation happens at staging points.  Every value family that a
hardware datapath would hold in a register file (layer inputs, weighted
sums, activations, and the gradients of each) belongs to a named scale
group; whenever a tensor of that family is produced it is immediately
quantized onto the group's grid and the overflow statistics are recorded
on the group.  Multiply-accumulates between staging points run in the
float64 carrier, which plays the role of the wide accumulator: operands
are low precision, sums are not.

Parameters exist in two copies.  The master copy accumulates SGD updates
on the (wider) update grid; the propagation copy is the master requantized
onto the (narrower) propagation grid and is what forward and backward
passes actually multiply with.  Momentum velocities stay in the carrier,
since they only ever feed the master update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .data import Dataset, minibatches
from .formats import (
    ExactHost,
    FixedPoint,
    QuantFormat,
    parse_format,
    quantize_array,
)
from .scaling import ScaleGroup, ScalingPolicy, apply_policy, calibrate_exponent
from .tensor import Rng, accumulation_is_exact, matmul_ordered, mix64

__all__ = [
    "Stager",
    "RangeTrace",
    "DualParam",
    "MaxoutNetwork",
    "TrainSettings",
    "EpochRecord",
    "forward",
    "backward",
    "sgd_step",
    "apply_max_norm",
    "lr_at",
    "momentum_at",
    "train",
    "evaluate",
    "calibrate",
    "save_checkpoint",
    "load_checkpoint",
    "MaxoutClassifier",
]

_DROPOUT_SALT = 0xD0D00001
_EVAL_BATCH = 1000


# ---------------------------------------------------------------------------
# staging
# ---------------------------------------------------------------------------

class RangeTrace:
    """Largest observed magnitude per scale group (for calibration)."""

    def __init__(self) -> None:
        self.max_abs: dict[str, float] = {}

    def observe(self, group_id: str, x: np.ndarray) -> None:
        if x.size == 0:
            return
        m = float(np.max(np.abs(x)))
        if m > self.max_abs.get(group_id, -1.0):
            self.max_abs[group_id] = m


class Stager:
    """Resolves per-group formats and quantizes staged tensors.

    ``prop_format`` and ``update_format`` are the base formats.  For a
    fixed-point base the group's exponent overrides the base ``int_exp``,
    so dynamic scaling only has to move the group exponent.  ``recording``
    gates statistics collection; it is switched off during evaluation so
    policy windows see training quantizations only.
    """

    def __init__(
        self,
        prop_format: QuantFormat,
        update_format: QuantFormat,
        groups: dict[str, ScaleGroup] | None = None,
        trace: RangeTrace | None = None,
    ):
        self.prop_format = prop_format
        self.update_format = update_format
        self.groups: dict[str, ScaleGroup] = {} if groups is None else groups
        self.trace = trace
        self.recording = True

    def group(self, group_id: str) -> ScaleGroup:
        g = self.groups.get(group_id)
        if g is None:
            default = (
                self.prop_format.int_exp
                if isinstance(self.prop_format, FixedPoint)
                else 0
            )
            g = ScaleGroup(group_id, default)
            self.groups[group_id] = g
        return g

    def prop_fmt(self, group_id: str) -> QuantFormat:
        if isinstance(self.prop_format, FixedPoint):
            return FixedPoint(self.prop_format.width, self.group(group_id).exponent)
        return self.prop_format

    def update_fmt(self, group_id: str) -> QuantFormat:
        if isinstance(self.update_format, FixedPoint):
            return FixedPoint(self.update_format.width, self.group(group_id).exponent)
        return self.update_format

    def stage(self, x: np.ndarray, group_id: str) -> np.ndarray:
        """Quantize ``x`` onto its group's propagation grid."""
        if self.recording and self.trace is not None:
            self.trace.observe(group_id, x)
        result = quantize_array(x, self.prop_fmt(group_id))
        if self.recording:
            self.group(group_id).record(result)
        return result.values

    def matmul(
        self,
        a: np.ndarray,
        b: np.ndarray,
        fmt_a: QuantFormat,
        fmt_b: QuantFormat,
    ) -> np.ndarray:
        """Carrier-precision product, ordered unless provably order-free."""
        if accumulation_is_exact(fmt_a, fmt_b, a.shape[1]):
            return a @ b
        return matmul_ordered(a, b)


# ---------------------------------------------------------------------------
# parameters and model
# ---------------------------------------------------------------------------

@dataclass
class DualParam:
    """Master (update-precision) and propagation copies of one parameter."""

    master: np.ndarray
    prop: np.ndarray
    velocity: np.ndarray
    group_id: str

    @classmethod
    def create(cls, init: np.ndarray, group_id: str, stager: Stager) -> "DualParam":
        master = quantize_array(init, stager.update_fmt(group_id)).values
        prop = stager.stage(master, group_id)
        return cls(master, prop, np.zeros_like(master), group_id)

    def sync(self, stager: Stager) -> None:
        self.prop = stager.stage(self.master, self.group_id)


@dataclass
class MaxoutLayer:
    W: DualParam  # (pieces, fan_in, units)
    b: DualParam  # (pieces, units)


@dataclass
class OutputLayer:
    W: DualParam  # (fan_in, classes)
    b: DualParam  # (classes,)


class MaxoutNetwork:
    """Maxout hidden stack plus softmax output, built on a :class:`Stager`.

    Weights start Glorot-uniform, biases at zero; masters are placed on
    their update grids at construction.  Scale group ids follow the layer
    index: ``L0.output`` is the digitized input, ``L{i}.weights`` through
    ``L{i}.grad_output`` belong to hidden layer ``i``, and the softmax
    layer uses index ``len(hidden_units) + 1``.
    """

    def __init__(
        self,
        n_inputs: int,
        hidden_units: Sequence[int],
        n_classes: int,
        pieces: int,
        stager: Stager,
        rng: Rng,
    ):
        if pieces < 1:
            raise ValueError("pieces must be at least 1")
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_inputs = int(n_inputs)
        self.hidden_units = tuple(int(u) for u in hidden_units)
        self.n_classes = int(n_classes)
        self.pieces = int(pieces)
        self.stager = stager
        stager.group("L0.output")

        self.layers: list[MaxoutLayer] = []
        fan_in = self.n_inputs
        for i, units in enumerate(self.hidden_units, start=1):
            bound = np.sqrt(6.0 / (fan_in + units))
            W0 = rng.uniform((self.pieces, fan_in, units), -bound, bound)
            self.layers.append(
                MaxoutLayer(
                    W=DualParam.create(W0, f"L{i}.weights", stager),
                    b=DualParam.create(np.zeros((self.pieces, units)), f"L{i}.bias", stager),
                )
            )
            for role in ("weighted_sum", "output", "grad_weighted_sum",
                         "grad_output", "grad_weights", "grad_bias"):
                stager.group(f"L{i}.{role}")
            fan_in = units

        oid = self.out_id
        bound = np.sqrt(6.0 / (fan_in + self.n_classes))
        self.out = OutputLayer(
            W=DualParam.create(
                rng.uniform((fan_in, self.n_classes), -bound, bound),
                f"L{oid}.weights", stager,
            ),
            b=DualParam.create(np.zeros(self.n_classes), f"L{oid}.bias", stager),
        )
        for role in ("weighted_sum", "grad_weighted_sum", "grad_weights", "grad_bias"):
            stager.group(f"L{oid}.{role}")

    @property
    def out_id(self) -> int:
        return len(self.hidden_units) + 1

    def params(self) -> list[DualParam]:
        ps: list[DualParam] = []
        for layer in self.layers:
            ps.extend((layer.W, layer.b))
        ps.extend((self.out.W, self.out.b))
        return ps


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Activations:
    h0: np.ndarray                       # staged (post-dropout) input
    weighted: list[np.ndarray]           # per layer, (pieces, batch, units)
    winner: list[np.ndarray]             # per layer, (batch, units)
    hidden: list[np.ndarray]             # per layer, (batch, units), staged
    masks: list[np.ndarray | None]       # per layer, keep mask / keep prob
    logits: np.ndarray
    probs: np.ndarray


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    net: MaxoutNetwork,
    X: np.ndarray,
    train_mode: bool = False,
    rng: Rng | None = None,
    dropout_input: float = 0.0,
    dropout_hidden: float = 0.0,
) -> Activations:
    """One staged forward pass.

    Dropout is inverted (kept entries scale by 1/keep at train time) and
    applied before the relevant staging point, so every multiplication
    downstream still sees on-grid operands.  Piece ties go to the lowest
    piece index via argmax.
    """
    st = net.stager
    if train_mode and (dropout_input > 0 or dropout_hidden > 0) and rng is None:
        raise ValueError("dropout requires an rng in train mode")

    x = np.asarray(X, dtype=np.float64)
    if train_mode and dropout_input > 0:
        keep = 1.0 - dropout_input
        x = x * rng.bernoulli(x.shape, keep) / keep
    h = st.stage(x, "L0.output")
    h0 = h

    weighted: list[np.ndarray] = []
    winners: list[np.ndarray] = []
    hiddens: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    for i, layer in enumerate(net.layers, start=1):
        w_fmt = st.prop_fmt(f"L{i}.weights")
        h_fmt = st.prop_fmt(f"L{i-1}.output")
        pieces = [
            st.matmul(h, layer.W.prop[j], h_fmt, w_fmt) + layer.b.prop[j]
            for j in range(net.pieces)
        ]
        s = st.stage(np.stack(pieces), f"L{i}.weighted_sum")
        win = np.argmax(s, axis=0)
        hmax = np.take_along_axis(s, win[None], axis=0)[0]
        mask = None
        if train_mode and dropout_hidden > 0:
            keep = 1.0 - dropout_hidden
            mask = rng.bernoulli(hmax.shape, keep) / keep
            hmax = hmax * mask
        h = st.stage(hmax, f"L{i}.output")
        weighted.append(s)
        winners.append(win)
        hiddens.append(h)
        masks.append(mask)

    oid = net.out_id
    logits_raw = st.matmul(
        h, net.out.W.prop,
        st.prop_fmt(f"L{len(net.layers)}.output"),
        st.prop_fmt(f"L{oid}.weights"),
    ) + net.out.b.prop
    logits = st.stage(logits_raw, f"L{oid}.weighted_sum")
    return Activations(
        h0=h0, weighted=weighted, winner=winners, hidden=hiddens,
        masks=masks, logits=logits, probs=_softmax(logits),
    )


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per hidden layer
    out: tuple[np.ndarray, np.ndarray]


def backward(net: MaxoutNetwork, acts: Activations, y: np.ndarray) -> Gradients:
    """Staged backward pass for the mean negative log-likelihood.

    Each gradient family is quantized right after the product (or column
    sum) that produces it.  The dropout mask and the winner routing fold
    into the weighted-sum gradient's staging, so every matmul operand
    stays on a grid.
    """
    st = net.stager
    batch = len(y)
    oid = net.out_id

    onehot = np.zeros_like(acts.probs)
    onehot[np.arange(batch), np.asarray(y, dtype=np.int64)] = 1.0
    g = st.stage((acts.probs - onehot) / batch, f"L{oid}.grad_weighted_sum")

    h_last = acts.hidden[-1] if net.layers else acts.h0
    g_fmt = st.prop_fmt(f"L{oid}.grad_weighted_sum")
    h_fmt = st.prop_fmt(f"L{len(net.layers)}.output")
    w_fmt = st.prop_fmt(f"L{oid}.weights")
    dWo = st.stage(
        st.matmul(np.ascontiguousarray(h_last.T), g, h_fmt, g_fmt),
        f"L{oid}.grad_weights",
    )
    dbo = st.stage(g.sum(axis=0), f"L{oid}.grad_bias")

    layer_grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(net.layers)
    if net.layers:
        dh = st.stage(
            st.matmul(g, np.ascontiguousarray(net.out.W.prop.T), g_fmt, w_fmt),
            f"L{len(net.layers)}.grad_output",
        )
    for i in range(len(net.layers), 0, -1):
        layer = net.layers[i - 1]
        if acts.masks[i - 1] is not None:
            dh = dh * acts.masks[i - 1]
        ds = np.zeros_like(acts.weighted[i - 1])
        np.put_along_axis(ds, acts.winner[i - 1][None], dh[None], axis=0)
        ds = st.stage(ds, f"L{i}.grad_weighted_sum")

        h_prev = acts.hidden[i - 2] if i >= 2 else acts.h0
        ds_fmt = st.prop_fmt(f"L{i}.grad_weighted_sum")
        hprev_fmt = st.prop_fmt(f"L{i-1}.output")
        w_fmt = st.prop_fmt(f"L{i}.weights")
        hT = np.ascontiguousarray(h_prev.T)
        dW = np.stack(
            [st.matmul(hT, ds[j], hprev_fmt, ds_fmt) for j in range(net.pieces)]
        )
        dW = st.stage(dW, f"L{i}.grad_weights")
        db = st.stage(ds.sum(axis=1), f"L{i}.grad_bias")
        layer_grads[i - 1] = (dW, db)

        if i > 1:
            acc = np.zeros((batch, layer.W.prop.shape[1]))
            for j in range(net.pieces):
                acc = acc + st.matmul(
                    ds[j], np.ascontiguousarray(layer.W.prop[j].T), ds_fmt, w_fmt
                )
            dh = st.stage(acc, f"L{i-1}.grad_output")

    return Gradients(layers=layer_grads, out=(dWo, dbo))


def nll_loss(probs: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes."""
    p = probs[np.arange(len(y)), np.asarray(y, dtype=np.int64)]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def apply_max_norm(W: np.ndarray, limit: float) -> np.ndarray:
    """Project columns (incoming weight vectors) onto the max-norm ball.

    Works on the last two axes: column ``W[..., :, u]`` is unit ``u``'s
    incoming vector.  Columns with norm <= limit are untouched.
    """
    if limit <= 0:
        raise ValueError("max-norm limit must be positive")
    norms = np.sqrt(np.sum(W * W, axis=-2, keepdims=True))
    factor = np.where(norms > limit, limit / np.maximum(norms, 1e-300), 1.0)
    return W * factor


def sgd_step(
    net: MaxoutNetwork,
    grads: Gradients,
    lr: float,
    momentum: float,
    max_norm: float | None = None,
) -> None:
    """Momentum SGD on the masters, then one prop resync.

    velocity <- momentum * velocity - lr * grad; the master absorbs the
    velocity and is requantized onto its update grid.  The max-norm
    projection happens after that quantization, so the norm bound holds
    exactly; masters drift off-grid only by the projection factor and are
    re-gridded at the next step.
    """
    st = net.stager
    pairs: list[tuple[DualParam, np.ndarray]] = []
    for layer, (dW, db) in zip(net.layers, grads.layers):
        pairs.append((layer.W, dW))
        pairs.append((layer.b, db))
    pairs.append((net.out.W, grads.out[0]))
    pairs.append((net.out.b, grads.out[1]))

    for param, grad in pairs:
        param.velocity = momentum * param.velocity - lr * grad
        param.master = quantize_array(
            param.master + param.velocity, st.update_fmt(param.group_id)
        ).values

    if max_norm is not None:
        for layer in net.layers:
            layer.W.master = apply_max_norm(layer.W.master, max_norm)
        net.out.W.master = apply_max_norm(net.out.W.master, max_norm)

    for param, _ in pairs:
        param.sync(st)


def lr_at(epoch: int, start: float, end: float, decay_epochs: int) -> float:
    """Linearly decaying learning rate: reaches ``end`` at epoch
    ``decay_epochs`` and stays flat afterwards."""
    if decay_epochs < 1:
        return end
    frac = min(1.0, max(0.0, epoch / decay_epochs))
    return start + (end - start) * frac


def momentum_at(epoch: int, start: float, saturate: float, saturate_epoch: int) -> float:
    """Linearly saturating momentum: reaches ``saturate`` at epoch
    ``saturate_epoch`` and stays flat afterwards."""
    if saturate_epoch < 1:
        return saturate
    frac = min(1.0, max(0.0, epoch / saturate_epoch))
    return start + (saturate - start) * frac


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 100
    lr_start: float = 0.2
    lr_end: float = 0.02
    lr_decay_epochs: int = 20
    momentum_start: float = 0.5
    momentum_saturate: float = 0.7
    momentum_saturate_epoch: int = 10
    max_norm: float | None = 2.5
    dropout_input: float = 0.2
    dropout_hidden: float = 0.5
    seed: int = 0
    dynamic_scaling: bool = False
    policy: ScalingPolicy = ScalingPolicy()

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for p in (self.dropout_input, self.dropout_hidden):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout probabilities must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_error: float
    test_error: float | None
    lr: float
    momentum: float
    exponents: dict[str, int]


def evaluate(net: MaxoutNetwork, ds: Dataset) -> float:
    """Classification error rate with dropout off and stats recording off."""
    st = net.stager
    was_recording = st.recording
    st.recording = False
    try:
        wrong = 0
        for start in range(0, len(ds), _EVAL_BATCH):
            X = ds.X[start : start + _EVAL_BATCH]
            y = ds.y[start : start + _EVAL_BATCH]
            acts = forward(net, X, train_mode=False)
            wrong += int(np.count_nonzero(np.argmax(acts.probs, axis=1) != y))
    finally:
        st.recording = was_recording
    return wrong / len(ds)


def predict_proba_batched(net: MaxoutNetwork, X: np.ndarray) -> np.ndarray:
    st = net.stager
    was_recording = st.recording
    st.recording = False
    try:
        chunks = [
            forward(net, X[s : s + _EVAL_BATCH], train_mode=False).probs
            for s in range(0, len(X), _EVAL_BATCH)
        ]
    finally:
        st.recording = was_recording
    return np.concatenate(chunks, axis=0)


def _apply_scaling(net: MaxoutNetwork, policy: ScalingPolicy) -> None:
    """One policy pass over every group, then re-grid the parameters."""
    st = net.stager
    moved = False
    for gid in sorted(st.groups):
        if apply_policy(st.groups[gid], policy) != 0:
            moved = True
    if moved:
        for param in net.params():
            param.master = quantize_array(
                param.master, st.update_fmt(param.group_id)
            ).values
            param.sync(st)


def train(
    net: MaxoutNetwork,
    train_ds: Dataset,
    settings: TrainSettings,
    eval_ds: Dataset | None = None,
) -> list[EpochRecord]:
    """Minibatch SGD training with per-epoch error logging.

    Row 0 records the untrained network.  With ``dynamic_scaling`` on, the
    scaling policy runs every ``policy.period`` training examples and the
    parameters are re-gridded whenever an exponent moves.  Zero epochs
    just evaluates the initial network.
    """
    st = net.stager
    drop_rng = Rng(mix64(settings.seed) ^ _DROPOUT_SALT)

    def record(epoch: int) -> EpochRecord:
        return EpochRecord(
            epoch=epoch,
            train_error=evaluate(net, train_ds),
            test_error=None if eval_ds is None else evaluate(net, eval_ds),
            lr=lr_at(epoch, settings.lr_start, settings.lr_end, settings.lr_decay_epochs),
            momentum=momentum_at(
                epoch, settings.momentum_start, settings.momentum_saturate,
                settings.momentum_saturate_epoch,
            ),
            exponents={gid: g.exponent for gid, g in sorted(st.groups.items())},
        )

    log = [record(0)]
    examples_since_policy = 0
    for epoch in range(settings.epochs):
        lr = lr_at(epoch, settings.lr_start, settings.lr_end, settings.lr_decay_epochs)
        mom = momentum_at(
            epoch, settings.momentum_start, settings.momentum_saturate,
            settings.momentum_saturate_epoch,
        )
        for Xb, yb in minibatches(train_ds, settings.batch_size, settings.seed, epoch):
            acts = forward(
                net, Xb, train_mode=True, rng=drop_rng,
                dropout_input=settings.dropout_input,
                dropout_hidden=settings.dropout_hidden,
            )
            grads = backward(net, acts, yb)
            sgd_step(net, grads, lr, mom, settings.max_norm)
            if settings.dynamic_scaling:
                examples_since_policy += len(yb)
                if examples_since_policy >= settings.policy.period:
                    examples_since_policy %= settings.policy.period
                    _apply_scaling(net, settings.policy)
        log.append(record(epoch + 1))
    return log


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def calibrate(
    n_inputs: int,
    hidden_units: Sequence[int],
    n_classes: int,
    pieces: int,
    train_ds: Dataset,
    settings: TrainSettings,
    calibration_epochs: int = 1,
    seed: int | None = None,
) -> dict[str, int]:
    """Find initial scale exponents from an exact-precision training trace.

    Trains a throwaway carrier-precision network for a few epochs while
    tracking the largest magnitude each scale group sees, then converts
    those ranges to exponents (one spare bit above the observed maximum).
    The low-precision run then starts over from a fresh initialization.
    """
    if len(train_ds) == 0:
        raise ValueError("no calibration data")
    trace = RangeTrace()
    stager = Stager(ExactHost(), ExactHost(), trace=trace)
    rng = Rng(settings.seed if seed is None else seed)
    net = MaxoutNetwork(n_inputs, hidden_units, n_classes, pieces, stager, rng)
    cal_settings = TrainSettings(
        epochs=calibration_epochs,
        batch_size=settings.batch_size,
        lr_start=settings.lr_start,
        lr_end=settings.lr_end,
        lr_decay_epochs=settings.lr_decay_epochs,
        momentum_start=settings.momentum_start,
        momentum_saturate=settings.momentum_saturate,
        momentum_saturate_epoch=settings.momentum_saturate_epoch,
        max_norm=settings.max_norm,
        dropout_input=settings.dropout_input,
        dropout_hidden=settings.dropout_hidden,
        seed=settings.seed,
        dynamic_scaling=False,
    )
    train(net, train_ds, cal_settings)
    return {
        gid: calibrate_exponent(trace.max_abs.get(gid, 0.0))
        for gid in sorted(stager.groups)
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"LPCK"
_CKPT_VERSION = 1


def save_checkpoint(path, net: MaxoutNetwork, rng_state: int = 0) -> None:
    """Flat binary dump: masters, group exponents, rng state."""
    parts = [struct.pack(">4sI", _CKPT_MAGIC, _CKPT_VERSION)]
    params = net.params()
    parts.append(struct.pack(">IQ", len(params), rng_state & 0xFFFFFFFFFFFFFFFF))
    for p in params:
        name = p.group_id.encode("ascii")
        arr = np.ascontiguousarray(p.master, dtype=">f8")
        parts.append(struct.pack(">H", len(name)))
        parts.append(name)
        parts.append(struct.pack(">B", arr.ndim))
        parts.append(struct.pack(f">{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    groups = sorted(net.stager.groups.items())
    parts.append(struct.pack(">I", len(groups)))
    for gid, g in groups:
        name = gid.encode("ascii")
        parts.append(struct.pack(">H", len(name)))
        parts.append(name)
        parts.append(struct.pack(">i", g.exponent))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, net: MaxoutNetwork) -> int:
    """Restore masters and exponents saved by :func:`save_checkpoint`.

    The network must have the same architecture.  Returns the stored rng
    state.  Props are resynced (without recording) after loading.
    """
    raw = open(path, "rb").read()
    off = 0

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    magic, version = take(">4sI")
    if magic != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n_params, rng_state = take(">IQ")
    params = {p.group_id: p for p in net.params()}
    if n_params != len(params):
        raise ValueError("checkpoint parameter count does not match the network")
    for _ in range(n_params):
        (name_len,) = take(">H")
        name = raw[off : off + name_len].decode("ascii")
        off += name_len
        (ndim,) = take(">B")
        shape = take(f">{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=">f8", count=count, offset=off).astype(np.float64)
        off += count * 8
        p = params.get(name)
        if p is None:
            raise ValueError(f"checkpoint has unknown parameter group {name}")
        if tuple(shape) != p.master.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.master = arr.reshape(shape)
    (n_groups,) = take(">I")
    for _ in range(n_groups):
        (name_len,) = take(">H")
        name = raw[off : off + name_len].decode("ascii")
        off += name_len
        (exp,) = take(">i")
        net.stager.group(name).exponent = exp

    st = net.stager
    was_recording = st.recording
    st.recording = False
    try:
        for p in net.params():
            p.velocity = np.zeros_like(p.master)
            p.sync(st)
    finally:
        st.recording = was_recording
    return rng_state


# ---------------------------------------------------------------------------
# sklearn estimator
# ---------------------------------------------------------------------------

class MaxoutClassifier(ClassifierMixin, BaseEstimator):
    """Maxout network classifier with emulated low-precision arithmetic.

    Parameters mirror :class:`TrainSettings`; formats are descriptor
    strings (``"exact"``, ``"float:5.10"``, ``"fixed:10@5"``).  With
    ``dynamic_scaling=True`` the fixed-point scale of every tensor family
    is calibrated from a short carrier-precision run and then adapted
    during training from overflow rates.

    Examples
    --------
    >>> clf = MaxoutClassifier(hidden_units=(16,), epochs=5, seed=1)
    >>> clf.fit(X_train, y_train).score(X_test, y_test)  # doctest: +SKIP
    """

    def __init__(
        self,
        hidden_units: Sequence[int] = (200, 200),
        pieces: int = 2,
        epochs: int = 20,
        batch_size: int = 100,
        lr_start: float = 0.2,
        lr_end: float = 0.02,
        lr_decay_epochs: int = 20,
        momentum_start: float = 0.5,
        momentum_saturate: float = 0.7,
        momentum_saturate_epoch: int = 10,
        max_norm: float | None = 2.5,
        dropout_input: float = 0.2,
        dropout_hidden: float = 0.5,
        prop_format: str = "exact",
        update_format: str = "exact",
        dynamic_scaling: bool = False,
        max_overflow_rate: float = 1e-4,
        scaling_period: int = 10_000,
        calibration_epochs: int = 1,
        initial_exponents: dict[str, int] | None = None,
        seed: int = 0,
    ):
        self.hidden_units = hidden_units
        self.pieces = pieces
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_decay_epochs = lr_decay_epochs
        self.momentum_start = momentum_start
        self.momentum_saturate = momentum_saturate
        self.momentum_saturate_epoch = momentum_saturate_epoch
        self.max_norm = max_norm
        self.dropout_input = dropout_input
        self.dropout_hidden = dropout_hidden
        self.prop_format = prop_format
        self.update_format = update_format
        self.dynamic_scaling = dynamic_scaling
        self.max_overflow_rate = max_overflow_rate
        self.scaling_period = scaling_period
        self.calibration_epochs = calibration_epochs
        self.initial_exponents = initial_exponents
        self.seed = seed

    def _settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            lr_decay_epochs=self.lr_decay_epochs,
            momentum_start=self.momentum_start,
            momentum_saturate=self.momentum_saturate,
            momentum_saturate_epoch=self.momentum_saturate_epoch,
            max_norm=self.max_norm,
            dropout_input=self.dropout_input,
            dropout_hidden=self.dropout_hidden,
            seed=self.seed,
            dynamic_scaling=self.dynamic_scaling,
            policy=ScalingPolicy(self.max_overflow_rate, self.scaling_period),
        )

    def fit(self, X, y, eval_set: tuple[np.ndarray, np.ndarray] | None = None):
        X, y = validate_data(self, X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        ds = Dataset(X, y_idx.astype(np.int64))
        eval_ds = None
        if eval_set is not None:
            Xe = check_array(eval_set[0], dtype=np.float64)
            ye = np.searchsorted(self.classes_, eval_set[1]).astype(np.int64)
            eval_ds = Dataset(Xe, ye)

        settings = self._settings()
        prop_fmt = parse_format(self.prop_format)
        update_fmt = parse_format(self.update_format)

        exponents: dict[str, int] | None = None
        if self.dynamic_scaling:
            if not isinstance(prop_fmt, FixedPoint) or not isinstance(update_fmt, FixedPoint):
                raise ValueError("dynamic scaling requires fixed-point formats")
            if self.initial_exponents is not None:
                exponents = dict(self.initial_exponents)
            else:
                exponents = calibrate(
                    X.shape[1], self.hidden_units, len(self.classes_), self.pieces,
                    ds, settings, calibration_epochs=self.calibration_epochs,
                )

        stager = Stager(prop_fmt, update_fmt)
        if exponents is not None:
            for gid, exp in exponents.items():
                stager.group(gid).exponent = exp
        net = MaxoutNetwork(
            X.shape[1], self.hidden_units, len(self.classes_), self.pieces,
            stager, Rng(self.seed),
        )
        self.log_ = train(net, ds, settings, eval_ds)
        self.network_ = net
        self.groups_ = stager.groups
        self.calibration_exponents_ = exponents
        self.n_iter_ = settings.epochs
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return predict_proba_batched(self.network_, X)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]
