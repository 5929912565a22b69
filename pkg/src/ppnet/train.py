"""Optimization loop, checkpoints, evaluation helpers and experiment sweeps."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import SequenceSet
from .exceptions import CheckpointError, DivergenceError, NumericFault
from .loss import trace_loss
from .metrics import ssim
from .network import PPNet
from .nn import make_rng

__all__ = [
    "AdamState",
    "optimizer_step",
    "clip_global_norm",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "LogRow",
    "TrainingLog",
    "train",
    "model_from_checkpoint",
    "evaluate_next_frame",
    "copy_last_ssim",
    "rewindow",
    "sweep_p",
    "sweep_seq_len",
]

logger = logging.getLogger(__name__)

MAGIC = b"PPNC"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return total


def optimizer_step(params: Dict[str, T.Tensor], grads: Dict[str, np.ndarray], state: AdamState,
                   lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected adaptive-moment update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    params: Dict[str, np.ndarray]
    moments: AdamState
    step: int = 0

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = _pack_str(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    records = [(name, arr) for name, arr in ckpt.params.items()]
    records += [("adam.m/" + name, arr) for name, arr in ckpt.moments.m.items()]
    records += [("adam.v/" + name, arr) for name, arr in ckpt.moments.v.items()]
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(ckpt.fingerprint),
             struct.pack("<QQ", ckpt.step, ckpt.moments.step), _pack_str(ckpt.config.canonical_json()),
             struct.pack("<I", len(records))]
    parts += [_pack_array(name, arr) for name, arr in records]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = r.string()
    step, adam_step = r.unpack("<QQ")
    config = TrainConfig.from_flat(json.loads(r.string()))
    if config.fingerprint() != fingerprint:
        raise CheckpointError("stored fingerprint does not match stored config")
    (count,) = r.unpack("<I")
    params, m, v = {}, {}, {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    return Checkpoint(config, params, AdamState(m, v, adam_step), step)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> PPNet:
    model = PPNet(ckpt.config.net, seed=ckpt.config.seed)
    model.load_parameters(ckpt.params)
    return model


def _snapshot(config, model, adam) -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    moments = AdamState({k: a.copy() for k, a in adam.m.items()},
                        {k: a.copy() for k, a in adam.v.items()}, adam.step)
    return Checkpoint(config, params, moments, adam.step)


# ---------------------------------------------------------------------------
# training


@dataclass
class LogRow:
    step: int
    epoch: int
    loss: float
    time_ms: float
    updates: List[int]
    batch: int


@dataclass
class TrainingLog:
    rows: List[LogRow] = field(default_factory=list)
    epoch_times: List[float] = field(default_factory=list)
    cell_updates: int = 0

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.rows]

    def epoch_losses(self) -> List[float]:
        out: Dict[int, List[float]] = {}
        for r in self.rows:
            out.setdefault(r.epoch, []).append(r.loss)
        return [float(np.mean(v)) for _, v in sorted(out.items())]

    def to_csv(self) -> str:
        lines = ["step,loss,time_ms,updates"]
        for r in self.rows:
            lines.append(f"{r.step},{r.loss!r},{r.time_ms:.3f},{';'.join(map(str, r.updates))}")
        return "\n".join(lines) + "\n"


def train(config: TrainConfig, data: SequenceSet, resume: Optional[Checkpoint] = None,
          checkpoint_path=None, on_epoch: Optional[Callable[[int, PPNet], None]] = None
          ) -> Tuple[Checkpoint, TrainingLog]:
    """Fit a fresh (or resumed) network on ``data`` for ``config.epochs`` epochs.

    On a non-finite loss or gradient a :class:`DivergenceError` is raised
    carrying the last good checkpoint, which is also written to
    ``checkpoint_path`` when given.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.seq_len < 2:
        raise ValueError("sequences must have at least two frames")
    model = PPNet(config.net, seed=config.seed)
    adam = AdamState()
    if resume is not None:
        if resume.fingerprint != config.fingerprint():
            raise CheckpointError("checkpoint was produced with a different configuration")
        model.load_parameters(resume.params)
        adam = AdamState({k: a.copy() for k, a in resume.moments.m.items()},
                         {k: a.copy() for k, a in resume.moments.v.items()}, resume.moments.step)
    params = model.parameters()
    names = list(params)
    plist = [params[n] for n in names]
    n_batches = -(-len(data) // config.batch_size)
    first_epoch = adam.step // n_batches
    log = TrainingLog()

    def _abort(msg):
        ckpt = _snapshot(config, model, adam)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, ckpt)
        raise DivergenceError(msg, ckpt)

    for epoch in range(first_epoch, first_epoch + config.epochs):
        order = make_rng(config.seed, 0xE90C, epoch).permutation(len(data))
        epoch_start = time.perf_counter()
        for batch in data.batches(config.batch_size, order):
            t0 = time.perf_counter()
            try:
                trace = model.forward_sequence(batch)
                loss = trace_loss(trace, config.loss)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericFault("loss is not finite")
                grad_map = T.backward(loss, plist)
            except NumericFault as exc:
                _abort(f"numeric fault at step {adam.step + 1}: {exc}")
            grads = {n: grad_map[p] for n, p in zip(names, plist)}
            bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
            if bad:
                _abort(f"non-finite gradient for parameter {bad[0]} at step {adam.step + 1}")
            clip_global_norm(grads, config.clip_norm)
            optimizer_step(params, grads, adam, config.learning_rate)
            B = batch.shape[1]
            log.cell_updates += B * sum(trace.update_count)
            log.rows.append(LogRow(adam.step, epoch, value, 1000 * (time.perf_counter() - t0),
                                   list(trace.update_count), B))
        log.epoch_times.append(time.perf_counter() - epoch_start)
        logger.info("epoch %d loss %.6g (%.1fs)", epoch, np.mean([r.loss for r in log.rows if r.epoch == epoch]),
                    log.epoch_times[-1])
        if on_epoch is not None:
            on_epoch(epoch, model)
    ckpt = _snapshot(config, model, adam)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
    return ckpt, log


# ---------------------------------------------------------------------------
# evaluation


def evaluate_next_frame(model: PPNet, data: SequenceSet, batch_size: int = 8, skip: int = 1) -> dict:
    """Teacher-forced next-frame quality on ``data``.

    ``ssim``/``mse`` compare P_t^0 with x_{t+1} for ``t >= skip`` (the first
    predictions have seen almost no context). ``mean_error`` is the
    unweighted split error averaged over every formable step.
    """
    if data.seq_len < skip + 2:
        raise ValueError(f"sequences of {data.seq_len} frames leave no step to score after skipping {skip}")
    ssims, mses, errors = [], [], []
    with T.no_grad():
        for batch in data.batches(batch_size):
            trace = model.forward_sequence(batch)
            preds = trace.next_frame_predictions()  # T, B, C, H, W
            errors.extend(float(E.data.mean()) * E.shape[0] for E in trace.layer_errors(0))
            for t in range(skip, batch.shape[0] - 1):
                for b in range(batch.shape[1]):
                    ssims.append(ssim(preds[t, b], batch[t + 1, b]))
                    mses.append(float(np.mean((preds[t, b] - batch[t + 1, b]) ** 2)))
    n_err = len(data) * (data.seq_len - 1)
    return {"ssim": float(np.mean(ssims)), "mse": float(np.mean(mses)), "mean_error": sum(errors) / n_err}


def copy_last_ssim(data: SequenceSet, skip: int = 1) -> float:
    """SSIM of predicting x_{t+1} by x_t over the same steps as :func:`evaluate_next_frame`."""
    seqs = data.sequences
    vals = [ssim(seq[t], seq[t + 1]) for seq in seqs for t in range(skip, seqs.shape[1] - 1)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# sweeps


def sweep_p(config: TrainConfig, data: SequenceSet, heldout: SequenceSet,
            p_values: Sequence[float], include_baseline: bool = True) -> List[dict]:
    """Train one model per ``p`` (same seed) and report held-out raw error.

    A ``p = 0`` row (no weighting) is added when ``include_baseline`` is set
    and 0 is not already in ``p_values``.
    """
    values = list(p_values)
    if len(values) < 2:
        raise ValueError("sweep_p needs at least two p values")
    if include_baseline and 0 not in values:
        values = [0.0] + values
    rows = []
    for p in values:
        ckpt, log = train(config.replace(p=float(p)), data)
        scores = evaluate_next_frame(model_from_checkpoint(ckpt), heldout)
        rows.append({"p": float(p), "mean_error": scores["mean_error"], "ssim": scores["ssim"],
                     "final_loss": log.epoch_losses()[-1], "baseline": p == 0})
    return rows


def rewindow(data: SequenceSet, seq_len: int) -> SequenceSet:
    """Cut every sequence into non-overlapping windows of ``seq_len`` frames."""
    n = data.seq_len // seq_len
    if n < 1:
        raise ValueError(f"sequences of {data.seq_len} frames are shorter than {seq_len}")
    seqs = data.sequences[:, :n * seq_len]
    N = seqs.shape[0]
    seqs = seqs.reshape((N * n, seq_len) + seqs.shape[2:])
    return SequenceSet(seqs, dict(data.meta, rewindow=seq_len))


def sweep_seq_len(config: TrainConfig, data: SequenceSet, heldout: SequenceSet,
                  lengths: Sequence[int] = (5, 10, 20)) -> List[dict]:
    """Train on the same frames cut into sequences of each length.

    ``data`` and ``heldout`` should hold long sequences whose length every
    entry of ``lengths`` divides, so the frame budget is identical across
    lengths. Each model is scored on ``heldout`` cut to its own length.
    Reports the median epoch time and held-out next-frame scores.
    """
    rows = []
    for L in lengths:
        windows = rewindow(data, L)
        if windows.sequences.shape[0] * L != data.sequences.shape[0] * data.seq_len:
            raise ValueError(f"length {L} does not divide the sequence length {data.seq_len}")
        ckpt, log = train(config, windows)
        scores = evaluate_next_frame(model_from_checkpoint(ckpt), rewindow(heldout, L))
        rows.append({"T": int(L), "epoch_time_s": float(np.median(log.epoch_times)),
                     "ssim": scores["ssim"], "mean_error": scores["mean_error"],
                     "sequences": len(windows)})
    return rows
