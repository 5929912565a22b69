"""The pyramidal predictive network.

Each layer ``l`` owns a ConvLSTM predictive unit, a prediction head and
(except the top layer) a generative unit producing the next layer's input.
Layer ``l`` only runs once an input has reached it, so with the pyramidal
schedule layer ``l`` makes its first prediction at time step ``l``
(0-based). Layers without input keep their recurrent state untouched.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DimensionError
from .nn import ConvLSTMCell, ConvLSTMState, ConvParams, convlstm_step, init_conv, init_params, zero_state
from .tensor import Tensor

__all__ = [
    "PPNetConfig",
    "NetworkState",
    "ForwardTrace",
    "PPNet",
    "error_unit",
    "schedule_trace",
    "PREDICTS",
    "HOLDS",
    "ABSENT",
]

SCHEDULES = ("pyramidal", "synchronous")
UPWARD_CONTENT = ("error_and_input", "error_only")
UPWARD_WEIGHTING = ("raw", "weighted_normalized")

PREDICTS, HOLDS, ABSENT = "predicts", "holds", "absent"


@dataclass
class PPNetConfig:
    """Network structure.

    ``channels[l]`` is the width of layer ``l``: the ConvLSTM hidden size at
    every layer, and the input/prediction channel count for ``l >= 1``.
    Layer 0 reads and predicts ``input_channels`` (the frame channels).
    """

    num_layers: int = 4
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    kernel_size: int = 3
    input_channels: int = 1
    input_size: Tuple[int, int] = (32, 32)
    schedule: str = "pyramidal"
    upward_content: str = "error_and_input"
    upward_weighting: str = "raw"
    p: float = 1000.0
    lambda0: float = 0.5

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.input_size = tuple(int(s) for s in self.input_size)
        L = self.num_layers
        if L < 1:
            raise ConfigError("num_layers must be >= 1")
        if len(self.channels) != L:
            raise ConfigError(f"channels has {len(self.channels)} entries, num_layers is {L}")
        if any(c < 1 for c in self.channels) or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if len(self.input_size) != 2:
            raise ConfigError("input_size must be (height, width)")
        div = 2 ** (L - 1)
        if any(s < 1 or s % div for s in self.input_size):
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2^(L-1) = {div}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.upward_content not in UPWARD_CONTENT:
            raise ConfigError(f"upward_content must be one of {UPWARD_CONTENT}, got {self.upward_content!r}")
        if self.upward_weighting not in UPWARD_WEIGHTING:
            raise ConfigError(
                f"upward_weighting must be one of {UPWARD_WEIGHTING}, got {self.upward_weighting!r}")
        # p == 0 is the unweighted special case
        if self.p < 0:
            raise ConfigError("p must be >= 0")
        if not 0.0 <= self.lambda0 <= 1.0:
            raise ConfigError("lambda0 must lie in [0, 1]")

    def a_channels(self, layer: int) -> int:
        return self.input_channels if layer == 0 else self.channels[layer]

    def spatial(self, layer: int) -> Tuple[int, int]:
        H, W = self.input_size
        return H >> layer, W >> layer

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class NetworkState:
    """Per-layer slots at the current time step. ``None`` marks an absent slot."""

    A: List[Optional[Tensor]]
    P: List[Optional[Tensor]]
    E: List[Optional[Tensor]]
    H: List[ConvLSTMState]
    t: int = 0


@dataclass
class ForwardTrace:
    """Everything a forward pass produced.

    ``predictions[t][l]`` is P_t^l; ``errors[t][l]`` is E_t^l when it was
    freshly formed at step ``t`` (``errors[0]`` is always empty).
    """

    predictions: List[List[Optional[Tensor]]]
    errors: List[List[Optional[Tensor]]]
    update_count: List[int]

    def layer_errors(self, layer: int = 0) -> List[Tensor]:
        return [row[layer] for row in self.errors if row[layer] is not None]

    def next_frame_predictions(self) -> np.ndarray:
        """Layer-0 predictions stacked as (T, B, C, H, W)."""
        return np.stack([row[0].data for row in self.predictions])


def error_unit(P: Tensor, A_next: Tensor) -> Tensor:
    """Rectified positive and negative prediction errors, channel-stacked."""
    if P.shape != A_next.shape:
        raise DimensionError(f"error_unit: prediction {P.shape} vs target {A_next.shape}")
    return T.concat_channels(T.relu(T.sub(P, A_next)), T.relu(T.sub(A_next, P)))


def schedule_trace(num_layers: int, steps: int, schedule: str = "pyramidal") -> Dict[Tuple[int, int], str]:
    """Replay the layer schedule without numerics.

    Returns ``{(t, l): state}`` where state is ``"predicts"``, ``"holds"``
    (skipped after having run before) or ``"absent"`` (never reached yet).
    """
    if num_layers < 1 or steps < 2:
        raise ContractError("schedule_trace needs num_layers >= 1 and steps >= 2")
    if schedule not in SCHEDULES:
        raise ContractError(f"unknown schedule {schedule!r}")
    L = num_layers
    has_input = [l == 0 or schedule == "synchronous" for l in range(L)]
    ran = [False] * L
    table = {}
    for t in range(steps):
        predicted = [False] * L
        for l in reversed(range(L)):
            if has_input[l]:
                predicted[l] = True
                ran[l] = True
                table[(t, l)] = PREDICTS
            else:
                table[(t, l)] = HOLDS if ran[l] else ABSENT
        if t < steps - 1:
            nxt = [False] * L
            nxt[0] = True
            for l in range(L - 1):
                nxt[l + 1] = predicted[l] and nxt[l]
            has_input = nxt
    return table


def schedule_counts(table: Dict[Tuple[int, int], str], num_layers: int) -> List[int]:
    counts = [0] * num_layers
    for (_, l), state in table.items():
        if state == PREDICTS:
            counts[l] += 1
    return counts


class PPNet:
    """Parameters plus the step-wise forward computation.

    Parameters are created deterministically from ``seed``.
    """

    def __init__(self, config: PPNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        cfg = config
        L, k = cfg.num_layers, cfg.kernel_size
        self.cells: List[ConvLSTMCell] = []
        self.heads: List[ConvParams] = []
        self.upward: List[ConvParams] = []
        for l in range(L):
            td = cfg.a_channels(l + 1) if l < L - 1 else 0
            self.cells.append(init_params((seed, l, 0), cfg.a_channels(l), cfg.channels[l], k, td, dtype))
            self.heads.append(init_conv((seed, l, 1), cfg.channels[l], cfg.a_channels(l), k, dtype))
            if l < L - 1:
                cin = 2 * cfg.a_channels(l)
                if cfg.upward_content == "error_and_input":
                    cin += cfg.a_channels(l)
                self.upward.append(init_conv((seed, l, 2), cin, cfg.a_channels(l + 1), k, dtype))

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for l in range(self.config.num_layers):
            params[f"layer{l}.cell.kernel"] = self.cells[l].gate_kernel
            params[f"layer{l}.cell.bias"] = self.cells[l].gate_bias
            params[f"layer{l}.head.kernel"] = self.heads[l].kernel
            params[f"layer{l}.head.bias"] = self.heads[l].bias
            if l < len(self.upward):
                params[f"layer{l}.upward.kernel"] = self.upward[l].kernel
                params[f"layer{l}.upward.bias"] = self.upward[l].bias
        return params

    def load_parameters(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    # -- units --------------------------------------------------------------

    def upward_input(self, layer: int, E: Tensor, A_prev: Tensor) -> Tensor:
        """Input of layer ``layer + 1`` from this layer's error and input."""
        if E.shape[2:] != A_prev.shape[2:]:
            raise DimensionError(f"upward_input: error {E.shape} and input {A_prev.shape} differ spatially")
        if self.config.upward_content == "error_and_input":
            z = T.concat_channels(E, A_prev)
        else:
            z = E
        return T.maxpool2d(T.relu(self.upward[layer](z)), 2)

    def local_prediction(self, layer: int, h: Tensor) -> Tensor:
        P = T.relu(self.heads[layer](h))
        return T.clamp01(P) if layer == 0 else P

    def _upward_error(self, E: Tensor) -> Tensor:
        cfg = self.config
        if cfg.upward_weighting == "raw" or cfg.p == 0:
            return E
        # weighted error p*E*E with the weight held constant, then rescaled
        # per sample to unit max
        weighted = T.mul(Tensor(E.data * E.dtype.type(cfg.p)), E)
        peak = weighted.data.max(axis=(1, 2, 3), keepdims=True)
        inv = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1), 1.0).astype(E.dtype)
        return T.mul(weighted, Tensor(np.broadcast_to(inv, E.shape).copy()))

    # -- schedule -----------------------------------------------------------

    def init_state(self, batch: int, first_frame: Tensor) -> NetworkState:
        cfg = self.config
        L = cfg.num_layers
        H = []
        A: List[Optional[Tensor]] = [None] * L
        A[0] = first_frame
        for l in range(L):
            h, w = cfg.spatial(l)
            H.append(zero_state(batch, cfg.channels[l], h, w, self.dtype))
            if l > 0 and cfg.schedule == "synchronous":
                A[l] = Tensor(np.zeros((batch, cfg.a_channels(l), h, w), dtype=self.dtype))
        return NetworkState(A=A, P=[None] * L, E=[None] * L, H=H, t=0)

    def top_down(self, state: NetworkState) -> List[Optional[Tensor]]:
        """Run every layer that has input, from the top layer down."""
        L = self.config.num_layers
        P: List[Optional[Tensor]] = [None] * L
        for l in reversed(range(L)):
            A = state.A[l]
            if A is None:
                continue
            td = None
            if l < L - 1 and P[l + 1] is not None:
                td = T.upsample_nearest(P[l + 1], 2)
            state.H[l] = convlstm_step(self.cells[l], A, state.H[l], td)
            P[l] = self.local_prediction(l, state.H[l].h)
        state.P = P
        return P

    def bottom_up(self, state: NetworkState, next_frame: Tensor) -> List[Optional[Tensor]]:
        """Form E_{t+1} and the inputs A_{t+1}; advances ``state.t``.

        Returns the freshly formed errors (``None`` where the error was carried).
        """
        cfg = self.config
        L = cfg.num_layers
        A_next: List[Optional[Tensor]] = [None] * L
        A_next[0] = next_frame
        fresh: List[Optional[Tensor]] = [None] * L
        for l in range(L):
            P, target = state.P[l], A_next[l]
            if P is None or target is None:
                if state.E[l] is None:
                    h, w = cfg.spatial(l)
                    B = next_frame.shape[0]
                    state.E[l] = Tensor(np.zeros((B, 2 * cfg.a_channels(l), h, w), dtype=self.dtype))
                continue
            E = error_unit(P, target)
            state.E[l] = E
            fresh[l] = E
            if l < L - 1:
                A_next[l + 1] = self.upward_input(l, self._upward_error(E), state.A[l])
        state.A = A_next
        state.t += 1
        return fresh

    def _check_frames(self, frames) -> np.ndarray:
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        cfg = self.config
        if frames.ndim != 5:
            raise DimensionError(f"frames must be (T, B, C, H, W), got shape {frames.shape}")
        if frames.shape[2] != cfg.input_channels or tuple(frames.shape[3:]) != cfg.input_size:
            raise DimensionError(
                f"frames have shape {frames.shape[2:]}, network expects "
                f"({cfg.input_channels}, {cfg.input_size[0]}, {cfg.input_size[1]})")
        return frames.astype(self.dtype, copy=False)

    def run(self, frames) -> Tuple[ForwardTrace, NetworkState]:
        frames = self._check_frames(frames)
        steps = frames.shape[0]
        if steps < 2:
            raise ContractError("forward pass needs at least two frames to form an error")
        L = self.config.num_layers
        state = self.init_state(frames.shape[1], Tensor(frames[0]))
        predictions, errors = [], [[None] * L]
        counts = [0] * L
        for t in range(steps):
            P = self.top_down(state)
            predictions.append(P)
            for l in range(L):
                counts[l] += P[l] is not None
            if t < steps - 1:
                errors.append(self.bottom_up(state, Tensor(frames[t + 1])))
        return ForwardTrace(predictions, errors, counts), state

    def forward_sequence(self, frames) -> ForwardTrace:
        """Teacher-forced pass over ``frames`` shaped (T, B, C, H, W)."""
        return self.run(frames)[0]

    def rollout(self, context, horizon: int) -> np.ndarray:
        """Closed-loop prediction of ``horizon`` frames after ``context``.

        The first output is the next-frame prediction after the last context
        frame; each later step feeds the previous layer-0 prediction back as
        input. Returns (horizon, B, C, H, W).
        """
        if horizon < 1:
            raise ContractError("horizon must be >= 1")
        with T.no_grad():
            _, state = self.run(context)
            out = []
            for k in range(horizon):
                P0 = state.P[0]
                out.append(P0.data)
                if k < horizon - 1:
                    self.bottom_up(state, P0)
                    self.top_down(state)
        return np.stack(out)


def forward_sequence(model: PPNet, frames) -> ForwardTrace:
    return model.forward_sequence(frames)


def rollout(model: PPNet, context, horizon: int) -> np.ndarray:
    return model.rollout(context, horizon)
