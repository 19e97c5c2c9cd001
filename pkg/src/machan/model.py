"""The channel-aligned, attention-gated LSTM regressor.

Per timestep, each present channel's feature vector is projected into a
shared m-dimensional space (tanh affine), the previous LSTM hidden state
is encoded into the same space, and a two-layer attention network turns
the four encodings into a distribution over the three channels. In hard
fusion the argmax channel alone feeds the LSTM (straight-through
gradients); soft fusion feeds the attention-weighted sum. Two baselines
reuse the identical LSTM cell and regression head: raw-channel
concatenation and aligned-channel concatenation.

Absent channels contribute zero vectors to the aligned stage and their
attention logits are masked to ``MASK_LOGIT`` before the softmax, which
underflows their probability to exactly zero. Volumes with every channel
absent are skipped without a state update and marked dropped in the
attention trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from machan.autodiff import MASK_LOGIT, Tape
from machan.data import CHANNELS, VolumeSequence

CHECKPOINT_FORMAT = "MACHAN1"

FUSION_MODES = ("hard", "soft", "concat", "aligned-concat")
ATTENTION_MODES = ("hard", "soft")

GATES = ("g", "i", "z", "o")


class ModelError(ValueError):
    """Invalid model configuration or input."""


@dataclass
class ModelConfig:
    """Dimensions and fusion behavior. Defaults follow the full-scale setup:
    1024-d alignment, 128-d attention encodings, 50 hidden LSTM nodes."""

    d_f: int
    d_p: int
    d_c: int
    m: int = 1024
    n: int = 128
    d_s: int = 50
    fusion: str = "hard"
    tie_break: str = "lowest"
    head: str = "last"
    # hard fusion only: forward the attention-scaled channel instead of the
    # unscaled one, making the forward pass the differentiable surrogate that
    # gradient checks target.
    surrogate_forward: bool = False

    def __post_init__(self):
        for name in ("d_f", "d_p", "d_c", "m", "n", "d_s"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be at least 1")
        if self.fusion not in FUSION_MODES:
            raise ModelError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.tie_break != "lowest":
            raise ModelError(f"unsupported tie_break {self.tie_break!r}")
        if self.head not in ("last", "mean"):
            raise ModelError(f"head must be 'last' or 'mean', got {self.head!r}")

    @property
    def channel_dims(self) -> dict[str, int]:
        return {"face": self.d_f, "pose": self.d_p, "hat": self.d_c}

    @property
    def lstm_input_dim(self) -> int:
        if self.fusion in ATTENTION_MODES:
            return self.m
        if self.fusion == "concat":
            return self.d_f + self.d_p + self.d_c
        return 3 * self.m  # aligned-concat


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in the canonical (seed-stable) order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for ch, d in zip(("f", "p", "c"), (config.d_f, config.d_p, config.d_c)):
        shapes[f"W_{ch}"] = (d, config.m)
        shapes[f"b_{ch}"] = (config.m,)
    shapes["W_s"] = (config.d_s, config.m)
    shapes["b_s"] = (config.m,)
    shapes["W_a"] = (config.m, config.n)
    shapes["b_a"] = (config.n,)
    shapes["W_sm"] = (4 * config.n, 3)
    shapes["b_sm"] = (3,)
    d_in = config.lstm_input_dim
    for gate in GATES:
        shapes[f"U_{gate}"] = (d_in, config.d_s)
        shapes[f"R_{gate}"] = (config.d_s, config.d_s)
        shapes[f"b_{gate}"] = (config.d_s,)
    shapes["w_out"] = (config.d_s,)
    shapes["b_out"] = ()
    return shapes


@dataclass
class ModelParams:
    """Named parameter tensors; shapes fixed by the config that built them."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self):
        return self.tensors.keys()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases except the forget-gate bias (1)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("b_"):
            tensors[name] = np.ones(shape) if name == "b_g" else np.zeros(shape)
        elif name == "w_out":
            bound = glorot_bound(config.d_s, 1)
            tensors[name] = rng.uniform(-bound, bound, shape)
        else:
            bound = glorot_bound(shape[0], shape[1])
            tensors[name] = rng.uniform(-bound, bound, shape)
    return ModelParams(tensors)


@dataclass
class TraceStep:
    """One timestep of the attention trace."""

    t: int
    attention: tuple[float, float, float] | None
    selected: int | None  # channel index; -1 for dropped; None for concat modes
    dropped: bool
    present: tuple[bool, bool, bool]


@dataclass
class AttentionTrace:
    steps: list[TraceStep] = field(default_factory=list)
    mode: str = "hard"

    def __len__(self):
        return len(self.steps)


@dataclass
class Prediction:
    yhat: float
    trace: AttentionTrace


# -- tape builders -----------------------------------------------------------
# These are the single implementation of every model equation; the public
# functional wrappers below and the training loop all go through them.


def register_params(tape: Tape, params: ModelParams) -> dict[str, int]:
    return {name: tape.param(name, arr) for name, arr in params.tensors.items()}


def _align_on_tape(tape, p, vec_node, which: str) -> int:
    return tape.affine_tanh(vec_node, p[f"W_{which}"], p[f"b_{which}"])


def _encode_state_on_tape(tape, p, h_prev: int) -> int:
    return tape.affine_tanh(h_prev, p["W_s"], p["b_s"])


def _attention_on_tape(tape, p, aligned: list[int], h_s: int, present) -> int:
    """Attention distribution node from aligned channels + state encoding."""
    encoded = [tape.affine_tanh(h, p["W_a"], p["b_a"]) for h in (*aligned, h_s)]
    h_a = tape.concat(encoded)
    logits = tape.affine(h_a, p["W_sm"], p["b_sm"])
    if not all(present):
        mask = np.where(np.asarray(present), 0.0, MASK_LOGIT)
        logits = tape.add(logits, tape.const(mask))
    return tape.softmax(logits)


def _select_on_tape(tape, config, a: int, aligned: list[int]) -> tuple[int, int]:
    """Fused LSTM input node and the (would-be) selected channel index."""
    a_val = tape.value(a)
    k = int(np.argmax(a_val))  # argmax takes the first maximum: lowest index
    if config.fusion == "hard":
        if config.surrogate_forward:
            return tape.scale(aligned[k], tape.pick(a, k)), k
        return tape.hard_select(a, aligned[k], k), k
    x = None
    for j in range(3):
        if a_val[j] == 0.0:
            continue  # masked channel: exact zero weight
        term = tape.scale(aligned[j], tape.pick(a, j))
        x = term if x is None else tape.add(x, term)
    return x, k


def _lstm_step_on_tape(tape, p, x: int, h_prev: int, s_prev: int):
    g = tape.gate_sigmoid(x, p["U_g"], h_prev, p["R_g"], p["b_g"])
    i = tape.gate_sigmoid(x, p["U_i"], h_prev, p["R_i"], p["b_i"])
    z = tape.gate_tanh(x, p["U_z"], h_prev, p["R_z"], p["b_z"])
    s = tape.cell(g, s_prev, i, z)
    o = tape.gate_sigmoid(x, p["U_o"], h_prev, p["R_o"], p["b_o"])
    h = tape.mul_tanh(o, s)
    return h, s, {"g": g, "i": i, "o": o}


def forward_on_tape(tape: Tape, seq: VolumeSequence, p: dict[str, int],
                    config: ModelConfig) -> tuple[int, AttentionTrace]:
    """Unroll the recurrence over a sequence; returns (prediction node, trace)."""
    dims = seq.dims
    for ch, d in config.channel_dims.items():
        if dims[ch] != d:
            raise ModelError(f"{seq.id}: {ch} dim {dims[ch]} != config {d}")
    attention = config.fusion in ATTENTION_MODES
    zeros = {ch: tape.const(np.zeros(d)) for ch, d in dims.items()}
    zeros_m = tape.const(np.zeros(config.m))
    h_prev = tape.const(np.zeros(config.d_s))
    s_prev = tape.const(np.zeros(config.d_s))
    trace = AttentionTrace(mode=config.fusion)
    hidden_nodes = []
    for t in range(seq.length):
        present = seq.present[t]
        if not present.any():
            trace.steps.append(TraceStep(
                t=t, attention=(0.0, 0.0, 0.0) if attention else None,
                selected=-1 if attention else None,
                dropped=True, present=(False, False, False),
            ))
            continue
        if config.fusion == "concat":
            raw = np.concatenate([
                seq.channels[ch][t] if present[c] else np.zeros(dims[ch])
                for c, ch in enumerate(CHANNELS)
            ])
            x = tape.const(raw)
            selected = None
            a_tuple = None
        else:
            aligned = [
                _align_on_tape(tape, p, tape.const(seq.channels[ch][t]), which)
                if present[c] else zeros_m
                for c, (ch, which) in enumerate(zip(CHANNELS, ("f", "p", "c")))
            ]
            if config.fusion == "aligned-concat":
                x = tape.concat(aligned)
                selected = None
                a_tuple = None
            else:
                h_s = _encode_state_on_tape(tape, p, h_prev)
                a = _attention_on_tape(tape, p, aligned, h_s, present)
                x, selected = _select_on_tape(tape, config, a, aligned)
                a_tuple = tuple(float(v) for v in tape.value(a))
        h_prev, s_prev, _ = _lstm_step_on_tape(tape, p, x, h_prev, s_prev)
        hidden_nodes.append(h_prev)
        trace.steps.append(TraceStep(
            t=t, attention=a_tuple, selected=selected, dropped=False,
            present=tuple(bool(b) for b in present),
        ))
    if not hidden_nodes:
        raise ModelError(f"{seq.id}: every volume was dropped; nothing to predict from")
    if config.head == "mean":
        acc = hidden_nodes[0]
        for h in hidden_nodes[1:]:
            acc = tape.add(acc, h)
        h_read = tape.cmul(acc, 1.0 / len(hidden_nodes))
    else:
        h_read = hidden_nodes[-1]
    yhat = tape.add(tape.dot(p["w_out"], h_read), p["b_out"])
    return yhat, trace


def forward(seq: VolumeSequence, params: ModelParams, config: ModelConfig) -> Prediction:
    """Run one sequence through the model; no gradients retained."""
    tape = Tape()
    p = register_params(tape, params)
    yhat, trace = forward_on_tape(tape, seq, p, config)
    return Prediction(yhat=float(tape.value(yhat)), trace=trace)


# -- functional views of the individual stages --------------------------------


def _mini_tape(params: ModelParams, names) -> tuple[Tape, dict[str, int]]:
    tape = Tape()
    return tape, {name: tape.param(name, params[name]) for name in names}


def align_channels(f, p, c, params: ModelParams):
    """Project each present channel into the shared space; ``None`` is skipped."""
    tape, nodes = _mini_tape(params, ("W_f", "b_f", "W_p", "b_p", "W_c", "b_c"))
    out = []
    for vec, which in zip((f, p, c), ("f", "p", "c")):
        if vec is None:
            out.append(None)
        else:
            node = _align_on_tape(tape, nodes, tape.const(vec), which)
            out.append(tape.value(node))
    return tuple(out)


def encode_state(h_prev, params: ModelParams) -> np.ndarray:
    tape, nodes = _mini_tape(params, ("W_s", "b_s"))
    return tape.value(_encode_state_on_tape(tape, nodes, tape.const(h_prev)))


def attention_weights(h_f, h_p, h_c, h_s, mask, params: ModelParams) -> np.ndarray:
    """Distribution over the three channels; masked channels get ~0 weight."""
    if not any(mask):
        raise ModelError("attention needs at least one present channel")
    tape, nodes = _mini_tape(params, ("W_a", "b_a", "W_sm", "b_sm"))
    aligned = [tape.const(np.asarray(v, dtype=np.float64)) for v in (h_f, h_p, h_c)]
    a = _attention_on_tape(tape, nodes, aligned, tape.const(h_s), tuple(mask))
    return tape.value(a)


def select_channel(a, h_f, h_p, h_c, mode: str = "hard", tie_break: str = "lowest"):
    """LSTM input for an attention distribution; returns (x, selected index)."""
    if tie_break != "lowest":
        raise ModelError(f"unsupported tie_break {tie_break!r}")
    a = np.asarray(a, dtype=np.float64)
    hs = [np.asarray(h, dtype=np.float64) for h in (h_f, h_p, h_c)]
    k = int(np.argmax(a))
    if mode == "hard":
        return hs[k].copy(), k
    if mode == "soft":
        return sum(a[j] * hs[j] for j in range(3)), k
    raise ModelError(f"select_channel mode must be hard or soft, got {mode!r}")


def lstm_step(x, h_prev, s_prev, params: ModelParams):
    """One LSTM cell update; returns (h, s, gates)."""
    names = [f"{kind}_{gate}" for gate in GATES for kind in ("U", "R", "b")]
    tape, nodes = _mini_tape(params, names)
    h, s, gates = _lstm_step_on_tape(
        tape, nodes, tape.const(x), tape.const(h_prev), tape.const(s_prev)
    )
    return (
        tape.value(h),
        tape.value(s),
        {name: tape.value(node) for name, node in gates.items()},
    )


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, params: ModelParams,
                    extra: dict | None = None) -> None:
    """Self-describing JSON checkpoint: config plus every named tensor."""
    obj = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(config),
        "params": {
            name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in params.tensors.items()
        },
    }
    if extra:
        obj["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(
            f"{path}: not a {CHECKPOINT_FORMAT} checkpoint (format={obj.get('format')!r})"
        )
    config = ModelConfig(**obj["config"])
    expected = param_shapes(config)
    tensors = {}
    for name, entry in obj["params"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = arr
    for name, shape in expected.items():
        if name not in tensors:
            raise ModelError(f"{path}: checkpoint missing tensor {name}")
        if tensors[name].shape != shape:
            raise ModelError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}"
            )
    return config, ModelParams(tensors), obj.get("extra", {})
