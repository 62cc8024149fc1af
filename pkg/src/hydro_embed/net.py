"""Differentiable model core.

A single-layer LSTM reads a window of daily inputs and a linear head maps
the final hidden state to one discharge value. Per-site information enters
by concatenating, at every timestep, the basin's static attributes and/or
its learned embedding row to the dynamic features.

Everything is float64 and hand-differentiated; `backward` implements exact
backpropagation through time for the recurrence

    a_t = W_ih x_t + W_hh h_{t-1} + b          (gate order: i, f, g, o)
    c_t = sigmoid(a_f) * c_{t-1} + sigmoid(a_i) * tanh(a_g)
    h_t = sigmoid(a_o) * tanh(c_t)
    y   = head_w . (mask * h_T / (1 - p)) + head_b     (inverted dropout)

The public entry points are per-sample (`forward`, `backward`); the
`*_batch` variants carry the same math over a whole batch in one set of
matrix products and are what the training loop uses.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import BasinIndexOutOfRange, NonFiniteActivation, TapeReuse
from .pipeline import Sample
from .prng import Xoshiro256StarStar


@dataclass(frozen=True)
class ModelConfig:
    d_dyn: int
    hidden_size: int = 256
    embedding_dim: int = 20
    num_basins: int = 0
    d_static: int = 0
    dropout_rate: float = 0.4
    use_static: bool = False
    use_embedding: bool = False

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.use_embedding and (self.embedding_dim < 1 or self.num_basins < 1):
            raise ValueError("embedding mode needs embedding_dim >= 1 and num_basins >= 1")
        if self.use_static and self.d_static < 1:
            raise ValueError("static mode needs d_static >= 1")

    @property
    def input_dim(self) -> int:
        d = self.d_dyn
        if self.use_static:
            d += self.d_static
        if self.use_embedding:
            d += self.embedding_dim
        return d

    @property
    def embed_offset(self) -> int:
        # column where the embedding segment starts in an assembled input row
        return self.d_dyn + (self.d_static if self.use_static else 0)


class _ParamArrays:
    """Shared flatten/unflatten over the canonical parameter order."""

    _FIELDS = ("w_ih", "w_hh", "b", "head_w", "head_b", "embed")

    def flatten(self) -> np.ndarray:
        parts = []
        for name in self._FIELDS:
            value = getattr(self, name)
            parts.append(
                np.array([value], dtype=np.float64)
                if np.isscalar(value)
                else np.asarray(value, dtype=np.float64).ravel()
            )
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, flat: np.ndarray, like):
        out = {}
        offset = 0
        for name in cls._FIELDS:
            ref = getattr(like, name)
            if np.isscalar(ref):
                out[name] = float(flat[offset])
                offset += 1
            else:
                size = ref.size
                out[name] = flat[offset : offset + size].reshape(ref.shape).copy()
                offset += size
        if offset != flat.size:
            raise ValueError("flat vector length does not match parameter shapes")
        return cls(**out)

    @property
    def num_params(self) -> int:
        total = 0
        for name in self._FIELDS:
            value = getattr(self, name)
            total += 1 if np.isscalar(value) else value.size
        return total


@dataclass(frozen=True)
class ModelParams(_ParamArrays):
    """All trainable state, flattenable in the documented field order."""

    w_ih: np.ndarray  # (4H, D)
    w_hh: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    head_w: np.ndarray  # (H,)
    head_b: float
    embed: np.ndarray  # (num_basins, k), or (0, 0) when embeddings are off


@dataclass(frozen=True)
class Gradients(_ParamArrays):
    w_ih: np.ndarray
    w_hh: np.ndarray
    b: np.ndarray
    head_w: np.ndarray
    head_b: float
    embed: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(
            w_ih=np.zeros_like(params.w_ih),
            w_hh=np.zeros_like(params.w_hh),
            b=np.zeros_like(params.b),
            head_w=np.zeros_like(params.head_w),
            head_b=0.0,
            embed=np.zeros_like(params.embed),
        )

    def scaled(self, factor: float) -> "Gradients":
        return replace(
            self,
            w_ih=self.w_ih * factor,
            w_hh=self.w_hh * factor,
            b=self.b * factor,
            head_w=self.head_w * factor,
            head_b=self.head_b * factor,
            embed=self.embed * factor,
        )


@dataclass
class ForwardTape:
    """Cached activations for exactly one backward pass."""

    inputs: np.ndarray  # (B, T, D)
    gates: np.ndarray  # (B, T, 4H) post-activation
    c_states: np.ndarray  # (B, T+1, H), [:, 0] == 0
    h_states: np.ndarray  # (B, T+1, H), [:, 0] == 0
    tanh_c: np.ndarray  # (B, T, H)
    head_scale: np.ndarray  # (H,) dropout mask / (1 - p), or ones
    basin_indices: np.ndarray | None
    consumed: bool = False


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization.

    Weights are Uniform(-1/sqrt(H), 1/sqrt(H)); biases zero except the
    forget gate slice at 1.0 so early training keeps long-range memory;
    embedding rows are Uniform(-1/sqrt(k), 1/sqrt(k)). Draw order (w_ih,
    w_hh, head_w, embed; row-major) is fixed so parameters are a pure
    function of the seed.
    """
    rng = Xoshiro256StarStar(seed)
    h = config.hidden_size
    d = config.input_dim
    bound = 1.0 / np.sqrt(h)

    def draw(shape, limit):
        flat = np.array(
            [rng.uniform(-limit, limit) for _ in range(int(np.prod(shape)))],
            dtype=np.float64,
        )
        return flat.reshape(shape)

    w_ih = draw((4 * h, d), bound)
    w_hh = draw((4 * h, h), bound)
    head_w = draw((h,), bound)
    b = np.zeros(4 * h, dtype=np.float64)
    b[h : 2 * h] = 1.0  # forget gate
    if config.use_embedding:
        embed = draw((config.num_basins, config.embedding_dim), 1.0 / np.sqrt(config.embedding_dim))
    else:
        embed = np.zeros((0, 0), dtype=np.float64)
    return ModelParams(w_ih=w_ih, w_hh=w_hh, b=b, head_w=head_w, head_b=0.0, embed=embed)


def assemble_input(sample: Sample, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Build the (T, D) input matrix for one sample.

    Row t is [dynamic_t | static | embedding], with the static and
    embedding segments (when enabled) repeated identically on every row.
    """
    return assemble_batch([sample], params, config)[0][0]


def assemble_batch(samples, params: ModelParams, config: ModelConfig):
    """Stack samples into a (B, T, D) array plus the basin index vector."""
    batch_size = len(samples)
    t_len = samples[0].window.shape[0]
    inputs = np.empty((batch_size, t_len, config.input_dim), dtype=np.float64)
    indices = np.fromiter((s.basin_index for s in samples), dtype=np.int64, count=batch_size)
    if config.use_embedding and indices.size:
        bad = (indices < 0) | (indices >= config.num_basins)
        if np.any(bad):
            raise BasinIndexOutOfRange(
                f"basin index {indices[bad][0]} outside [0, {config.num_basins})"
            )
    offset = config.d_dyn
    for j, sample in enumerate(samples):
        inputs[j, :, : config.d_dyn] = sample.window
        if config.use_static:
            inputs[j, :, offset : offset + config.d_static] = sample.static
    if config.use_embedding:
        eo = config.embed_offset
        inputs[:, :, eo : eo + config.embedding_dim] = params.embed[indices][:, None, :]
    return inputs, indices


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward(
    input: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    dropout_mask: np.ndarray | None = None,
    basin_index: int | None = None,
) -> tuple[float, ForwardTape]:
    """Run one (T, D) window through the model.

    ``dropout_mask`` is a 0/1 vector over hidden units; when given, the
    head input is scaled by mask/(1 - dropout_rate) (train mode). Without
    it the pass is deterministic (eval mode).
    """
    indices = None if basin_index is None else np.array([basin_index], dtype=np.int64)
    preds, tape = forward_batch(input[None, :, :], params, config, dropout_mask, indices)
    return float(preds[0]), tape


def forward_batch(
    inputs: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    dropout_mask: np.ndarray | None = None,
    basin_indices: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardTape]:
    batch, t_len, d = inputs.shape
    h_size = config.hidden_size
    if d != config.input_dim:
        raise ValueError(f"input has {d} columns, config expects {config.input_dim}")
    if not np.all(np.isfinite(inputs)):
        raise NonFiniteActivation("non-finite model input")
    if config.use_embedding and basin_indices is not None:
        bad = (basin_indices < 0) | (basin_indices >= config.num_basins)
        if np.any(bad):
            raise BasinIndexOutOfRange(
                f"basin index {basin_indices[bad][0]} outside [0, {config.num_basins})"
            )

    # all input projections in one matmul, recurrent term added per step
    gates_in = inputs.reshape(batch * t_len, d) @ params.w_ih.T
    gates_in = gates_in.reshape(batch, t_len, 4 * h_size) + params.b

    gates = np.empty((batch, t_len, 4 * h_size), dtype=np.float64)
    c_states = np.zeros((batch, t_len + 1, h_size), dtype=np.float64)
    h_states = np.zeros((batch, t_len + 1, h_size), dtype=np.float64)
    tanh_c = np.empty((batch, t_len, h_size), dtype=np.float64)

    h = h_states[:, 0]
    c = c_states[:, 0]
    for t in range(t_len):
        pre = gates_in[:, t] + h @ params.w_hh.T
        i = _sigmoid(pre[:, :h_size])
        f = _sigmoid(pre[:, h_size : 2 * h_size])
        g = np.tanh(pre[:, 2 * h_size : 3 * h_size])
        o = _sigmoid(pre[:, 3 * h_size :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t, :h_size] = i
        gates[:, t, h_size : 2 * h_size] = f
        gates[:, t, 2 * h_size : 3 * h_size] = g
        gates[:, t, 3 * h_size :] = o
        c_states[:, t + 1] = c
        h_states[:, t + 1] = h
        tanh_c[:, t] = tc

    if dropout_mask is None:
        head_scale = np.ones(h_size, dtype=np.float64)
    else:
        head_scale = np.asarray(dropout_mask, dtype=np.float64) / (1.0 - config.dropout_rate)
    preds = (h * head_scale) @ params.head_w + params.head_b

    if not (np.all(np.isfinite(preds)) and np.all(np.isfinite(c))):
        raise NonFiniteActivation("non-finite activation in forward pass")

    tape = ForwardTape(
        inputs=inputs,
        gates=gates,
        c_states=c_states,
        h_states=h_states,
        tanh_c=tanh_c,
        head_scale=head_scale,
        basin_indices=basin_indices,
    )
    return preds, tape


def backward(
    tape: ForwardTape,
    upstream: float,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[Gradients, np.ndarray]:
    """Exact gradients of ``upstream * prediction`` for a single-sample tape.

    Returns the parameter gradients and d(prediction)/d(input) scaled by
    ``upstream``. The tape is consumed.
    """
    grads, d_inputs = backward_batch(tape, np.array([upstream], dtype=np.float64), params, config)
    return grads, d_inputs[0]


def backward_batch(
    tape: ForwardTape,
    upstream: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[Gradients, np.ndarray]:
    if tape.consumed:
        raise TapeReuse("tape has already been used for a backward pass")
    tape.consumed = True

    batch, t_len, d = tape.inputs.shape
    h_size = config.hidden_size
    gates = tape.gates
    upstream = np.asarray(upstream, dtype=np.float64)

    h_final = tape.h_states[:, -1]
    d_head_w = ((h_final * tape.head_scale) * upstream[:, None]).sum(axis=0)
    d_head_b = float(upstream.sum())

    d_act = np.empty((batch, t_len, 4 * h_size), dtype=np.float64)
    dh = upstream[:, None] * (params.head_w * tape.head_scale)
    dc = np.zeros((batch, h_size), dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        i = gates[:, t, :h_size]
        f = gates[:, t, h_size : 2 * h_size]
        g = gates[:, t, 2 * h_size : 3 * h_size]
        o = gates[:, t, 3 * h_size :]
        tc = tape.tanh_c[:, t]
        c_prev = tape.c_states[:, t]

        d_o = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        d_i = dc * g
        d_g = dc * i
        d_f = dc * c_prev

        d_act[:, t, :h_size] = d_i * i * (1.0 - i)
        d_act[:, t, h_size : 2 * h_size] = d_f * f * (1.0 - f)
        d_act[:, t, 2 * h_size : 3 * h_size] = d_g * (1.0 - g * g)
        d_act[:, t, 3 * h_size :] = d_o * o * (1.0 - o)

        dh = d_act[:, t] @ params.w_hh
        dc = dc * f

    flat_act = d_act.reshape(batch * t_len, 4 * h_size)
    d_w_ih = flat_act.T @ tape.inputs.reshape(batch * t_len, d)
    d_w_hh = flat_act.T @ tape.h_states[:, :-1].reshape(batch * t_len, h_size)
    d_b = flat_act.sum(axis=0)
    d_inputs = (flat_act @ params.w_ih).reshape(batch, t_len, d)

    d_embed = np.zeros_like(params.embed)
    if config.use_embedding and tape.basin_indices is not None:
        eo = config.embed_offset
        per_sample = d_inputs[:, :, eo : eo + config.embedding_dim].sum(axis=1)
        np.add.at(d_embed, tape.basin_indices, per_sample)

    grads = Gradients(
        w_ih=d_w_ih,
        w_hh=d_w_hh,
        b=d_b,
        head_w=d_head_w,
        head_b=d_head_b,
        embed=d_embed,
    )
    return grads, d_inputs


def draw_dropout_mask(rng: Xoshiro256StarStar, hidden_size: int, rate: float) -> np.ndarray:
    """0/1 keep mask; unit kept when the next uniform draw is >= rate."""
    return np.array(
        [1.0 if rng.next_float() >= rate else 0.0 for _ in range(hidden_size)],
        dtype=np.float64,
    )
