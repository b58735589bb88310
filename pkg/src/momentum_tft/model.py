"""Position-sizing networks: the LSTM baseline and the decoder-only TFT.

Both map a batch of feature windows ``x[B, tau, m]`` to positions
``X[B, tau]`` in (-1, 1).  Layers are built from :mod:`tensorgrad` ops so the
Sharpe loss can be differentiated end to end.

TFT block order (normative for this package)::

    per-variable linear maps -> VSN (static context c_s)
      -> LSTM -> GLU + Add&Norm                       (skip: VSN output)   = phi_tilde
      -> GRN enrichment (static context c_e)                               = theta
      -> causal IMHA -> GLU + Add&Norm                (skip: theta)
      -> GRN -> GLU + Add&Norm                        (skip: phi_tilde)
      -> dense -> tanh

Inside the VSN the variable axis leads (``[m, N, d]``) so the m per-variable
GRNs run as one batched matmul against stacked ``[m, d, d]`` weights.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, fields, is_dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import ContractError, DimensionError, Tensor

FORMAT_VERSION = 1
POSITION_CAP = 1.0 - 1e-9
MODEL_KINDS = ("lstm", "tft")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    kind: str
    n_inputs: int
    d_model: int
    seq_len: int
    n_heads: int = 4
    dropout: float = 0.0
    n_categories: int = 4

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.n_inputs < 1:
            raise ConfigError("need at least one input variable")
        if self.d_model < 1 or self.seq_len < 1:
            raise ConfigError(f"d_model and seq_len must be positive, got {self.d_model}, {self.seq_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kind == "tft" and (self.n_heads < 1 or self.d_model % self.n_heads):
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class GluParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class GrnParams:
    """Dense -> ELU -> dense, then a GLU-gated residual with Add&Norm.

    Weights may carry a leading variable axis (stacked GRNs).  ``w_skip`` is
    present only when input and output widths differ, ``w_ctx`` only when the
    block accepts a static context.
    """

    w_in: Tensor
    b_in: Tensor
    w_hidden: Tensor
    b_hidden: Tensor
    glu: GluParams
    ln_gain: Tensor
    ln_bias: Tensor
    w_skip: Tensor | None = None
    b_skip: Tensor | None = None
    w_ctx: Tensor | None = None


@dataclass
class VsnParams:
    w_var: Tensor          # [m, 1, d] per-variable linear transform of the scalar input
    b_var: Tensor          # [m, 1, d]
    var_grns: GrnParams    # stacked over m
    select_grn: GrnParams  # m*d -> m, with static context


@dataclass
class AttentionParams:
    w_q: Tensor              # [h, d, d_head]
    w_k: Tensor              # [h, d, d_head]
    w_v: Tensor              # IMHA: [d, d_head] shared; MHA: [h, d, d_head]
    w_out: Tensor            # IMHA: W_H [d_head, d]; MHA: W_O [h*d_head, d]
    interpretable: bool = True


@dataclass
class LstmParams:
    w_x: Tensor
    w_h: Tensor
    b: Tensor


@dataclass
class AddNormParams:
    glu: GluParams
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class TftParams:
    embedding: Tensor      # [n_categories, d]
    static_vsn: GrnParams
    static_enrich: GrnParams
    vsn: VsnParams
    lstm: LstmParams
    post_lstm: AddNormParams
    enrichment: GrnParams
    attention: AttentionParams
    post_attention: AddNormParams
    positionwise: GrnParams
    post_block: AddNormParams
    w_out: Tensor
    b_out: Tensor


@dataclass
class LstmDmnParams:
    w_in: Tensor
    b_in: Tensor
    lstm: LstmParams
    w_out: Tensor
    b_out: Tensor


@dataclass
class ModelParams:
    dims: ModelDims
    net: TftParams | LstmDmnParams

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return list(_walk(self.net, ""))

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> ModelParams:
        clone = init_params(self.dims, seed=0)
        clone.load_arrays({k: t.data for k, t in self.named_tensors()})
        return clone

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        if set(own) != set(arrays):
            missing, extra = sorted(set(own) - set(arrays)), sorted(set(arrays) - set(own))
            raise ContractError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in own.items():
            src = np.asarray(arrays[name], dtype=float)
            if src.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {src.shape} != expected {t.shape}")
            t.data = src.copy()
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors())


def _walk(obj, prefix: str):
    for f in fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, Tensor):
            value.name = name
            yield name, value
        elif is_dataclass(value):
            yield from _walk(value, name + ".")


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def glorot(self, *shape) -> Tensor:
        fan_in, fan_out = shape[-2], shape[-1]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(self.rng.uniform(-lim, lim, size=shape), requires_grad=True)

    def zeros(self, *shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(self, *shape) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True)

    def orthogonal(self, n: int, cols: int) -> Tensor:
        blocks = []
        for _ in range(cols // n):
            q, r = np.linalg.qr(self.rng.normal(size=(n, n)))
            blocks.append(q * np.sign(np.diag(r)))
        return Tensor(np.concatenate(blocks, axis=1), requires_grad=True)

    def glu(self, d_in: int, d_out: int, lead=()) -> GluParams:
        return GluParams(self.glorot(*lead, d_in, d_out), self.zeros(*lead, *([1] if lead else []), d_out),
                         self.glorot(*lead, d_in, d_out), self.zeros(*lead, *([1] if lead else []), d_out))

    def grn(self, d_in: int, d_hidden: int, d_out: int, d_ctx: int | None = None, lead=()) -> GrnParams:
        bias = (*lead, 1) if lead else ()
        p = GrnParams(
            w_in=self.glorot(*lead, d_in, d_hidden), b_in=self.zeros(*bias, d_hidden),
            w_hidden=self.glorot(*lead, d_hidden, d_hidden), b_hidden=self.zeros(*bias, d_hidden),
            glu=self.glu(d_hidden, d_out, lead),
            ln_gain=self.ones(*bias, d_out), ln_bias=self.zeros(*bias, d_out),
        )
        if d_in != d_out:
            p.w_skip, p.b_skip = self.glorot(*lead, d_in, d_out), self.zeros(*bias, d_out)
        if d_ctx is not None:
            p.w_ctx = self.glorot(d_ctx, d_hidden)
        return p

    def lstm(self, d_in: int, hidden: int) -> LstmParams:
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return LstmParams(self.glorot(d_in, 4 * hidden), self.orthogonal(hidden, 4 * hidden),
                          Tensor(b, requires_grad=True))

    def add_norm(self, d: int) -> AddNormParams:
        return AddNormParams(self.glu(d, d), self.ones(d), self.zeros(d))


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Glorot weights, orthogonal recurrent weights, zero biases (forget gate 1)."""
    ini = _Init(np.random.default_rng(seed))
    d, m = dims.d_model, dims.n_inputs
    if dims.kind == "lstm":
        net = LstmDmnParams(ini.glorot(m, d), ini.zeros(d), ini.lstm(d, d), ini.glorot(d, 1), ini.zeros(1))
        return ModelParams(dims, net)
    h, dh = dims.n_heads, dims.d_head
    net = TftParams(
        embedding=Tensor(ini.rng.normal(0.0, 1.0, size=(dims.n_categories, d)), requires_grad=True),
        static_vsn=ini.grn(d, d, d),
        static_enrich=ini.grn(d, d, d),
        vsn=VsnParams(
            w_var=ini.glorot(m, 1, d), b_var=ini.zeros(m, 1, d),
            var_grns=ini.grn(d, d, d, lead=(m,)),
            select_grn=ini.grn(m * d, d, m, d_ctx=d),
        ),
        lstm=ini.lstm(d, d),
        post_lstm=ini.add_norm(d),
        enrichment=ini.grn(d, d, d, d_ctx=d),
        attention=AttentionParams(ini.glorot(h, d, dh), ini.glorot(h, d, dh), ini.glorot(d, dh), ini.glorot(dh, d)),
        post_attention=ini.add_norm(d),
        positionwise=ini.grn(d, d, d),
        post_block=ini.add_norm(d),
        w_out=ini.glorot(d, 1),
        b_out=ini.zeros(1),
    )
    return ModelParams(dims, net)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis.

    A 2-d ``w`` is shared by every leading position (inputs are flattened to a
    single matmul); a stacked ``w[m, d_in, d_out]`` pairs with ``x[m, N, d_in]``.
    """
    x = tg.as_tensor(x)
    if w.ndim == 2 and x.ndim != 2:
        lead = x.shape[:-1]
        out = tg.matmul(x.reshape(-1, x.shape[-1]), w)
        out = out.reshape(*lead, w.shape[-1])
    else:
        out = tg.matmul(x, w)
    return out if b is None else out + b


def glu(x: Tensor, p: GluParams, rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Gated linear unit ``(W1 x + b1) * sigmoid(W2 x + b2)``, dropout on ``x`` when training."""
    if tg.as_tensor(x).shape[-1] != p.w1.shape[-2]:
        raise DimensionError(f"glu input width {tg.as_tensor(x).shape[-1]} != weight rows {p.w1.shape[-2]}")
    x = tg.dropout(x, rate, rng)
    return dense(x, p.w1, p.b1) * tg.sigmoid(dense(x, p.w2, p.b2))


def add_norm(x: Tensor, skip: Tensor, p: AddNormParams, rate: float = 0.0,
             rng: np.random.Generator | None = None) -> Tensor:
    return tg.layer_norm(skip + glu(x, p.glu, rate, rng), p.ln_gain, p.ln_bias)


def grn(x: Tensor, context: Tensor | None, p: GrnParams, rate: float = 0.0,
        rng: np.random.Generator | None = None) -> Tensor:
    """Gated residual network.

    ``context`` is ``[B, d_ctx]`` and is broadcast over every axis of ``x``
    between the batch axis and the feature axis.
    """
    x = tg.as_tensor(x)
    hidden = dense(x, p.w_in, p.b_in)
    if context is not None:
        if p.w_ctx is None:
            raise ContractError("context passed to a GRN without a context hook")
        ctx = tg.matmul(context, p.w_ctx)
        shape = (ctx.shape[0],) + (1,) * (x.ndim - 2) + (ctx.shape[-1],)
        hidden = hidden + ctx.reshape(*shape)
    hidden = dense(tg.elu(hidden), p.w_hidden, p.b_hidden)
    skip = x if p.w_skip is None else dense(x, p.w_skip, p.b_skip)
    return tg.layer_norm(skip + glu(hidden, p.glu, rate, rng), p.ln_gain, p.ln_bias)


def variable_embeddings(x: Tensor, p: VsnParams) -> Tensor:
    """Scalar inputs ``x[B, tau, m]`` to per-variable vectors ``[m, B*tau, d]``."""
    x = tg.as_tensor(x)
    batch, steps, m = x.shape
    xt = tg.transpose(x.reshape(batch * steps, m), (1, 0)).reshape(m, batch * steps, 1)
    return xt * p.w_var + p.b_var


def variable_selection(xi: Tensor, static_ctx: Tensor, p: VsnParams, batch: int, rate: float = 0.0,
                       rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Select among ``m`` embedded variables.

    ``xi`` is ``[m, B*tau, d]``.  Returns the combined ``[B, tau, d]`` tensor
    and the selection weights ``eta[B, tau, m]``.
    """
    m, n, d = xi.shape
    if m == 0:
        raise ContractError("variable selection needs at least one variable")
    steps = n // batch
    processed = grn(xi, None, p.var_grns, rate, rng)                        # [m, N, d]
    flat = tg.transpose(xi, (1, 0, 2)).reshape(batch, steps, m * d)
    eta = tg.softmax(grn(flat, static_ctx, p.select_grn, rate, rng), axis=-1)  # [B, tau, m]
    weights = tg.transpose(eta.reshape(n, m), (1, 0)).reshape(m, n, 1)
    combined = (processed * weights).sum(axis=0)                             # [N, d]
    return combined.reshape(batch, steps, d), eta


def lstm_forward(seq: Tensor, p: LstmParams, h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
    """LSTM over ``seq[B, tau, d_in]``; zero initial state unless given."""
    return tg.lstm(seq, p.w_x, p.w_h, p.b, h0, c0)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool, d_model: int) -> tuple[Tensor, Tensor]:
    """``softmax(Q K^T / sqrt(d_model), masked) V`` over the last two axes."""
    q, k, v = tg.as_tensor(q), tg.as_tensor(k), tg.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes do not line up: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = tg.matmul(q, tg.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_model))
    weights = tg.softmax_masked(scores, causal)
    return tg.matmul(weights, v), weights


def _check_heads(p: AttentionParams, d_model: int) -> int:
    h = p.w_q.shape[0]
    if d_model % h:
        raise ConfigError(f"d_model={d_model} is not divisible by {h} heads")
    return h


def imha(theta: Tensor, p: AttentionParams, causal: bool = True) -> tuple[Tensor, Tensor]:
    """Interpretable multi-head self-attention on ``theta[B, tau, d]``.

    Every head attends with its own query/key maps but reads the same
    value projection; head outputs are averaged and mapped back by ``W_H``.
    Returns the output and the per-head weights ``[B, h, tau, tau]``.
    """
    if not p.interpretable:
        raise ContractError("imha needs a shared value projection")
    theta = tg.as_tensor(theta)
    d_model = theta.shape[-1]
    _check_heads(p, d_model)
    x = theta.reshape(theta.shape[0], 1, *theta.shape[1:])      # [B, 1, tau, d]
    q, k = tg.matmul(x, p.w_q), tg.matmul(x, p.w_k)             # [B, h, tau, dh]
    v = dense(theta, p.w_v).reshape(theta.shape[0], 1, theta.shape[1], p.w_v.shape[-1])
    heads, weights = scaled_dot_attention(q, k, v, causal, d_model)
    return dense(heads.mean(axis=1), p.w_out), weights


def mha(theta: Tensor, p: AttentionParams, causal: bool = True) -> tuple[Tensor, Tensor]:
    """Standard multi-head attention with per-head values, concatenated then ``W_O``."""
    theta = tg.as_tensor(theta)
    d_model = theta.shape[-1]
    h = _check_heads(p, d_model)
    if p.w_v.ndim != 3:
        raise ContractError("mha needs per-head value projections [h, d, d_head]")
    x = theta.reshape(theta.shape[0], 1, *theta.shape[1:])
    q, k, v = tg.matmul(x, p.w_q), tg.matmul(x, p.w_k), tg.matmul(x, p.w_v)
    heads, weights = scaled_dot_attention(q, k, v, causal, d_model)   # [B, h, tau, dh]
    batch, steps = theta.shape[0], theta.shape[1]
    concat = tg.transpose(heads, (0, 2, 1, 3)).reshape(batch, steps, h * heads.shape[-1])
    return dense(concat, p.w_out), weights


# ---------------------------------------------------------------------------
# full networks
# ---------------------------------------------------------------------------

def _check_window(x, dims: ModelDims) -> Tensor:
    x = tg.as_tensor(np.asarray(x, dtype=float) if not isinstance(x, Tensor) else x)
    if x.ndim != 3 or x.shape[-1] != dims.n_inputs:
        raise DimensionError(f"expected input [batch, {dims.seq_len}, {dims.n_inputs}], got {x.shape}")
    if x.shape[1] < dims.seq_len:
        raise ContractError(f"window of {x.shape[1]} steps is shorter than the sequence length {dims.seq_len}")
    if x.shape[1] > dims.seq_len:
        raise ContractError(f"window of {x.shape[1]} steps is longer than the sequence length {dims.seq_len}")
    if not np.isfinite(x.data).all():
        raise ContractError("window contains undefined features")
    return x


def tft_forward(x, classes, params: ModelParams,
                rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Positions ``[B, tau]`` and diagnostics (``vsn_weights [B, tau, m]``, ``attention [B, h, tau, tau]``).

    ``rng`` switches dropout on (training); ``None`` evaluates deterministically.
    """
    dims, p = params.dims, params.net
    if dims.kind != "tft":
        raise ContractError(f"tft_forward called with a {dims.kind} model")
    x = _check_window(x, dims)
    rate = dims.dropout
    batch = x.shape[0]
    static = tg.take_rows(p.embedding, np.asarray(classes, dtype=int))   # [B, d]
    c_vsn = grn(static, None, p.static_vsn, rate, rng)
    c_enrich = grn(static, None, p.static_enrich, rate, rng)

    xi = variable_embeddings(x, p.vsn)
    selected, eta = variable_selection(xi, c_vsn, p.vsn, batch, rate, rng)
    temporal = add_norm(lstm_forward(selected, p.lstm), selected, p.post_lstm, rate, rng)
    enriched = grn(temporal, c_enrich, p.enrichment, rate, rng)
    attended, weights = imha(enriched, p.attention, causal=True)
    block = add_norm(attended, enriched, p.post_attention, rate, rng)
    block = grn(block, None, p.positionwise, rate, rng)
    block = add_norm(block, temporal, p.post_block, rate, rng)
    positions = bounded_position(dense(block, p.w_out, p.b_out)).reshape(batch, dims.seq_len)
    return positions, {"vsn_weights": eta.data, "attention": weights.data}


def bounded_position(z):
    """tanh scaled by ``POSITION_CAP`` so saturated float64 outputs stay inside (-1, 1)."""
    return tg.mul(tg.tanh(z), POSITION_CAP)


def lstm_dmn_forward(x, params: ModelParams, rng: np.random.Generator | None = None) -> Tensor:
    """Input dense -> LSTM -> dropout -> dense -> tanh; positions ``[B, tau]``."""
    dims, p = params.dims, params.net
    if dims.kind != "lstm":
        raise ContractError(f"lstm_dmn_forward called with a {dims.kind} model")
    x = _check_window(x, dims)
    hidden = lstm_forward(dense(x, p.w_in, p.b_in), p.lstm)
    hidden = tg.dropout(hidden, dims.dropout, rng)
    return bounded_position(dense(hidden, p.w_out, p.b_out)).reshape(x.shape[0], dims.seq_len)


def forward(x, classes, params: ModelParams, rng: np.random.Generator | None = None) -> Tensor:
    """Positions for either model kind."""
    if params.dims.kind == "tft":
        return tft_forward(x, classes, params, rng)[0]
    return lstm_dmn_forward(x, params, rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps (byte-identical reruns)."""
    header = {"format_version": FORMAT_VERSION, "dims": asdict(params.dims), "extra": extra or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        entries = [("__meta__.npy", np.array(json.dumps(header, sort_keys=True)))]
        entries += [(f"{name}.npy", t.data) for name, t in params.named_tensors()]
        for name, arr in entries:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, _npy_bytes(arr))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_checkpoint`; returns the params and the ``extra`` dict."""
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ContractError(f"{path}: not a model checkpoint")
        header = json.loads(archive["__meta__"].item())
        if header.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
        arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
    params = init_params(ModelDims(**header["dims"]), seed=0)
    params.load_arrays(arrays)
    return params, header["extra"]
