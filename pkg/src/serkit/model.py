"""CNN-Transformer emotion classifier plus an MFCC-statistics MLP baseline.

The main network maps a normalized log-Mel map (1 x F x T) to four class
logits. Three conv / batch-norm / relu / max-pool blocks shrink the map,
each remaining time step's channel-by-frequency column becomes one token,
a learned linear projection lifts tokens to the model width, sinusoidal
positional encodings are added, a stack of post-norm Transformer encoder
layers mixes the sequence, and global average pooling over time feeds a
linear classifier. Softmax is deferred to the loss (or to predict time).

Parameters live in a plain name -> Tensor dict whose insertion order is
fixed by ``param_shapes``; the checkpoint format serializes that order, so
it must never change silently.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadCheckpoint, BadMagic, ShapeMismatch, VersionMismatch
from .rng import STREAM_INIT, derived_rng

LABELS = ("anger", "happiness", "sadness", "neutral")
LABEL_TO_INDEX = {name: i for i, name in enumerate(LABELS)}

CHECKPOINT_MAGIC = b"SERCKPT1"
CHECKPOINT_VERSION = 1

# MFCC-statistics baseline: 13 means + 13 stds in, one hidden layer.
MLP_INPUT_DIM = 26
MLP_HIDDEN_DIM = 128


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters; defaults are the flagship configuration."""

    n_mels: int = 128
    input_frames: int = 300
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    conv_kernel: int = 3
    n_encoder_layers: int = 4
    n_heads: int = 8
    d_model: int = 256
    d_ff: int = 512
    n_classes: int = 4
    dropout_p: float = 0.3
    bn_momentum: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.conv_channels) != 3:
            raise ValueError("exactly three conv blocks are supported")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv kernel must be odd so padding preserves shape")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sin/cos positional pairs")
        if self.n_mels < 8 or self.input_frames < 8:
            raise ValueError("input must survive three 2x2 poolings (both dims >= 8)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def freq_out(self) -> int:
        f = self.n_mels
        for _ in range(3):
            f //= 2
        return f

    @property
    def seq_len(self) -> int:
        t = self.input_frames
        for _ in range(3):
            t //= 2
        return t

    @property
    def d_feat(self) -> int:
        return self.conv_channels[-1] * self.freq_out

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table: PE[p, 2i] = sin(p / 10000^(2i/d)),
    PE[p, 2i+1] = cos of the same argument. Float64, no parameters."""
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((seq_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# --- parameter bookkeeping ---------------------------------------------------

def param_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map. Iteration order here is the checkpoint
    order; batch-norm running statistics are included (they are state, not
    trainable parameters, but eval mode needs them)."""
    k = config.conv_kernel
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for idx, c_out in enumerate(config.conv_channels, start=1):
        p = f"conv{idx}."
        shapes[p + "kernel"] = (c_out, c_in, k, k)
        shapes[p + "bias"] = (c_out,)
        shapes[p + "bn_gamma"] = (c_out,)
        shapes[p + "bn_beta"] = (c_out,)
        shapes[p + "bn_mean"] = (c_out,)
        shapes[p + "bn_var"] = (c_out,)
        shapes[p + "bn_steps"] = ()
        c_in = c_out
    shapes["proj.weight"] = (config.d_feat, config.d_model)
    shapes["proj.bias"] = (config.d_model,)
    for idx in range(1, config.n_encoder_layers + 1):
        p = f"enc{idx}."
        for nm in ("q", "k", "v", "o"):
            shapes[p + f"attn_w{nm}"] = (config.d_model, config.d_model)
            shapes[p + f"attn_b{nm}"] = (config.d_model,)
        shapes[p + "ln1_gamma"] = (config.d_model,)
        shapes[p + "ln1_beta"] = (config.d_model,)
        shapes[p + "ffn_w1"] = (config.d_model, config.d_ff)
        shapes[p + "ffn_b1"] = (config.d_ff,)
        shapes[p + "ffn_w2"] = (config.d_ff, config.d_model)
        shapes[p + "ffn_b2"] = (config.d_model,)
        shapes[p + "ln2_gamma"] = (config.d_model,)
        shapes[p + "ln2_beta"] = (config.d_model,)
    shapes["head.weight"] = (config.d_model, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def is_buffer(name: str) -> bool:
    """True for state tensors that are carried but never receive gradients."""
    return name.endswith(("bn_mean", "bn_var", "bn_steps"))


def _init_tensor(name: str, shape: tuple[int, ...],
                 rng: np.random.Generator, dtype) -> Tensor:
    leaf = name.rsplit(".", 1)[-1]
    # Weights are exactly the tensors with 2+ axes; 1-D tensors are biases,
    # scales, shifts, or running statistics.
    if len(shape) >= 2:
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        values = rng.uniform(-bound, bound, size=shape)
        return Tensor(values.astype(dtype), requires_grad=True)
    if leaf == "bn_var":
        return Tensor(np.ones(shape, dtype=dtype))
    if leaf in ("bn_mean", "bn_steps"):
        return Tensor(np.zeros(shape, dtype=dtype))
    if leaf.endswith("gamma"):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
    # biases and shift terms start at zero
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_params(config: ArchConfig, seed: int) -> dict[str, Tensor]:
    """Fan-scaled uniform weights (bound sqrt(6/(fan_in+fan_out))), zero
    biases/shifts, unit scales. Deterministic in the seed."""
    rng = derived_rng(seed, STREAM_INIT)
    return {name: _init_tensor(name, shape, rng, config.np_dtype)
            for name, shape in param_shapes(config).items()}


def count_params(config: ArchConfig) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return int(np.sum([np.prod(shape) for name, shape in param_shapes(config).items()
                       if not is_buffer(name)]))


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Deep copy of values (grads and graph state are not carried over)."""
    return {name: Tensor(t.values.copy(), requires_grad=t.requires_grad)
            for name, t in params.items()}


# --- forward passes ----------------------------------------------------------

def _apply_dropout(t: Tensor, p: float, training: bool, streams) -> Tensor:
    if not training or p == 0.0:
        return t
    if streams is None:
        raise ValueError("training-mode forward needs dropout streams")
    return ad.dropout(t, p, training=True, rng=streams.next())


def cnn_frontend(x, params: dict[str, Tensor], config: ArchConfig,
                 training: bool = False) -> Tensor:
    """N x 1 x F x T input -> N x seq_len x d_feat token sequence.

    Each block is conv(3x3, pad 1, stride 1) -> batch norm -> relu ->
    2x2 max pool. Tokens are time steps; the feature vector of a token is
    the flattened (channel, frequency) column at that time step.
    """
    t = x if isinstance(x, Tensor) else Tensor(x)
    expected = (1, config.n_mels, config.input_frames)
    if t.ndim != 4 or t.shape[1:] != expected:
        raise ShapeMismatch(f"expected N x {expected} input, got {t.shape}")
    pad = config.conv_kernel // 2
    for idx in range(1, 4):
        p = f"conv{idx}."
        t = ad.conv2d(t, params[p + "kernel"], params[p + "bias"], padding=pad)
        t = ad.batch_norm2d(t, params[p + "bn_gamma"], params[p + "bn_beta"],
                            params[p + "bn_mean"], params[p + "bn_var"],
                            training=training, momentum=config.bn_momentum,
                            steps=params[p + "bn_steps"])
        t = ad.relu(t)
        t = ad.maxpool2d(t)
    n, c, f, s = t.shape
    t = ad.transpose(t, (0, 3, 1, 2))
    return ad.reshape(t, (n, s, c * f))


def _multi_head_attention(x: Tensor, params: dict[str, Tensor], prefix: str,
                          config: ArchConfig) -> tuple[Tensor, Tensor]:
    """Returns (attention output before W^O-dropout, attention probabilities).

    Probabilities have shape N x heads x S x S with rows summing to 1.
    """
    n, s, d = x.shape
    h, dk = config.n_heads, config.d_k
    q = ad.linear(x, params[prefix + "attn_wq"], params[prefix + "attn_bq"])
    k = ad.linear(x, params[prefix + "attn_wk"], params[prefix + "attn_bk"])
    v = ad.linear(x, params[prefix + "attn_wv"], params[prefix + "attn_bv"])

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (n, s, h, dk)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    probs = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(probs, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, s, d))
    out = ad.linear(ctx, params[prefix + "attn_wo"], params[prefix + "attn_bo"])
    return out, probs


def attention_probs(x, params: dict[str, Tensor], prefix: str,
                    config: ArchConfig) -> np.ndarray:
    """Eval-mode attention weight tensor (N x heads x S x S) for inspection."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    with ad.no_grad():
        _, probs = _multi_head_attention(t, params, prefix, config)
    return probs.values


def encoder_layer(x, params: dict[str, Tensor], prefix: str, config: ArchConfig,
                  training: bool = False, dropout_streams=None) -> Tensor:
    """Post-norm residual layer:
    x1 = LN(x + Drop(MHA(x))); out = LN(x1 + Drop(FFN(x1)))."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 3 or t.shape[-1] != config.d_model:
        raise ShapeMismatch(f"expected N x S x {config.d_model}, got {t.shape}")
    mha, _ = _multi_head_attention(t, params, prefix, config)
    mha = _apply_dropout(mha, config.dropout_p, training, dropout_streams)
    x1 = ad.layer_norm(ad.add(t, mha),
                       params[prefix + "ln1_gamma"], params[prefix + "ln1_beta"])
    ffn = ad.linear(ad.relu(ad.linear(x1, params[prefix + "ffn_w1"],
                                      params[prefix + "ffn_b1"])),
                    params[prefix + "ffn_w2"], params[prefix + "ffn_b2"])
    ffn = _apply_dropout(ffn, config.dropout_p, training, dropout_streams)
    return ad.layer_norm(ad.add(x1, ffn),
                         params[prefix + "ln2_gamma"], params[prefix + "ln2_beta"])


def forward(x, params: dict[str, Tensor], config: ArchConfig,
            training: bool = False, dropout_streams=None) -> Tensor:
    """Full network: N x 1 x F x T log-Mel maps -> N x n_classes logits."""
    tokens = cnn_frontend(x, params, config, training=training)
    t = ad.linear(tokens, params["proj.weight"], params["proj.bias"])
    pe = positional_encoding(config.seq_len, config.d_model).astype(t.dtype)
    t = ad.add(t, Tensor(pe))
    t = _apply_dropout(t, config.dropout_p, training, dropout_streams)
    for idx in range(1, config.n_encoder_layers + 1):
        t = encoder_layer(t, params, f"enc{idx}.", config,
                          training=training, dropout_streams=dropout_streams)
    pooled = ad.mean(t, axis=1)
    return ad.linear(pooled, params["head.weight"], params["head.bias"])


def predict_proba(x, params: dict[str, Tensor], config: ArchConfig) -> np.ndarray:
    """Eval-mode class probabilities (softmax over logits), N x n_classes."""
    with ad.no_grad():
        logits = forward(x, params, config, training=False)
        return ad.softmax(logits, axis=-1).values


# --- MLP baseline ------------------------------------------------------------

def mlp_param_shapes(n_features: int = MLP_INPUT_DIM, n_hidden: int = MLP_HIDDEN_DIM,
                     n_classes: int = len(LABELS)) -> dict[str, tuple[int, ...]]:
    return {
        "mlp.w1": (n_features, n_hidden),
        "mlp.b1": (n_hidden,),
        "mlp.w2": (n_hidden, n_classes),
        "mlp.b2": (n_classes,),
    }


def init_mlp_params(seed: int, n_features: int = MLP_INPUT_DIM,
                    n_hidden: int = MLP_HIDDEN_DIM, n_classes: int = len(LABELS),
                    dtype=np.float32) -> dict[str, Tensor]:
    rng = derived_rng(seed, STREAM_INIT)
    shapes = mlp_param_shapes(n_features, n_hidden, n_classes)
    return {name: _init_tensor(name, shape, rng, dtype)
            for name, shape in shapes.items()}


def mlp_baseline_forward(x, params: dict[str, Tensor], training: bool = False,
                         dropout_p: float = 0.3, rng=None) -> Tensor:
    """MFCC-statistics baseline: linear -> relu -> dropout -> linear."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 2 or t.shape[1] != params["mlp.w1"].shape[0]:
        raise ShapeMismatch(f"expected N x {params['mlp.w1'].shape[0]}, got {t.shape}")
    hidden = ad.relu(ad.linear(t, params["mlp.w1"], params["mlp.b1"]))
    hidden = ad.dropout(hidden, dropout_p, training=training, rng=rng)
    return ad.linear(hidden, params["mlp.w2"], params["mlp.b2"])


# --- checkpoint serialization -------------------------------------------------

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1}


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    """Binary dump of every tensor in dict order; round-trips bitwise."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, tensor in params.items():
        # not ascontiguousarray: that would promote 0-D counters to shape (1,)
        arr = np.asarray(tensor.values)
        kind = arr.dtype.str.lstrip("<>=|")
        if kind not in _CODE_FOR_KIND:
            raise BadCheckpoint(f"tensor {name!r} has unserializable dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _CODE_FOR_KIND[kind], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(f"<{kind}", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, expected: dict[str, tuple[int, ...]] | None = None
                    ) -> dict[str, Tensor]:
    """Read a checkpoint; when ``expected`` (name -> shape, in order) is given,
    the file must match it exactly, else ShapeMismatch names the offender."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise BadMagic(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")

    params: dict[str, Tensor] = {}
    for _ in range(count):
        if off + 2 > len(blob):
            raise BadCheckpoint(f"{path}: truncated tensor header")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + name_len + 2 > len(blob):
            raise BadCheckpoint(f"{path}: truncated tensor record")
        try:
            name = blob[off:off + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadCheckpoint(f"{path}: undecodable tensor name") from exc
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _DTYPE_CODES:
            raise BadCheckpoint(f"{path}: unknown dtype code {code} for {name!r}")
        if off + 4 * ndim > len(blob):
            raise BadCheckpoint(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(blob):
            raise ShapeMismatch(
                f"{path}: tensor {name!r} declares shape {tuple(dims)} but the "
                f"file ends early")
        values = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)),
                               offset=off).reshape(dims).copy()
        off += nbytes
        if name in params:
            raise BadCheckpoint(f"{path}: duplicate tensor {name!r}")
        params[name] = Tensor(values, requires_grad=not is_buffer(name))
    if off != len(blob):
        raise BadCheckpoint(f"{path}: {len(blob) - off} trailing bytes")

    if expected is not None:
        for name, shape in expected.items():
            if name not in params:
                raise ShapeMismatch(f"{path}: missing tensor {name!r}")
            if params[name].shape != tuple(shape):
                raise ShapeMismatch(
                    f"{path}: tensor {name!r} has shape {params[name].shape}, "
                    f"expected {tuple(shape)}")
        extra = [n for n in params if n not in expected]
        if extra:
            raise ShapeMismatch(f"{path}: unexpected tensor {extra[0]!r}")
        if list(params) != list(expected):
            params = {name: params[name] for name in expected}
    return params
