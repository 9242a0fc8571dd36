"""The hybrid architecture: a strided 1-D conv encoder over the 6-channel
input window, a pre-norm transformer stack over the compressed sequence, and
a single-logit linear head. The CNN-only ablation reuses the conv encoder
and head and skips the transformer.

Unspecified-by-design defaults, pinned by tests: ReLU after each conv layer,
fixed sinusoidal position encoding added once after the encoder (switchable
off), GELU inside the feed-forward, pre-norm residual blocks with a final
layer norm, mean pooling over positions, dropout on attention weights and on
the feed-forward output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import InputTransform
from .errors import CheckpointError, NumericError, ShapeError, ValidationError

CHECKPOINT_MAGIC = b"WFCKPT01"
CHECKPOINT_VERSION = 1

ARCHS = ("full", "cnn_only")


@dataclass(frozen=True)
class ModelConfig:
    conv_spec: tuple[tuple[int, int, int], ...] = ((5, 2, 256), (3, 2, 128), (1, 2, 64))
    n_transformer_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 256
    dropout_rate: float = 0.1
    pooling: str = "mean"                    # mean | first
    positional_encoding: str = "sinusoidal"  # sinusoidal | none
    input_channels: int = 6
    input_length: int = 5760
    arch: str = "full"                       # full | cnn_only

    @property
    def width(self) -> int:
        return self.conv_spec[-1][2]

    def validate(self) -> None:
        if not self.conv_spec:
            raise ValidationError("conv_spec must have at least one layer")
        for k, s, c in self.conv_spec:
            if k < 1 or s < 1 or c < 1:
                raise ValidationError(f"bad conv layer spec (k={k}, s={s}, c={c})")
        if self.width % self.n_heads != 0:
            raise ValidationError(
                f"model width {self.width} not divisible by n_heads {self.n_heads}")
        if self.pooling not in ("mean", "first"):
            raise ValidationError(f"pooling {self.pooling!r} not in {{mean, first}}")
        if self.positional_encoding not in ("sinusoidal", "none"):
            raise ValidationError(f"positional_encoding {self.positional_encoding!r} invalid")
        if self.arch not in ARCHS:
            raise ValidationError(f"arch {self.arch!r} not in {ARCHS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate {self.dropout_rate} outside [0,1)")
        if self.sequence_lengths()[-1] < 1:
            raise ValidationError("conv stack reduces the input to an empty sequence")

    def sequence_lengths(self) -> list[int]:
        """Lengths after each conv layer, starting from input_length."""
        lengths = [self.input_length]
        for k, s, _ in self.conv_spec:
            lengths.append(ad.conv1d_output_length(lengths[-1], k, s))
        return lengths[1:]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_spec"] = [list(layer) for layer in self.conv_spec]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_spec"] = tuple(tuple(layer) for layer in d["conv_spec"])
        return cls(**d)


@dataclass
class ModelParams:
    """Named parameter tensors plus the input transform they were fit with."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    transform: InputTransform | None = None

    def parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def trainable(self) -> dict[str, Tensor]:
        """Parameters consulted by the configured architecture."""
        if self.config.arch == "full":
            return self.tensors
        keep = {}
        for name, t in self.tensors.items():
            if name.startswith(("conv", "head")):
                keep[name] = t
        return keep

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: Tensor(v.data.copy(), parameter=True, name=k)
                     for k, v in self.tensors.items()},
            transform=self.transform,
        )

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite values in parameter {name!r}")


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.input_channels
    for i, (k, _s, c_out) in enumerate(config.conv_spec):
        shapes[f"conv{i}.w"] = (c_out, c_in, k)
        shapes[f"conv{i}.b"] = (c_out,)
        c_in = c_out
    d = config.width
    for layer in range(config.n_transformer_layers):
        p = f"block{layer}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{proj}"] = (d, d)
        for proj in ("bq", "bk", "bv", "bo"):
            shapes[p + f"attn.{proj}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, config.ffn_hidden)
        shapes[p + "ffn.b1"] = (config.ffn_hidden,)
        shapes[p + "ffn.w2"] = (config.ffn_hidden, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_params(config: ModelConfig, seed: int,
                transform: InputTransform | None = None) -> ModelParams:
    """Fan-in-scaled Gaussian weights, zero biases, unit norm gains.

    Conv and first feed-forward weights (pre-ReLU/GELU) use std sqrt(2/fan_in);
    the rest use sqrt(1/fan_in).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            data = np.zeros(shape)
        elif name.endswith(("ln1.g", "ln2.g", "final_ln.g")):
            data = np.ones(shape)
        elif name.endswith(("ln1.b", "ln2.b", "final_ln.b")):
            data = np.zeros(shape)
        else:
            if name.startswith("conv"):
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
            elif name.endswith("ffn.w1"):
                fan_in = shape[0]
                std = np.sqrt(2.0 / fan_in)
            else:
                fan_in = shape[0]
                std = np.sqrt(1.0 / fan_in)
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, parameter=True, name=name)
    return ModelParams(config=config, tensors=tensors, transform=transform)


def reinit_head(params: ModelParams, seed: int) -> None:
    """Fresh classifier weights (used when finetuning replaces the head)."""
    rng = np.random.default_rng(seed)
    d = params.config.width
    params.tensors["head.w"].data = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, 1))
    params.tensors["head.b"].data = np.zeros(1)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    key = (length, width)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        i = np.arange(width // 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * i / width)
        pe = np.zeros((length, width))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _PE_CACHE[key] = pe
    return pe


def _check_finite(data: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite activation in {stage}")


def _as_batched_input(x, config: ModelConfig) -> tuple[Tensor | np.ndarray, bool]:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
        x = data
        squeezed = True
    else:
        squeezed = False
    if data.ndim != 3 or data.shape[1] != config.input_channels or data.shape[2] != config.input_length:
        raise ShapeError(
            f"input shape {data.shape[1:]} != ({config.input_channels}, {config.input_length})")
    return x, squeezed


def conv_encoder_forward(x, params: ModelParams) -> Tensor:
    """(B, C, L) window batch -> (B, L', width) sequence (ReLU between layers)."""
    config = params.config
    h = x
    for i in range(len(config.conv_spec)):
        stride = config.conv_spec[i][1]
        h = ad.conv1d(h, params.tensors[f"conv{i}.w"], params.tensors[f"conv{i}.b"], stride)
        h = ad.relu(h)
    seq = ad.swap_last2(h)  # (B, L', width)
    _check_finite(seq.data, "conv encoder")
    return seq


def _attention_block(seq: Tensor, params: ModelParams, layer: int,
                     drop: ad.DropoutSpec | None) -> Tensor:
    config = params.config
    p = f"block{layer}."
    t = params.tensors
    batch, length, d = seq.data.shape
    n_heads = config.n_heads
    d_head = d // n_heads

    normed = ad.layer_norm(seq, t[p + "ln1.g"], t[p + "ln1.b"])

    def project(w, b):
        proj = ad.add(ad.matmul(normed, t[p + f"attn.{w}"]), t[p + f"attn.{b}"])
        heads = ad.reshape(proj, (batch, length, n_heads, d_head))
        return ad.transpose(heads, (0, 2, 1, 3))  # (B, h, L, d_head)

    q = project("wq", "bq")
    k = project("wk", "bk")
    v = project("wv", "bv")
    ctx = ad.scaled_dot_attention(q, k, v, attn_dropout=drop)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, length, d))
    out = ad.add(ad.matmul(merged, t[p + "attn.wo"]), t[p + "attn.bo"])
    return ad.add(seq, out)


def _ffn_block(seq: Tensor, params: ModelParams, layer: int,
               drop: ad.DropoutSpec | None) -> Tensor:
    p = f"block{layer}."
    t = params.tensors
    normed = ad.layer_norm(seq, t[p + "ln2.g"], t[p + "ln2.b"])
    h = ad.gelu(ad.add(ad.matmul(normed, t[p + "ffn.w1"]), t[p + "ffn.b1"]))
    h = ad.add(ad.matmul(h, t[p + "ffn.w2"]), t[p + "ffn.b2"])
    if drop is not None:
        h = ad.dropout(h, drop.rate, drop.rng)
    return ad.add(seq, h)


def transformer_forward(seq, params: ModelParams, dropout_active: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm transformer stack over a (B, L', width) sequence."""
    config = params.config
    if not isinstance(seq, Tensor):
        seq = Tensor(np.asarray(seq, dtype=np.float64))
    if seq.data.ndim == 2:
        seq = ad.reshape(seq, (1, *seq.data.shape))
    if seq.data.shape[-1] != config.width:
        raise ShapeError(f"sequence width {seq.data.shape[-1]} != model width {config.width}")
    drop = None
    if dropout_active and config.dropout_rate > 0.0:
        if rng is None:
            raise ValidationError("dropout_active requires an RNG")
        drop = ad.DropoutSpec(config.dropout_rate, rng)
    if config.positional_encoding == "sinusoidal":
        seq = ad.add(seq, sinusoidal_encoding(seq.data.shape[1], config.width))
    for layer in range(config.n_transformer_layers):
        seq = _attention_block(seq, params, layer, drop)
        seq = _ffn_block(seq, params, layer, drop)
    seq = ad.layer_norm(seq, params.tensors["final_ln.g"], params.tensors["final_ln.b"])
    _check_finite(seq.data, "transformer stack")
    return seq


def _pool(seq: Tensor, config: ModelConfig) -> Tensor:
    if config.pooling == "mean":
        return ad.mean(seq, axis=-2)
    return seq[:, 0, :]


def _head(pooled: Tensor, params: ModelParams) -> Tensor:
    logits = ad.add(ad.matmul(pooled, params.tensors["head.w"]), params.tensors["head.b"])
    out = ad.reshape(logits, (logits.data.shape[0],))
    _check_finite(out.data, "classifier head")
    return out


def forward(x, params: ModelParams, dropout_active: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Window batch -> logits (B,). Accepts (C, L) or (B, C, L) input."""
    x, _ = _as_batched_input(x, params.config)
    seq = conv_encoder_forward(x, params)
    seq = transformer_forward(seq, params, dropout_active=dropout_active, rng=rng)
    return _head(_pool(seq, params.config), params)


def cnn_only_forward(x, params: ModelParams, dropout_active: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Ablation: conv encoder -> pooling -> head; transformer untouched."""
    x, _ = _as_batched_input(x, params.config)
    seq = conv_encoder_forward(x, params)
    return _head(_pool(seq, params.config), params)


def forward_for_arch(x, params: ModelParams, dropout_active: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    if params.config.arch == "cnn_only":
        return cnn_only_forward(x, params, dropout_active, rng)
    return forward(x, params, dropout_active=dropout_active, rng=rng)


def score_windows(params: ModelParams, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode sigmoid scores for already-transformed inputs (N, C, L)."""
    from scipy.special import expit
    scores = np.empty(len(inputs))
    for lo in range(0, len(inputs), batch_size):
        chunk = inputs[lo:lo + batch_size]
        logits = forward_for_arch(chunk, params, dropout_active=False)
        scores[lo:lo + len(chunk)] = expit(logits.data)
    return scores


# ---------------------------------------------------------------------------
# checkpoints: JSON header + little-endian float64 blob
# ---------------------------------------------------------------------------
# layout: 8-byte magic, u64-LE header length, UTF-8 JSON header, raw blob.
# The header lists every array's name/shape/offset; arrays are C-order f64-LE.

def save_checkpoint(params: ModelParams, path: str | Path, role: str = "trained",
                    extra: dict | None = None) -> None:
    params.check_finite()
    names = sorted(params.tensors)
    arrays = []
    offset = 0
    blobs = []
    for name in names:
        data = np.ascontiguousarray(params.tensors[name].data, dtype="<f8")
        arrays.append({"name": name, "shape": list(data.shape),
                       "offset": offset, "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "role": role,
        "model_config": params.config.to_dict(),
        "transform": None if params.transform is None else params.transform.to_dict(),
        "arrays": arrays,
        "blob_bytes": offset,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None
                    ) -> tuple[ModelParams, dict]:
    """Returns (params, header metadata). Bitwise-exact round trip."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: checkpoint config does not match the expected config")
    blob = raw[16 + header_len:]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointError(f"{path}: blob length {len(blob)} != {header['blob_bytes']}")
    expected_shapes = _param_shapes(config)
    tensors: dict[str, Tensor] = {}
    for entry in header["arrays"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        want = expected_shapes.get(name)
        if want is None:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        if shape != want:
            raise CheckpointError(f"{path}: parameter {name!r} shape {shape} != expected {want}")
        start = entry["offset"]
        data = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)),
                             offset=start).reshape(shape).copy()
        tensors[name] = Tensor(data, parameter=True, name=name)
    missing = set(expected_shapes) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: parameters missing from checkpoint: {sorted(missing)}")
    transform = None
    if header.get("transform") is not None:
        transform = InputTransform.from_dict(header["transform"])
    params = ModelParams(config=config, tensors=tensors, transform=transform)
    meta = {"role": header.get("role", "trained"), "extra": header.get("extra", {})}
    return params, meta
