"""Dual-branch transformer encoder ensemble and its single-branch baseline.

Each branch embeds ids (word + segment + position), runs pre-norm
attention blocks, and is pooled at the CLS position.  The ensemble
concatenates both branches' CLS vectors and classifies through a small
two-layer head; the baseline classifies one branch's CLS vector through
a single affine map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import numcore as nc
from .errors import DataError, ShapeError
from .numcore import Tensor
from .pairseq import BatchBlock, EncodedPair, PairBatch, PairOrder

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"MEDER1\n"

_CONFIG_INT_FIELDS = (
    "vocab_size", "max_len", "d_model", "n_heads", "n_layers",
    "d_ff", "n_classes", "d_hidden", "seed",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    n_classes: int = 6
    d_hidden: int = 0  # 0 means "use d_model"
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_hidden == 0:
            object.__setattr__(self, "d_hidden", self.d_model)
        for field in ("vocab_size", "max_len", "d_model", "n_heads", "n_layers",
                      "d_ff", "n_classes", "d_hidden"):
            v = getattr(self, field)
            low = 0 if field == "n_layers" else 1
            if not isinstance(v, int) or v < low:
                raise DataError(f"{field} must be an integer >= {low}, got {v!r}")
        if self.vocab_size < 4:
            raise DataError(f"vocab_size must cover the 4 specials, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise DataError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with resampling outside 2 standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout via a constant mask; identity when rng is None."""
    if rng is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / x.data.dtype.type(keep)
    return nc.mul(x, Tensor(mask))


class EncoderBranch:
    """One encoder stack: embeddings plus n_layers pre-norm blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, prefix: str):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ff
        p: dict[str, Tensor] = {}

        def add(name: str, data) -> None:
            p[name] = nc.param(data, prefix + name)

        add("word_emb", trunc_normal(rng, (cfg.vocab_size, d)))
        add("seg_emb", trunc_normal(rng, (2, d)))
        add("pos_emb", trunc_normal(rng, (cfg.max_len, d)))
        for i in range(cfg.n_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                add(f"layer{i}.attn.{proj}", trunc_normal(rng, (d, d)))
            for proj in ("bq", "bk", "bv", "bo"):
                add(f"layer{i}.attn.{proj}", np.zeros(d))
            add(f"layer{i}.ln1.gain", np.ones(d))
            add(f"layer{i}.ln1.bias", np.zeros(d))
            add(f"layer{i}.ffn.w1", trunc_normal(rng, (d, f)))
            add(f"layer{i}.ffn.b1", np.zeros(f))
            add(f"layer{i}.ffn.w2", trunc_normal(rng, (f, d)))
            add(f"layer{i}.ffn.b2", np.zeros(d))
            add(f"layer{i}.ln2.gain", np.ones(d))
            add(f"layer{i}.ln2.bias", np.zeros(d))
        self.params = p


def embed(branch: EncoderBranch, input_ids: np.ndarray, segment_ids: np.ndarray) -> Tensor:
    """Sum of word, segment and position embeddings, shape [B, L, d_model]."""
    input_ids = np.asarray(input_ids)
    segment_ids = np.asarray(segment_ids)
    if input_ids.shape != segment_ids.shape:
        raise ShapeError(
            f"input_ids {input_ids.shape} and segment_ids {segment_ids.shape} disagree"
        )
    seq_len = input_ids.shape[-1]
    if seq_len > branch.cfg.max_len:
        raise ShapeError(
            f"sequence length {seq_len} exceeds max_len {branch.cfg.max_len}"
        )
    p = branch.params
    h = nc.add(
        nc.embedding_lookup(p["word_emb"], input_ids),
        nc.embedding_lookup(p["seg_emb"], segment_ids),
    )
    return nc.add(h, nc.embedding_lookup(p["pos_emb"], np.arange(seq_len)))


def _attention(
    branch: EncoderBranch,
    i: int,
    x: Tensor,
    attention_mask: np.ndarray,
    rng: Optional[np.random.Generator],
) -> Tensor:
    cfg = branch.cfg
    p = branch.params
    batch, seq_len, d = x.data.shape
    heads, dh = cfg.n_heads, cfg.d_head

    def project(tag: str) -> Tensor:
        y = nc.add(nc.matmul(x, p[f"layer{i}.attn.w{tag}"]), p[f"layer{i}.attn.b{tag}"])
        y = nc.reshape(y, (batch, seq_len, heads, dh))
        return nc.transpose(y, (0, 2, 1, 3))

    q, k, v = project("q"), project("k"), project("v")
    scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    key_mask = (np.asarray(attention_mask) == 0).reshape(batch, 1, 1, seq_len)
    weights = nc.row_softmax(nc.masked_fill(scores, key_mask))
    weights = dropout(weights, cfg.dropout_rate, rng)
    ctx = nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3))
    ctx = nc.reshape(ctx, (batch, seq_len, d))
    return nc.add(nc.matmul(ctx, p[f"layer{i}.attn.wo"]), p[f"layer{i}.attn.bo"])


def encode(
    branch: EncoderBranch,
    hidden: Tensor,
    attention_mask: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run the pre-norm block stack over embedded inputs.

    Keys at masked positions get -1e9 attention logits, so padding
    cannot influence any unmasked position.
    """
    mask = np.asarray(attention_mask)
    if hidden.data.ndim != 3:
        raise ShapeError(f"encode expects [batch, len, d_model] hidden, got {hidden.data.shape}")
    if mask.shape != hidden.data.shape[:2]:
        raise ShapeError(
            f"attention_mask {mask.shape} does not match hidden {hidden.data.shape}"
        )
    p = branch.params
    h = hidden
    for i in range(branch.cfg.n_layers):
        normed = nc.layer_norm(h, p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"])
        attn = dropout(_attention(branch, i, normed, mask, rng), branch.cfg.dropout_rate, rng)
        h = nc.add(h, attn)
        normed = nc.layer_norm(h, p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"])
        ff = nc.add(nc.matmul(normed, p[f"layer{i}.ffn.w1"]), p[f"layer{i}.ffn.b1"])
        ff = nc.add(nc.matmul(nc.gelu(ff), p[f"layer{i}.ffn.w2"]), p[f"layer{i}.ffn.b2"])
        h = nc.add(h, dropout(ff, branch.cfg.dropout_rate, rng))
    return h


def encode_cls(
    branch: EncoderBranch,
    input_ids: np.ndarray,
    segment_ids: np.ndarray,
    attention_mask: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Embed, encode, and pool the CLS position: [B, d_model]."""
    h = embed(branch, input_ids, segment_ids)
    h = dropout(h, branch.cfg.dropout_rate, rng)
    h = encode(branch, h, attention_mask, rng)
    return nc.select(h, 0, axis=1)


class EnsembleModel:
    """Two independent branches, concatenated CLS vectors, 2-layer head."""

    kind = "ensemble"

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.branch1 = EncoderBranch(config, rng, "branch1.")
        self.branch2 = EncoderBranch(config, rng, "branch2.")
        d, hdim, c = config.d_model, config.d_hidden, config.n_classes
        self.head = {
            "w1": nc.param(trunc_normal(rng, (2 * d, hdim)), "head.w1"),
            "b1": nc.param(np.zeros(hdim), "head.b1"),
            "w2": nc.param(trunc_normal(rng, (hdim, c)), "head.w2"),
            "b2": nc.param(np.zeros(c), "head.b2"),
        }

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, group in (
            ("branch1.", self.branch1.params),
            ("branch2.", self.branch2.params),
            ("head.", self.head),
        ):
            for name, t in group.items():
                out[prefix + name] = t
        return out


class SingleModel:
    """One branch, CLS vector straight into an affine classifier."""

    kind = "single"

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.branch = EncoderBranch(config, rng, "branch.")
        self.head = {
            "w": nc.param(trunc_normal(rng, (config.d_model, config.n_classes)), "head.w"),
            "b": nc.param(np.zeros(config.n_classes), "head.b"),
        }

    def parameters(self) -> dict[str, Tensor]:
        out = {f"branch.{name}": t for name, t in self.branch.params.items()}
        out.update({f"head.{name}": t for name, t in self.head.items()})
        return out


def count_params(model: Union[EnsembleModel, SingleModel]) -> int:
    return sum(int(t.data.size) for t in model.parameters().values())


def forward_single_batch(
    m: SingleModel, block: BatchBlock, rng: Optional[np.random.Generator] = None
) -> Tensor:
    cls = encode_cls(m.branch, block.input_ids, block.segment_ids, block.attention_mask, rng)
    cls = dropout(cls, m.config.dropout_rate, rng)
    return nc.add(nc.matmul(cls, m.head["w"]), m.head["b"])


def forward_single(
    m: SingleModel, pair: EncodedPair, rng: Optional[np.random.Generator] = None
) -> Tensor:
    block = BatchBlock(
        input_ids=np.array([pair.input_ids], dtype=np.int64),
        segment_ids=np.array([pair.segment_ids], dtype=np.int64),
        attention_mask=np.array([pair.attention_mask], dtype=np.int64),
        order=pair.order,
    )
    return nc.reshape(forward_single_batch(m, block, rng), (m.config.n_classes,))


def forward_ensemble_batch(
    m: EnsembleModel,
    first: BatchBlock,
    second: BatchBlock,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    if first.order is not PairOrder.TEXT_FIRST or second.order is not PairOrder.ENTITY_FIRST:
        raise DataError(
            f"ensemble forward needs (text_first, entity_first) blocks, "
            f"got ({first.order.value}, {second.order.value})"
        )
    cls1 = encode_cls(m.branch1, first.input_ids, first.segment_ids, first.attention_mask, rng)
    cls2 = encode_cls(m.branch2, second.input_ids, second.segment_ids, second.attention_mask, rng)
    joined = dropout(nc.concat([cls1, cls2], axis=-1), m.config.dropout_rate, rng)
    hidden = nc.gelu(nc.add(nc.matmul(joined, m.head["w1"]), m.head["b1"]))
    hidden = dropout(hidden, m.config.dropout_rate, rng)
    return nc.add(nc.matmul(hidden, m.head["w2"]), m.head["b2"])


def forward_ensemble(
    m: EnsembleModel,
    p1: EncodedPair,
    p2: EncodedPair,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    def block(pair: EncodedPair) -> BatchBlock:
        return BatchBlock(
            input_ids=np.array([pair.input_ids], dtype=np.int64),
            segment_ids=np.array([pair.segment_ids], dtype=np.int64),
            attention_mask=np.array([pair.attention_mask], dtype=np.int64),
            order=pair.order,
        )

    return nc.reshape(
        forward_ensemble_batch(m, block(p1), block(p2), rng), (m.config.n_classes,)
    )


def forward_batch(
    model: Union[EnsembleModel, SingleModel],
    batch: PairBatch,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Dispatch on model kind; single models read the TextFirst block."""
    if isinstance(model, EnsembleModel):
        return forward_ensemble_batch(model, batch.first, batch.second, rng)
    return forward_single_batch(model, batch.first, rng)


def _config_header(cfg: ModelConfig) -> list[str]:
    lines = [f"{f}={getattr(cfg, f)}" for f in _CONFIG_INT_FIELDS]
    lines.append(f"dropout_rate={cfg.dropout_rate!r}")
    return lines


def save_checkpoint(model: Union[EnsembleModel, SingleModel], path: Union[str, Path]) -> None:
    """Write magic, text header, tensor manifest, then raw <f4 data."""
    params = model.parameters()
    arrays = {name: np.ascontiguousarray(t.data, dtype="<f4") for name, t in params.items()}
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        dims = ",".join(str(d) for d in arr.shape)
        manifest.append(f"{name} {dims} {offset}")
        offset += arr.nbytes
    header = [f"kind={model.kind}"]
    header.extend(_config_header(model.config))
    header.append(f"tensors={len(arrays)}")
    header.extend(manifest)
    header.append("end")
    blob = CHECKPOINT_MAGIC + "\n".join(header).encode("utf-8") + b"\n"
    blob += b"".join(arr.tobytes() for arr in arrays.values())
    Path(path).write_bytes(blob)


def load_checkpoint(path: Union[str, Path]) -> Union[EnsembleModel, SingleModel]:
    p = Path(path)
    blob = p.read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{p}: not a checkpoint (bad magic bytes)")
    pos = len(CHECKPOINT_MAGIC)
    lines: list[str] = []
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{p}: truncated checkpoint header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    data_start = pos

    fields: dict[str, str] = {}
    idx = 0
    while idx < len(lines) and "=" in lines[idx]:
        key, _, value = lines[idx].partition("=")
        fields[key] = value
        idx += 1
        if key == "tensors":
            break
    kind = fields.get("kind")
    if kind not in ("ensemble", "single"):
        raise DataError(f"{p}: unknown checkpoint kind {kind!r}")
    try:
        cfg = ModelConfig(
            **{f: int(fields[f]) for f in _CONFIG_INT_FIELDS},
            dropout_rate=float(fields["dropout_rate"]),
        )
        n_tensors = int(fields["tensors"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{p}: bad checkpoint header: {e}") from None

    manifest_lines = lines[idx:]
    if len(manifest_lines) != n_tensors:
        raise DataError(
            f"{p}: manifest lists {len(manifest_lines)} tensors, header says {n_tensors}"
        )
    model = EnsembleModel(cfg) if kind == "ensemble" else SingleModel(cfg)
    params = model.parameters()
    expected = list(params)
    data = blob[data_start:]
    seen: list[str] = []
    for line in manifest_lines:
        parts = line.split(" ")
        if len(parts) != 3:
            raise DataError(f"{p}: malformed manifest line {line!r}")
        name, dims_s, offset_s = parts
        shape = tuple(int(d) for d in dims_s.split(","))
        offset = int(offset_s)
        if name not in params:
            raise DataError(f"{p}: checkpoint tensor {name!r} not in a {kind} model")
        target = params[name]
        if shape != target.data.shape:
            raise DataError(
                f"{p}: tensor {name} has shape {shape}, model expects {target.data.shape}"
            )
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(data):
            raise DataError(f"{p}: tensor {name} overruns the data section")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f4").reshape(shape)
        target.data = arr.astype(nc.default_dtype())
        seen.append(name)
    if seen != expected:
        raise DataError(
            f"{p}: checkpoint parameters do not match the model "
            f"(got {len(seen)} tensors, expected {len(expected)})"
        )
    return model
