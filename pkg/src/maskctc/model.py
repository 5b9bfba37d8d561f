"""Encoder-decoder network with CTC, masked-token and mask-length heads.

Everything works on padded batches ``(B, T, ...)``; the single-utterance
entry points (:meth:`MaskCTCModel.encode`, :meth:`MaskCTCModel.decode_mlm`,
...) add and strip the batch axis.
"""
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .numerics import DTYPE, NEG_INF, Rng

MAX_LENGTH_CLASS = 50


class InputTooShortError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Regular tokens take ids ``0..n-1``; blank, mask and pad follow.

    With this layout the CTC head's columns are ``tokens + [blank]`` and the
    masked-token head's columns are exactly the regular token ids.
    """

    tokens: List[str]
    blank_id: int = -1
    mask_id: int = -1
    pad_id: int = -1

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise ValueError("vocabulary needs at least one token")
        if len(set(self.tokens)) != n:
            raise ValueError("duplicate token strings")
        if self.blank_id < 0:
            self.blank_id, self.mask_id, self.pad_id = n, n + 1, n + 2
        specials = (self.blank_id, self.mask_id, self.pad_id)
        if sorted(specials) != [n, n + 1, n + 2]:
            raise ValueError("blank, mask and pad ids must be distinct and follow the regular tokens")
        if self.blank_id != n:
            raise ValueError("blank must directly follow the regular tokens")

    @classmethod
    def of_size(cls, n):
        return cls([f"t{i}" for i in range(n)])

    @property
    def n_tokens(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens) + 3

    def symbol(self, i):
        if i == self.blank_id:
            return "<blank>"
        if i == self.mask_id:
            return "<MASK>"
        if i == self.pad_id:
            return "<pad>"
        return self.tokens[i]

    def index(self, s):
        return self.tokens.index(s)

    def is_regular(self, i):
        return 0 <= i < len(self.tokens)


@dataclass
class EncoderConfig:
    architecture: str = "conformer"
    num_layers: int = 2
    attn_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    conv_kernel: int = 7
    downsample_factor: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.architecture not in ("transformer", "conformer"):
            raise ValueError(f"unknown encoder architecture {self.architecture!r}")
        if self.attn_dim % self.num_heads:
            raise ValueError("attn_dim must be divisible by num_heads")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")


@dataclass
class DecoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1


@dataclass
class ModelConfig:
    input_dim: int
    vocab: Vocabulary
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_dim=int(d["input_dim"]),
            vocab=Vocabulary(**d["vocab"]),
            encoder=EncoderConfig(**d["encoder"]),
            decoder=DecoderConfig(**d["decoder"]),
        )


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.as_tensor(rng.uniform(-bound, bound, size=shape), dtype=DTYPE))


class Linear(nn.Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.weight = _uniform(rng, (d_out, d_in), d_in)
        self.bias = _uniform(rng, (d_out,), d_in) if bias else None

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        return nx.layer_norm(x, self.weight, self.bias)


class _Dropout(nn.Module):
    """Dropout drawing masks from a generator the trainer installs on the root model."""

    def __init__(self, p):
        super().__init__()
        self.p = p
        self.generator = None

    def forward(self, x):
        return nx.dropout(x, self.p, self.training, self.generator)


class MultiHeadAttention(nn.Module):
    def __init__(self, d, heads, dropout, rng):
        super().__init__()
        self.h = heads
        self.dk = d // heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.drop = _Dropout(dropout)

    def forward(self, x, mem, key_pad=None):
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        q = self.q(x).view(B, Tq, self.h, self.dk).transpose(1, 2)
        k = self.k(mem).view(B, Tk, self.h, self.dk).transpose(1, 2)
        v = self.v(mem).view(B, Tk, self.h, self.dk).transpose(1, 2)
        scores = nx.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.dk)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], NEG_INF)
        attn = torch.exp(nx.log_softmax(scores, dim=-1))
        ctx = nx.matmul(self.drop(attn), v).transpose(1, 2).reshape(B, Tq, d)
        return self.o(ctx)


class FeedForward(nn.Module):
    def __init__(self, d, d_ff, dropout, rng, activation="swish"):
        super().__init__()
        self.w1 = Linear(d, d_ff, rng)
        self.w2 = Linear(d_ff, d, rng)
        self.act = nx.swish if activation == "swish" else torch.relu
        self.drop = _Dropout(dropout)

    def forward(self, x):
        return self.w2(self.drop(self.act(self.w1(x))))


class ConvModule(nn.Module):
    """Pointwise -> GLU -> depthwise conv -> norm -> swish -> pointwise."""

    def __init__(self, d, kernel, dropout, rng):
        super().__init__()
        self.pw1 = Linear(d, 2 * d, rng)
        self.dw_weight = _uniform(rng, (d, kernel), kernel)
        self.dw_bias = _uniform(rng, (d,), kernel)
        self.norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)
        self.drop = _Dropout(dropout)

    def forward(self, x, pad=None):
        x = nx.glu(self.pw1(x))
        if pad is not None:
            x = x.masked_fill(pad.unsqueeze(-1), 0.0)
        x = nx.depthwise_conv1d(x, self.dw_weight, self.dw_bias)
        x = nx.swish(self.norm(x))
        return self.drop(self.pw2(x))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng):
        super().__init__()
        d = cfg.attn_dim
        self.ff1_norm, self.ff1 = LayerNorm(d), FeedForward(d, cfg.ffn_dim, cfg.dropout, rng)
        self.attn_norm, self.attn = LayerNorm(d), MultiHeadAttention(d, cfg.num_heads, cfg.dropout, rng)
        self.conv_norm, self.conv = LayerNorm(d), ConvModule(d, cfg.conv_kernel, cfg.dropout, rng)
        self.ff2_norm, self.ff2 = LayerNorm(d), FeedForward(d, cfg.ffn_dim, cfg.dropout, rng)
        self.out_norm = LayerNorm(d)
        self.drop = _Dropout(cfg.dropout)

    def forward(self, x, pad):
        x = x + 0.5 * self.drop(self.ff1(self.ff1_norm(x)))
        h = self.attn_norm(x)
        x = x + self.drop(self.attn(h, h, pad))
        x = x + self.conv(self.conv_norm(x), pad)
        x = x + 0.5 * self.drop(self.ff2(self.ff2_norm(x)))
        return self.out_norm(x)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng):
        super().__init__()
        d = cfg.attn_dim
        self.attn_norm, self.attn = LayerNorm(d), MultiHeadAttention(d, cfg.num_heads, cfg.dropout, rng)
        self.ff_norm, self.ff = LayerNorm(d), FeedForward(d, cfg.ffn_dim, cfg.dropout, rng, "relu")
        self.drop = _Dropout(cfg.dropout)

    def forward(self, x, pad):
        h = self.attn_norm(x)
        x = x + self.drop(self.attn(h, h, pad))
        return x + self.drop(self.ff(self.ff_norm(x)))


class DecoderLayer(nn.Module):
    """Unmasked self-attention over the token sequence, then cross-attention to the encoder."""

    def __init__(self, d, cfg: DecoderConfig, rng):
        super().__init__()
        self.self_norm, self.self_attn = LayerNorm(d), MultiHeadAttention(d, cfg.num_heads, cfg.dropout, rng)
        self.src_norm, self.src_attn = LayerNorm(d), MultiHeadAttention(d, cfg.num_heads, cfg.dropout, rng)
        self.ff_norm, self.ff = LayerNorm(d), FeedForward(d, cfg.ffn_dim, cfg.dropout, rng, "relu")
        self.drop = _Dropout(cfg.dropout)

    def forward(self, y, y_pad, mem, mem_pad):
        h = self.self_norm(y)
        y = y + self.drop(self.self_attn(h, h, y_pad))
        y = y + self.drop(self.src_attn(self.src_norm(y), mem, mem_pad))
        return y + self.drop(self.ff(self.ff_norm(y)))


def _pad_mask(lengths, T):
    lengths = torch.as_tensor(list(lengths), dtype=torch.long)
    return torch.arange(T)[None, :] >= lengths[:, None]


class MaskCTCModel(nn.Module):
    def __init__(self, config: ModelConfig, seed=0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        rng = Rng(seed)
        enc, dec, vocab = config.encoder, config.decoder, config.vocab
        d = enc.attn_dim
        self.d = d
        self.subsample = Linear(config.input_dim * enc.downsample_factor, d, rng)
        block = ConformerBlock if enc.architecture == "conformer" else TransformerBlock
        self.encoder_blocks = nn.ModuleList([block(enc, rng) for _ in range(enc.num_layers)])
        self.encoder_norm = LayerNorm(d) if enc.architecture == "transformer" else None
        self.enc_drop = _Dropout(enc.dropout)

        self.embed = nn.Parameter(torch.as_tensor(rng.normal(size=(vocab.size, d)) * 0.02, dtype=DTYPE))
        self.decoder_layers = nn.ModuleList([DecoderLayer(d, dec, rng) for _ in range(dec.num_layers)])
        self.decoder_norm = LayerNorm(d)
        self.dec_drop = _Dropout(dec.dropout)

        self.ctc_proj = Linear(d, vocab.n_tokens + 1, rng)
        self.mlm_proj = Linear(d, vocab.n_tokens, rng)
        self.length_proj = Linear(d, MAX_LENGTH_CLASS + 1, rng)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    def set_dropout_generator(self, generator):
        for m in self.modules():
            if isinstance(m, _Dropout):
                m.generator = generator

    # -- batched ------------------------------------------------------------

    def encoded_lengths(self, lengths):
        f = self.config.encoder.downsample_factor
        return [-(-int(n) // f) for n in lengths]

    def encode_batch(self, feats, lengths):
        """feats: (B, T, D) zero-padded. Returns ((B, T', d), output lengths)."""
        f = self.config.encoder.downsample_factor
        for n in lengths:
            if int(n) < f:
                raise InputTooShortError(f"need at least {f} frames, got {int(n)}")
        B, T, D = feats.shape
        Tp = -(-T // f)
        if Tp * f != T:
            feats = torch.cat([feats, feats.new_zeros(B, Tp * f - T, D)], dim=1)
        out_lengths = self.encoded_lengths(lengths)
        pad = _pad_mask(out_lengths, Tp)
        x = self.subsample(feats.reshape(B, Tp, f * D))
        x = self.enc_drop(x + nx.sinusoidal_positions(Tp, self.d))
        for blk in self.encoder_blocks:
            x = blk(x, pad)
        if self.encoder_norm is not None:
            x = self.encoder_norm(x)
        return x, out_lengths

    def decoder_states_batch(self, enc, enc_lengths, tokens):
        """tokens: (B, L) padded with pad_id. Returns (B, L, d)."""
        B, L = tokens.shape
        y_pad = tokens == self.vocab.pad_id
        mem_pad = _pad_mask(enc_lengths, enc.shape[1])
        y = nx.embedding(tokens, self.embed) * math.sqrt(self.d)
        y = self.dec_drop(y + nx.sinusoidal_positions(L, self.d))
        for layer in self.decoder_layers:
            y = layer(y, y_pad, enc, mem_pad)
        return self.decoder_norm(y)

    # -- heads --------------------------------------------------------------

    def ctc_head(self, enc):
        """Per-frame log-probabilities over tokens plus blank (last column)."""
        return nx.log_softmax(self.ctc_proj(enc), dim=-1)

    def mlm_head(self, states):
        return nx.log_softmax(self.mlm_proj(states), dim=-1)

    def length_head(self, states):
        """Per-position log-distribution over mask lengths 0..50."""
        return nx.log_softmax(self.length_proj(states), dim=-1)

    # -- single utterance ---------------------------------------------------

    def encode(self, features):
        x = torch.as_tensor(np.asarray(features, dtype=np.float64)) if not isinstance(features, torch.Tensor) else features
        if x.dim() != 2:
            raise ValueError("features must be a (T, D) matrix")
        enc, _ = self.encode_batch(x.unsqueeze(0), [x.shape[0]])
        return enc[0]

    def decoder_states(self, enc, tokens):
        if len(tokens) == 0:
            raise ValueError("decoder input must hold at least one position")
        y = torch.as_tensor(list(tokens), dtype=torch.long).unsqueeze(0)
        return self.decoder_states_batch(enc.unsqueeze(0), [enc.shape[0]], y)[0]

    def decode_mlm(self, enc, tokens):
        """(L, |V|) log-probabilities for every position of a (possibly masked) sequence."""
        return self.mlm_head(self.decoder_states(enc, tokens))


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"MCTCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: dict
    seed: int
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def build(self) -> MaskCTCModel:
        model = MaskCTCModel(self.config, self.seed)
        load_parameters(model, self.parameters)
        return model


def model_parameters(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def load_parameters(model, params):
    state = {k: torch.as_tensor(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    model.load_state_dict(state, strict=True)


def checkpoint_from_model(model, meta=None, extra=None):
    return ModelCheckpoint(
        config=model.config,
        parameters={k: v.numpy().copy() for k, v in model_parameters(model).items()},
        seed=model.seed,
        meta=dict(meta or {}),
        extra=dict(extra or {}),
    )


def save_checkpoint(path, ckpt: ModelCheckpoint):
    """Write ``ckpt``: magic, version, JSON header, then little-endian float64 blobs.

    ``extra`` holds auxiliary named arrays (optimizer moments) stored after
    the model parameters.
    """
    blobs, entries, offset = [], [], 0
    for group, arrays in (("param", ckpt.parameters), ("extra", ckpt.extra)):
        for name, value in arrays.items():
            a = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
            raw = a.tobytes()
            entries.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "config": ckpt.config.to_dict(),
        "seed": ckpt.seed,
        "meta": ckpt.meta,
        "tensors": entries,
        "crc32": zlib.crc32(payload),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(payload)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", data, pos)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    payload = data[pos + hlen :]
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    params, extra = {}, {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        a = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        (params if e["group"] == "param" else extra)[e["name"]] = a
    return ModelCheckpoint(
        config=ModelConfig.from_dict(header["config"]),
        parameters=params,
        seed=int(header["seed"]),
        format_version=version,
        meta=header.get("meta", {}),
        extra=extra,
    )


def average_checkpoints(ckpts) -> ModelCheckpoint:
    """Elementwise mean of model parameters (running form, so identical inputs are returned exactly)."""
    ckpts = list(ckpts)
    if not ckpts:
        raise ValueError("nothing to average")
    first = ckpts[0]
    names = set(first.parameters)
    mean = {k: np.array(v, dtype=np.float64, copy=True) for k, v in first.parameters.items()}
    for i, c in enumerate(ckpts[1:], start=2):
        if set(c.parameters) != names or c.config.to_dict() != first.config.to_dict():
            raise CheckpointError("checkpoints disagree on architecture")
        for k in names:
            mean[k] += (c.parameters[k] - mean[k]) / i
    return ModelCheckpoint(
        config=first.config,
        parameters=mean,
        seed=first.seed,
        meta={"averaged_from": len(ckpts), **{k: ckpts[-1].meta[k] for k in ("epoch", "train_config") if k in ckpts[-1].meta}},
    )
