"""Bidirectional pre-norm transformer stack over a token canvas.

The same stack is instantiated twice with independent parameters: once for
the insertion model and once for the deletion model. There is no causal
mask; every position attends to every non-pad position.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 30
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 512
    max_positions: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_heads", "d_ffn", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("model.n_layers must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("model.dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class DecoderParams:
    """Named parameter tensors of one decoder stack plus its output head."""

    def __init__(self, tensors: dict[str, Tensor], out_dim: int):
        self.tensors = tensors
        self.out_dim = out_dim

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def named(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))


def parameter_shapes(config: ModelConfig, out_dim: int) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ffn
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
        "seg_emb": (2, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, out_dim), "head.b": (out_dim,)})
    return shapes


def init_decoder_params(config: ModelConfig, out_dim: int, rng: np.random.Generator) -> DecoderParams:
    tensors = {}
    for name, shape in parameter_shapes(config, out_dim).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return DecoderParams(tensors, out_dim)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def embed_canvas(tokens, segments, params: DecoderParams) -> Tensor:
    """Token + position + segment embeddings; ``tokens`` is (t,) or (batch, t)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    if tokens.shape != segments.shape:
        raise ContractViolation(f"tokens {tokens.shape} and segments {segments.shape} differ")
    t = tokens.shape[-1]
    max_pos = params["pos_emb"].shape[0]
    if t > max_pos:
        raise ValueError(f"canvas length {t} exceeds max_positions {max_pos}")
    if segments.size and not np.isin(segments, (0, 1)).all():
        raise ContractViolation("segment ids must be 0 or 1")
    x = ad.embedding(params["tok_emb"], tokens)
    x = ad.add(x, ad.embedding(params["pos_emb"], np.arange(t)))
    return ad.add(x, ad.embedding(params["seg_emb"], segments))


def multi_head_attention(x: Tensor, pad_mask, params: DecoderParams, n_heads: int, prefix: str = "layer0.") -> Tensor:
    """Full (non-causal) scaled dot-product self-attention.

    ``x`` is (batch, t, d) or (t, d); ``pad_mask`` is True where a key is excluded.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    dh = d // n_heads
    mask = np.zeros((b, t), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool).reshape(b, t)

    def heads(name):
        y = _linear(x, params[prefix + "w" + name], params[prefix + "b" + name])
        return ad.transpose(ad.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = ad.mul(heads("q"), 1.0 / np.sqrt(dh))
    k, v = heads("k"), heads("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    attn = ad.softmax_rows(scores, mask=mask[:, None, None, :])
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = _linear(out, params[prefix + "wo"], params[prefix + "bo"])
    return ad.reshape(out, (t, d)) if squeeze else out


def decoder_forward(tokens, segments, pad_mask, params: DecoderParams, config: ModelConfig,
                    train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states of shape (t, d_model), or (batch, t, d_model) for batched input."""
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
        segments = np.asarray(segments)[None]
        pad_mask = None if pad_mask is None else np.asarray(pad_mask)[None]
    if pad_mask is None:
        pad_mask = np.zeros(tokens.shape, dtype=bool)
    rate = config.dropout_rate if train_mode else 0.0
    if rate > 0 and rng is None:
        raise ContractViolation("train_mode with dropout needs an rng")

    x = ad.dropout(embed_canvas(tokens, segments, params), rate, rng)
    for i in range(config.n_layers):
        p = f"layer{i}."
        h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = ad.add(x, ad.dropout(multi_head_attention(h, pad_mask, params, config.n_heads, p), rate, rng))
        h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = _linear(ad.relu(_linear(h, params[p + "w1"], params[p + "b1"])), params[p + "w2"], params[p + "b2"])
        x = ad.add(x, ad.dropout(h, rate, rng))
    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


def project_head(hidden: Tensor, params: DecoderParams) -> Tensor:
    return _linear(hidden, params["head.w"], params["head.b"])
