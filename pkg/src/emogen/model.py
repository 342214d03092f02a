"""Decoder-only transformer with relative position attention.

One class covers the unconditional model and the three ways of feeding a
(valence, arousal) pair:

``vanilla``
    plain language model over the base vocabulary.
``discrete-token``
    binned condition tokens are ordinary vocabulary items in the sequence.
``continuous-token``
    each condition value goes through its own linear map to a model-width
    vector; the two vectors are prepended along the sequence axis and their
    output positions are dropped.
``continuous-concatenated``
    both values go through one linear map to a ``d_cond`` vector that is
    concatenated to every (narrower) token embedding.

Residual blocks are pre-norm. A single relative-position table, indexed by
query-key distance and split per head, is shared by all layers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import BASE_VOCAB_SIZE, COND_VOCAB_SIZE

VARIANTS = ("vanilla", "discrete-token", "continuous-token", "continuous-concatenated")
CONDITIONAL_VARIANTS = VARIANTS[1:]
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class TransferError(ValueError):
    pass


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 1216
    vocab_size: int = BASE_VOCAB_SIZE
    variant: str = "vanilla"
    d_cond: int = 0
    dropout: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.variant == "continuous-concatenated":
            if not 0 < self.d_cond < self.d_model:
                raise ConfigError("continuous-concatenated needs 0 < d_cond < d_model")
        elif self.d_cond:
            raise ConfigError("d_cond is only used by continuous-concatenated")
        if self.variant == "discrete-token" and self.vocab_size < COND_VOCAB_SIZE:
            raise ConfigError(f"discrete-token needs vocab_size >= {COND_VOCAB_SIZE}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_token(self) -> int:
        return self.d_model - self.d_cond

    @property
    def conditional(self) -> bool:
        return self.variant != "vanilla"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def full_scale(cls, variant: str = "vanilla") -> "ModelConfig":
        """20 layers, width 768, 16 heads, feed-forward 3072, input length 1216."""
        vocab = COND_VOCAB_SIZE if variant == "discrete-token" else BASE_VOCAB_SIZE
        d_cond = 192 if variant == "continuous-concatenated" else 0
        return cls(20, 768, 16, 3072, 1216, vocab, variant, d_cond, 0.1)

    def for_variant(self, variant: str, d_cond: int | None = None) -> "ModelConfig":
        """Same trunk, different conditioning variant."""
        vocab = COND_VOCAB_SIZE if variant == "discrete-token" else BASE_VOCAB_SIZE
        if variant == "continuous-concatenated":
            d_cond = d_cond or self.d_model // 4
        else:
            d_cond = 0
        return replace(self, variant=variant, vocab_size=vocab, d_cond=d_cond)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes = {
        "tok_emb": (V, cfg.d_token),
        "rel_emb": (cfg.n_heads, cfg.max_len, cfg.d_head),
    }
    if cfg.variant == "continuous-token":
        shapes.update({"cond_v.w": (1, d), "cond_v.b": (d,), "cond_a.w": (1, d), "cond_a.b": (d,)})
    elif cfg.variant == "continuous-concatenated":
        shapes.update({"cond.w": (2, cfg.d_cond), "cond.b": (cfg.d_cond,)})
    shapes.update(trunk_shapes(cfg.n_layers, d, cfg.d_ff))
    shapes.update({"head.w": (d, V), "head.b": (V,)})
    return shapes


def trunk_shapes(n_layers: int, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff.w1": (d, d_ff), p + "ff.b1": (d_ff,),
            p + "ff.w2": (d_ff, d), p + "ff.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,)})
    return shapes


def parameter_count_formula(cfg: ModelConfig) -> int:
    """Closed-form parameter count (independent of ``parameter_shapes``)."""
    d, f, V, H = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads
    per_layer = 4 * d * d + 2 * d * f + 9 * d + f
    cond = {"continuous-token": 4 * d, "continuous-concatenated": 3 * cfg.d_cond}.get(cfg.variant, 0)
    return (cfg.n_layers * per_layer + V * cfg.d_token + cfg.max_len * H * cfg.d_head
            + 2 * d + d * V + V + cond)


def init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    """Norm gains 1, biases 0, everything else N(0, 0.02)."""
    dt = T.default_dtype()
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape, dtype=dt)
    if leaf.startswith("b"):
        return np.zeros(shape, dtype=dt)
    return (rng.standard_normal(shape) * INIT_STD).astype(dt)


def relative_indices(length: int, max_len: int) -> np.ndarray:
    """Table rows for reversed distances ``length-1 .. 0``, clipped at ``max_len - 1``."""
    return np.minimum(np.arange(length - 1, -1, -1), max_len - 1)


def relative_attention(q, k, v, rel_table, dropout_p=0.0, rng=None, training=False):
    """Causal multi-head attention with relative position logits.

    ``q, k, v`` are (B, H, L, dh); ``rel_table`` is (H, R, dh) indexed by
    query-key distance. Logits are ``(q k^T + S_rel) / sqrt(dh)`` with
    ``S_rel[i, j] = q_i . rel_table[i - j]``, obtained from ``q E^T`` by the
    skew trick instead of gathering an (L, L, dh) tensor. Skew, masking,
    softmax and dropout run as one fused op.
    """
    L, dh = q.shape[-2], q.shape[-1]
    R = rel_table.shape[1]
    er = T.take(rel_table, relative_indices(L, R), axis=1)  # (H, L, dh)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    rel = T.matmul(q, T.transpose(er, (0, 2, 1)))  # column m: distance L-1-m
    probs = T.relative_causal_softmax(scores, rel, 1.0 / math.sqrt(dh), dropout_p, rng, training)
    return T.matmul(probs, v)


class Transformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        self.training = False
        self.rng = np.random.default_rng(seed)
        shapes = parameter_shapes(cfg)
        if params is None:
            init_rng = np.random.default_rng(seed)
            params = {k: init_param(k, s, init_rng) for k, s in shapes.items()}
        missing = sorted(set(shapes) - set(params))
        if missing:
            raise ConfigError(f"missing parameters: {', '.join(missing)}")
        self.params = {}
        for k, s in shapes.items():
            arr = np.asarray(params[k], dtype=T.default_dtype())
            if arr.shape != s:
                raise ConfigError(f"parameter {k} has shape {arr.shape}, expected {s}")
            self.params[k] = Tensor(arr.copy(), requires_grad=True)

    # ------------------------------------------------------------ helpers

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def save(self, path, extra=None):
        from . import checkpoint

        checkpoint.save(path, self.state_dict(), self.cfg.variant, self.cfg.to_dict(), extra)

    @classmethod
    def load(cls, path, seed: int = 0) -> "Transformer":
        from . import checkpoint

        tensors, header = checkpoint.load(path)
        cfg = ModelConfig.from_dict(header["config"])
        if cfg.variant != header["variant"]:
            raise ConfigError("checkpoint variant tag disagrees with its config")
        return cls(cfg, seed=seed, params=tensors)

    @property
    def max_positions(self) -> int:
        return self.cfg.max_len + (2 if self.cfg.variant == "continuous-token" else 0)

    # ------------------------------------------------------------ forward

    def _drop(self, x):
        return T.dropout(x, self.cfg.dropout, self.rng, self.training)

    def _block(self, x: Tensor, i: int) -> Tensor:
        P = self.params
        p = f"layers.{i}."
        B, L, D = x.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = T.linear(h, P[p + "attn.w_qkv"], P[p + "attn.b_qkv"])
        q, k, v = (T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3)) for t in T.split(qkv, [D, D, D]))
        a = relative_attention(q, k, v, P["rel_emb"], self.cfg.dropout, self.rng, self.training)
        a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (B, L, D))
        x = T.add(x, T.linear(a, P[p + "attn.w_o"], P[p + "attn.b_o"]))
        h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = T.linear(T.relu(T.linear(h, P[p + "ff.w1"], P[p + "ff.b1"])), P[p + "ff.w2"], P[p + "ff.b2"])
        return T.add(x, self._drop(h))

    def trunk(self, x: Tensor) -> Tensor:
        """Blocks plus final norm over model-width inputs (B, L, d_model)."""
        if x.shape[1] > self.max_positions:
            raise ValueError(f"sequence length {x.shape[1]} exceeds {self.max_positions}")
        x = self._drop(x)
        for i in range(self.cfg.n_layers):
            x = self._block(x, i)
        return T.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])

    def embed(self, tokens, condition=None) -> Tensor:
        """Model-width inputs for a (B, L) token batch and optional (B, 2) conditions."""
        cfg, P = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError("token id outside vocabulary")
        needs = cfg.variant in ("continuous-token", "continuous-concatenated")
        if condition is not None and not cfg.conditional:
            raise ConditionError("vanilla model takes no condition")
        if needs and condition is None:
            raise ConditionError(f"{cfg.variant} model requires a condition")
        B, L = tokens.shape
        x = T.embedding(P["tok_emb"], tokens)
        if not needs:
            return x
        c = np.asarray(condition, dtype=T.default_dtype()).reshape(-1, 2)
        if c.shape[0] == 1 and B > 1:
            c = np.repeat(c, B, axis=0)
        if c.shape[0] != B:
            raise ConditionError(f"{c.shape[0]} conditions for a batch of {B}")
        if cfg.variant == "continuous-token":
            cv = T.linear(Tensor(c[:, None, 0:1]), P["cond_v.w"], P["cond_v.b"])
            ca = T.linear(Tensor(c[:, None, 1:2]), P["cond_a.w"], P["cond_a.b"])
            return T.concat([cv, ca, x], axis=1)
        cvec = T.linear(Tensor(c[:, None, :]), P["cond.w"], P["cond.b"])
        return T.concat([x, T.broadcast_to(cvec, (B, L, cfg.d_cond))], axis=-1)

    def forward(self, tokens, condition=None, last_only: bool = False, keep_prefix: bool = False) -> Tensor:
        """Next-token logits, (B, L, vocab).

        For continuous-token the two condition positions are dropped unless
        ``keep_prefix``; ``last_only`` computes the head for the final position only.
        """
        h = self.trunk(self.embed(tokens, condition))
        if self.cfg.variant == "continuous-token" and not keep_prefix:
            h = T.split(h, [2, h.shape[1] - 2], axis=1)[1]
        if last_only:
            h = T.split(h, [h.shape[1] - 1, 1], axis=1)[1]
        return T.linear(h, self.params["head.w"], self.params["head.b"])

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0) -> Transformer:
    return Transformer(cfg, seed=seed)


# ------------------------------------------------------------ weight transfer


def transfer_weights(vanilla: Transformer | dict, target_variant: str, seed: int = 0,
                     embedding_init: str = "truncate", d_cond: int | None = None,
                     vanilla_cfg: ModelConfig | None = None) -> Transformer:
    """Initialize a conditional model from a pretrained vanilla one.

    The trunk is copied verbatim. discrete-token grows the embedding and output
    layers by the ten condition rows; continuous-concatenated rebuilds the
    token embedding at the narrower width, either by keeping the first
    ``d_token`` columns (``truncate``) or from scratch (``fresh``). Condition
    maps and new rows start from N(0, 0.02).
    """
    if isinstance(vanilla, Transformer):
        src, src_cfg = vanilla.state_dict(), vanilla.cfg
    else:
        src, src_cfg = vanilla, vanilla_cfg
        if src_cfg is None:
            raise TransferError("vanilla_cfg required when transferring from a state dict")
    if src_cfg.variant != "vanilla":
        raise TransferError(f"source model is {src_cfg.variant}, expected vanilla")
    if target_variant not in CONDITIONAL_VARIANTS:
        raise TransferError(f"cannot transfer into {target_variant!r}")
    if embedding_init not in ("truncate", "fresh"):
        raise ValueError("embedding_init must be 'truncate' or 'fresh'")

    cfg = src_cfg.for_variant(target_variant, d_cond)
    shapes = parameter_shapes(cfg)
    expected = parameter_shapes(src_cfg)
    bad = [k for k, s in expected.items() if k not in src or tuple(np.shape(src[k])) != s]
    if bad:
        raise TransferError("checkpoint does not match the vanilla trunk: " + ", ".join(sorted(bad)))

    rng = np.random.default_rng(seed)
    dt = T.default_dtype()
    params = {}
    for k, s in shapes.items():
        if k in src and tuple(np.shape(src[k])) == s:
            params[k] = np.array(src[k], dtype=dt)
        else:
            params[k] = init_param(k, s, rng)

    V0 = src_cfg.vocab_size
    if target_variant == "discrete-token":
        params["tok_emb"][:V0] = src["tok_emb"]
        params["head.w"][:, :V0] = src["head.w"]
        params["head.b"][:V0] = src["head.b"]
    elif target_variant == "continuous-concatenated" and embedding_init == "truncate":
        params["tok_emb"] = np.array(src["tok_emb"][:, :cfg.d_token], dtype=dt)
    return Transformer(cfg, seed=seed, params=params)


# ------------------------------------------------------------ regression model


@dataclass(frozen=True)
class RegressorConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 1216
    vocab_size: int = BASE_VOCAB_SIZE
    dropout: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


class EmotionRegressor:
    """Relative-attention transformer whose mean-pooled states map to (valence, arousal).

    Attention is causal, as in the generator trunk; pads only ever trail the
    music tokens and are excluded from pooling.
    """

    variant = "regressor"

    def __init__(self, cfg: RegressorConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        mcfg = ModelConfig(cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.max_len,
                           cfg.vocab_size, "vanilla", 0, cfg.dropout)
        shapes = {k: s for k, s in parameter_shapes(mcfg).items() if not k.startswith("head.")}
        shapes.update({"out.w": (cfg.d_model, 2), "out.b": (2,)})
        init_rng = np.random.default_rng(seed)
        if params is None:
            params = {k: init_param(k, s, init_rng) for k, s in shapes.items()}
        self._net = Transformer.__new__(Transformer)
        self._net.cfg = mcfg
        self._net.training = False
        self._net.rng = np.random.default_rng(seed)
        self._net.params = {k: Tensor(np.array(params[k], dtype=T.default_dtype()), requires_grad=True)
                            for k in shapes}
        self.params = self._net.params

    @property
    def rng(self):
        return self._net.rng

    @property
    def training(self):
        return self._net.training

    def train(self, mode=True):
        self._net.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, tokens, pad_id: int | None = None) -> Tensor:
        from .tokenizer import PAD

        pad_id = PAD if pad_id is None else pad_id
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        h = self._net.trunk(self._net.embed(tokens))
        pooled = T.masked_mean(h, tokens != pad_id)
        return T.linear(pooled, self.params["out.w"], self.params["out.b"])

    __call__ = forward

    def save(self, path, extra=None):
        from . import checkpoint

        checkpoint.save(path, self.state_dict(), self.variant, self.cfg.to_dict(), extra)

    @classmethod
    def load(cls, path, seed: int = 0) -> "EmotionRegressor":
        from . import checkpoint

        tensors, header = checkpoint.load(path)
        if header["variant"] != cls.variant:
            raise ConfigError(f"checkpoint holds a {header['variant']} model, not a regressor")
        cfg = RegressorConfig(**header["config"])
        return cls(cfg, seed=seed, params=tensors)
