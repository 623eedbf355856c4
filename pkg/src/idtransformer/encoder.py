"""Single-layer Transformer encoder classifier with Con and Add head combination.

Con concatenates the ``d_v = d_e / h`` sized head values and applies one
``d_e x d_e`` map.  Add keeps ``d_v = d_e``, sums the head values and applies
the same kind of map.  Every head can be captured as a :class:`HeadCapture`
holding the matrices the identifiability analysis works on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import netcore as nc
from .netcore import Parameter, Tensor

PAD_INDEX = 0
UNK_INDEX = 1


class Variant(str, enum.Enum):
    CON = "con"
    ADD = "add"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    d_e: int = 128
    d_k: int | None = None
    d_v: int | None = None
    h: int = 8
    d_s_max: int = 128
    variant: Variant = Variant.CON
    ffn_hidden: int = 512
    n_classes: int = 2
    vocab_size: int = 1000

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.d_k is None:
            self.d_k = self.d_e // self.h
        if self.d_v is None:
            self.d_v = self.d_e // self.h if self.variant is Variant.CON else self.d_e
        self.validate()

    def validate(self) -> None:
        for name in ("d_e", "d_k", "d_v", "h", "d_s_max", "ffn_hidden", "n_classes", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover the PAD and UNK indices")
        if self.variant is Variant.CON:
            if self.d_e % self.h:
                raise ConfigError(f"Con needs h | d_e (d_e={self.d_e}, h={self.h})")
            if self.d_v != self.d_e // self.h:
                raise ConfigError(f"Con needs d_v = d_e / h = {self.d_e // self.h}, got {self.d_v}")
        else:
            if self.d_v != self.d_e:
                raise ConfigError(f"Add needs d_v = d_e = {self.d_e}, got {self.d_v}")
            if self.d_s_max > self.d_e:
                raise ConfigError(f"Add needs d_s_max <= d_e, got {self.d_s_max} > {self.d_e}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HeadCapture:
    """Matrices produced by one head.

    Shapes are ``(..., d_s, x)``; a batched capture carries a leading batch
    axis and :meth:`sample` extracts one sequence.
    """

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    A_logits: np.ndarray
    A: np.ndarray
    T: np.ndarray
    H: np.ndarray

    def sample(self, i: int) -> "HeadCapture":
        return HeadCapture(*(getattr(self, f.name)[i] for f in fields(self)))

    def items(self):
        names = {"A_logits": "Alogits"}
        for f in fields(self):
            yield names.get(f.name, f.name), getattr(self, f.name)


@dataclass
class HeadParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    out: np.ndarray  # the head's slice of the output map, d_v x d_e


def attention_weights(Q, K, d_q: int | None = None):
    """Scaled dot-product logits ``Q K^T / sqrt(d_q)`` and their row softmax."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.shape[-1] != K.shape[-1] or Q.shape[-2] != K.shape[-2]:
        raise ValueError(f"Q {Q.shape} and K {K.shape} are not shape compatible")
    d_q = Q.shape[-1] if d_q is None else d_q
    if d_q != Q.shape[-1]:
        raise ValueError(f"d_q={d_q} but Q has {Q.shape[-1]} columns")
    logits = Q @ np.swapaxes(K, -1, -2) / math.sqrt(d_q)
    return logits, nc.softmax_rows(logits)


def head_forward(tokens, params: HeadParams, d_s_max: int | None = None) -> HeadCapture:
    """Run one head on a ``d_s x d_e`` token matrix (or a batch of them)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if d_s_max is not None and tokens.shape[-2] > d_s_max:
        raise ValueError(f"sequence length {tokens.shape[-2]} exceeds d_s_max={d_s_max}")
    Q = tokens @ params.wq + params.bq
    K = tokens @ params.wk + params.bk
    V = tokens @ params.wv + params.bv
    logits, A = attention_weights(Q, K)
    T = V @ params.out
    return HeadCapture(Q=Q, K=K, V=V, A_logits=logits, A=A, T=T, H=A @ T)


def combine_heads(captures: Sequence[HeadCapture], variant, weight, bias) -> np.ndarray:
    """Merge per-head ``A V`` into the ``d_s x d_e`` multi-head output.

    Con concatenates and Add sums before the shared ``d_e x d_e`` map.
    """
    variant = Variant.parse(variant)
    weight = np.asarray(weight, dtype=np.float64)
    d_e = weight.shape[1]
    values = [c.A @ c.V for c in captures]
    if variant is Variant.CON:
        width = sum(v.shape[-1] for v in values)
        if width != weight.shape[0]:
            raise ValueError(f"concatenated width {width} does not match map input {weight.shape[0]}")
        merged = np.concatenate(values, axis=-1)
    else:
        if any(v.shape[-1] != d_e for v in values):
            raise ValueError("Add needs every head value to be d_e wide")
        merged = np.sum(values, axis=0)
    return merged @ weight + np.asarray(bias).reshape(-1)


def combine_heads_per_head(captures: Sequence[HeadCapture], weight, bias) -> np.ndarray:
    """Con output written as a sum of per-head linear maps on ``A V``."""
    weight = np.asarray(weight, dtype=np.float64)
    out = np.asarray(bias, dtype=np.float64).reshape(-1)
    start = 0
    for c in captures:
        d_v = c.V.shape[-1]
        out = out + (c.A @ c.V) @ weight[start:start + d_v]
        start += d_v
    if start != weight.shape[0]:
        raise ValueError(f"heads cover {start} rows of a {weight.shape[0]}-row map")
    return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderClassifier:
    """Embeddings, one encoder layer and a first-token linear classifier."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, Parameter] = {}

        def add(name, value):
            p[name] = Parameter(name, value)

        add("embed.token", rng.standard_normal((c.vocab_size, c.d_e)))
        add("embed.pos", rng.standard_normal((c.d_s_max, c.d_e)))
        for i in range(c.h):
            add(f"head{i}.wq", _uniform(rng, c.d_e, (c.d_e, c.d_k)))
            add(f"head{i}.bq", _uniform(rng, c.d_e, (1, c.d_k)))
            add(f"head{i}.wk", _uniform(rng, c.d_e, (c.d_e, c.d_k)))
            add(f"head{i}.bk", _uniform(rng, c.d_e, (1, c.d_k)))
            add(f"head{i}.wv", _uniform(rng, c.d_e, (c.d_e, c.d_v)))
            add(f"head{i}.bv", _uniform(rng, c.d_e, (1, c.d_v)))
        add("attn.out.w", _uniform(rng, c.d_e, (c.d_e, c.d_e)))
        add("attn.out.b", _uniform(rng, c.d_e, (1, c.d_e)))
        add("norm1.gain", np.ones((1, c.d_e)))
        add("norm1.bias", np.zeros((1, c.d_e)))
        add("ffn.linear1.w", _uniform(rng, c.d_e, (c.d_e, c.ffn_hidden)))
        add("ffn.linear1.b", _uniform(rng, c.d_e, (1, c.ffn_hidden)))
        add("ffn.linear2.w", _uniform(rng, c.ffn_hidden, (c.ffn_hidden, c.d_e)))
        add("ffn.linear2.b", _uniform(rng, c.ffn_hidden, (1, c.d_e)))
        add("norm2.gain", np.ones((1, c.d_e)))
        add("norm2.bias", np.zeros((1, c.d_e)))
        add("classifier.w", _uniform(rng, c.d_e, (c.d_e, c.n_classes)))
        add("classifier.b", _uniform(rng, c.d_e, (1, c.n_classes)))
        self.params = p

    # -- parameters -----------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if value.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name].value = np.array(value, dtype=np.float64)

    def head_params(self, i: int) -> HeadParams:
        c = self.config
        p = self.params
        D = p["attn.out.w"].value
        out = D[i * c.d_v:(i + 1) * c.d_v] if c.variant is Variant.CON else D
        return HeadParams(
            wq=p[f"head{i}.wq"].value, bq=p[f"head{i}.bq"].value,
            wk=p[f"head{i}.wk"].value, bk=p[f"head{i}.bk"].value,
            wv=p[f"head{i}.wv"].value, bv=p[f"head{i}.bv"].value,
            out=out,
        )

    # -- forward pieces -------------------------------------------------

    def prepare_ids(self, ids) -> np.ndarray:
        """Validate token ids as a ``(batch, d_s)`` array; unknown ids become UNK."""
        arr = np.asarray(ids)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ValueError(f"token ids must be 1-D or 2-D, got shape {arr.shape}")
        if arr.shape[1] == 0:
            raise ValueError("empty token sequence")
        if arr.shape[1] > self.config.d_s_max:
            raise ValueError(f"sequence length {arr.shape[1]} exceeds d_s_max={self.config.d_s_max}")
        arr = arr.astype(np.int64)
        return np.where((arr < 0) | (arr >= self.config.vocab_size), UNK_INDEX, arr)

    def embed(self, ids) -> Tensor:
        ids = self.prepare_ids(ids)
        pos = nc.embedding(self.params["embed.pos"], np.arange(ids.shape[1]))
        return nc.embedding(self.params["embed.token"], ids) + pos

    def attention(self, x: Tensor, capture: bool = False):
        """Multi-head self-attention sub-layer output and optional captures."""
        c = self.config
        p = self.params
        head_values = []
        captures = []
        for i in range(c.h):
            q = x @ p[f"head{i}.wq"] + p[f"head{i}.bq"]
            k = x @ p[f"head{i}.wk"] + p[f"head{i}.bk"]
            v = x @ p[f"head{i}.wv"] + p[f"head{i}.bv"]
            logits = (q @ k.transpose()) * (1.0 / math.sqrt(c.d_k))
            a = logits.softmax()
            head_values.append(a @ v)
            if capture:
                T = v.value @ self.head_params(i).out
                captures.append(HeadCapture(Q=q.value, K=k.value, V=v.value, A_logits=logits.value,
                                            A=a.value, T=T, H=a.value @ T))
        if c.variant is Variant.CON:
            merged = nc.concat(head_values, axis=-1)
        else:
            merged = head_values[0]
            for hv in head_values[1:]:
                merged = merged + hv
        out = merged @ p["attn.out.w"] + p["attn.out.b"]
        return out, captures

    def ffn_sublayer(self, tokens: Tensor, head_out: Tensor) -> Tensor:
        """``y1 = Linear_1(Norm(t + head_out))``; ``y2 = Norm(t + ReLU(Linear_2(y1)))``."""
        p = self.params
        y1 = nc.layer_norm_op(tokens + head_out, p["norm1.gain"], p["norm1.bias"])
        y1 = y1 @ p["ffn.linear1.w"] + p["ffn.linear1.b"]
        inner = (y1 @ p["ffn.linear2.w"] + p["ffn.linear2.b"]).relu()
        return nc.layer_norm_op(tokens + inner, p["norm2.gain"], p["norm2.bias"])

    def encode(self, ids, capture: bool = False):
        x = self.embed(ids)
        head_out, captures = self.attention(x, capture=capture)
        return self.ffn_sublayer(x, head_out), captures

    def classify(self, ids) -> Tensor:
        """Class logits from the encoder output at the first position."""
        out, _ = self.encode(ids)
        first = nc.select(out, 0, axis=1)
        return first @ self.params["classifier.w"] + self.params["classifier.b"]

    def predict(self, ids) -> np.ndarray:
        with nc.no_grad():
            return self.classify(ids).value.argmax(axis=-1)

    def capture_heads(self, ids, heads: Sequence[int] | None = None) -> list[HeadCapture]:
        """Batched head captures without running the feed-forward sub-layer."""
        heads = range(self.config.h) if heads is None else heads
        with nc.no_grad():
            x = self.embed(ids).value
        return [head_forward(x, self.head_params(i)) for i in heads]
