"""Tabular ResNeXt, residual MLP and a compact FT-Transformer.

ResNeXt block (one per layer, ``C`` = cardinality)::

    z = BatchNorm(x)
    for each path p:  u_p = dropout_h(relu(z @ W_in[p] + b_in[p]))
    y = dropout_r(sum_p u_p @ W_out[p] + b_out)
    return x + y

with path width ``h_p = floor(d * d_hidden_factor / C)``. The C input
matrices are stored side by side in one ``(d, C*h_p)`` parameter and the
output matrices stacked in one ``(C*h_p, d)`` parameter, so path ``p`` owns
columns/rows ``p*h_p : (p+1)*h_p``. Each path is still initialised with its
own fan-in. The residual MLP is the same block with ``C = 1``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from tabbench import autodiff as ad
from tabbench.autodiff import EVAL, TRAIN, ParameterSet, ShapeError, Tensor

CARDINALITIES = (2, 4, 8, 16, 32)
FT_HEADS = 8


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class InputSchema:
    n_num: int
    cardinalities: tuple[int, ...] = ()

    @property
    def n_cat(self) -> int:
        return len(self.cardinalities)

    @property
    def n_features(self) -> int:
        return self.n_num + self.n_cat


class _Config:
    @classmethod
    def from_dict(cls, values: dict):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResNetConfig(_Config):
    n_layers: int = 4
    layer_size: int = 544
    learning_rate: float = 3.1622776601683794e-4
    weight_decay: float = 3.1622776601683795e-5
    residual_dropout: float = 0.25
    hidden_dropout: float = 0.25
    d_embedding: int = 288
    d_hidden_factor: float = 2.5


@dataclass(frozen=True)
class ResNeXtConfig(ResNetConfig):
    cardinality: int = 8


@dataclass(frozen=True)
class FTConfig(_Config):
    n_layers: int = 3
    d_token: int = 192
    residual_dropout: float = 0.0
    attn_dropout: float = 0.2
    ffn_dropout: float = 0.1
    d_ffn_factor: float = 4 / 3
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    n_heads: int = FT_HEADS


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def _kaiming(rng, fan_in, shape):
    # He-uniform for layers feeding a ReLU
    return _uniform(rng, math.sqrt(6.0 / fan_in), shape)


def _check_batch(schema: InputSchema, x_num, x_cat):
    x_num = np.asarray(x_num, dtype=np.float64)
    x_cat = np.asarray(x_cat, dtype=np.int64)
    if x_num.ndim != 2 or x_num.shape[1] != schema.n_num:
        raise ShapeError(f"expected {schema.n_num} numeric columns, got shape {x_num.shape}")
    if x_cat.ndim != 2 or x_cat.shape[1] != schema.n_cat or x_cat.shape[0] != x_num.shape[0]:
        raise ShapeError(f"expected {schema.n_cat} categorical columns, got shape {x_cat.shape}")
    return x_num, x_cat


class ModelInstance:
    """Parameters, normalization state and forward pass of one network."""

    arch = ""

    def __init__(self, schema: InputSchema, n_classes: int, config):
        self.schema = schema
        self.n_classes = n_classes
        self.config = config
        self.params = ParameterSet()
        self.bn_states: dict[str, ad.BatchNormState] = {}
        self.notes: list[str] = []

    def forward(self, batch, mode: str = EVAL, rng=None) -> Tensor:
        raise NotImplementedError

    def state(self) -> dict:
        """Copy of everything a best-epoch snapshot needs to restore."""
        return {
            "params": self.params.snapshot(),
            "bn": {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in self.bn_states.items()},
        }

    def load_state(self, state: dict):
        self.params.load(state["params"])
        for k, (mean, var) in state["bn"].items():
            self.bn_states[k].running_mean = mean.copy()
            self.bn_states[k].running_var = var.copy()

    def _bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        return ad.batch_norm(
            x, self.bn_states[name], self.params[f"{name}.gamma"], self.params[f"{name}.beta"], mode
        )

    def _add_bn(self, name: str, d: int):
        self.params.add(f"{name}.gamma", np.ones(d), kind="norm")
        self.params.add(f"{name}.beta", np.zeros(d), kind="norm")
        self.bn_states[name] = ad.BatchNormState.zeros(d)


class ResNeXtModel(ModelInstance):
    arch = "resnext"

    def __init__(self, cfg: ResNetConfig, schema: InputSchema, n_classes: int, rng, cardinality: int):
        super().__init__(schema, n_classes, cfg)
        d = int(cfg.layer_size)
        self.cardinality = int(cardinality)
        # the tolerance keeps e.g. 22 * (30/22) / 2 from flooring to 14
        raw = int(math.floor(d * cfg.d_hidden_factor / self.cardinality + 1e-9))
        if raw < 1:
            msg = f"path width floor({d}*{cfg.d_hidden_factor}/{self.cardinality}) = {raw}; clamped to 1"
            warnings.warn(msg)
            self.notes.append(msg)
        self.path_width = max(raw, 1)
        hidden = self.path_width * self.cardinality
        d_emb = int(cfg.d_embedding)
        p = self.params

        for j, card in enumerate(schema.cardinalities):
            p.add(f"embed.{j}", _uniform(rng, 1.0 / math.sqrt(d_emb), (card + 1, d_emb)), kind="embedding")
        d_in = schema.n_num + schema.n_cat * d_emb
        self.d_in = d_in
        p.add("stem.weight", _uniform(rng, 1.0 / math.sqrt(max(d_in, 1)), (d_in, d)))
        p.add("stem.bias", np.zeros(d), kind="bias")

        for i in range(int(cfg.n_layers)):
            self._add_bn(f"block{i}.norm", d)
            w_in = np.concatenate(
                [_kaiming(rng, d, (d, self.path_width)) for _ in range(self.cardinality)], axis=1
            )
            w_out = np.concatenate(
                [_uniform(rng, 1.0 / math.sqrt(self.path_width), (self.path_width, d))
                 for _ in range(self.cardinality)],
                axis=0,
            )
            p.add(f"block{i}.paths.w_in", w_in)
            p.add(f"block{i}.paths.b_in", np.zeros(hidden), kind="bias")
            p.add(f"block{i}.paths.w_out", w_out)
            p.add(f"block{i}.b_out", np.zeros(d), kind="bias")

        self._add_bn("head.norm", d)
        p.add("head.weight", _uniform(rng, 1.0 / math.sqrt(d), (d, n_classes)))
        p.add("head.bias", np.zeros(n_classes), kind="bias")

    @property
    def n_blocks(self) -> int:
        return int(self.config.n_layers)

    def embed(self, batch) -> Tensor:
        x_num, x_cat = _check_batch(self.schema, *batch)
        parts = [Tensor(x_num)]
        for j in range(self.schema.n_cat):
            parts.append(ad.embedding_lookup(self.params[f"embed.{j}"], x_cat[:, j]))
        h = ad.concat_cols(parts) if len(parts) > 1 else parts[0]
        return ad.add(ad.matmul(h, self.params["stem.weight"]), self.params["stem.bias"])

    def block(self, i: int, x: Tensor, mode: str, rng=None) -> Tensor:
        p, cfg = self.params, self.config
        z = self._bn(f"block{i}.norm", x, mode)
        u = ad.relu(ad.add(ad.matmul(z, p[f"block{i}.paths.w_in"]), p[f"block{i}.paths.b_in"]))
        u = ad.dropout(u, cfg.hidden_dropout, mode, rng)
        y = ad.add(ad.matmul(u, p[f"block{i}.paths.w_out"]), p[f"block{i}.b_out"])
        y = ad.dropout(y, cfg.residual_dropout, mode, rng)
        return ad.add(x, y)

    def head(self, x: Tensor, mode: str) -> Tensor:
        z = self._bn("head.norm", x, mode)
        return ad.add(ad.matmul(z, self.params["head.weight"]), self.params["head.bias"])

    def forward(self, batch, mode: str = EVAL, rng=None) -> Tensor:
        x = self.embed(batch)
        for i in range(self.n_blocks):
            x = self.block(i, x, mode, rng)
        return self.head(x, mode)


class ResNetModel(ResNeXtModel):
    arch = "resnet"


class FTTransformer(ModelInstance):
    arch = "ft"

    def __init__(self, cfg: FTConfig, schema: InputSchema, n_classes: int, rng):
        super().__init__(schema, n_classes, cfg)
        heads = int(cfg.n_heads)
        if cfg.d_token < heads:
            raise ConfigurationError(f"d_token={cfg.d_token} is smaller than n_heads={heads}")
        if schema.n_features == 0:
            raise ConfigurationError("FT-Transformer needs at least one feature")
        d = int(cfg.d_token) // heads * heads
        self.d_token = d
        self.n_heads = heads
        self.d_ffn = max(int(math.floor(d * cfg.d_ffn_factor + 1e-9)), 1)
        self.record_attention = False
        self.last_attention: list[np.ndarray] = []
        p = self.params
        bound = 1.0 / math.sqrt(d)

        if schema.n_num:
            p.add("tok.num_weight", _uniform(rng, bound, (schema.n_num, d)), kind="embedding")
            p.add("tok.num_bias", _uniform(rng, bound, (schema.n_num, d)), kind="bias")
        for j, card in enumerate(schema.cardinalities):
            p.add(f"tok.cat_embed.{j}", _uniform(rng, bound, (card + 1, d)), kind="embedding")
        if schema.n_cat:
            p.add("tok.cat_bias", _uniform(rng, bound, (schema.n_cat, d)), kind="bias")
        p.add("tok.cls", _uniform(rng, bound, (d,)), kind="embedding")

        for i in range(int(cfg.n_layers)):
            pre = f"layer{i}"
            self._add_ln(f"{pre}.attn_norm", d)
            for name in ("wq", "wk", "wv", "wo"):
                p.add(f"{pre}.attn.{name}", _uniform(rng, bound, (d, d)))
                p.add(f"{pre}.attn.b{name[1]}", np.zeros(d), kind="bias")
            self._add_ln(f"{pre}.ffn_norm", d)
            p.add(f"{pre}.ffn.w1", _kaiming(rng, d, (d, 2 * self.d_ffn)))
            p.add(f"{pre}.ffn.b1", np.zeros(2 * self.d_ffn), kind="bias")
            p.add(f"{pre}.ffn.w2", _uniform(rng, 1.0 / math.sqrt(self.d_ffn), (self.d_ffn, d)))
            p.add(f"{pre}.ffn.b2", np.zeros(d), kind="bias")

        self._add_ln("head.norm", d)
        p.add("head.weight", _kaiming(rng, d, (d, n_classes)))
        p.add("head.bias", np.zeros(n_classes), kind="bias")

    def _add_ln(self, name, d):
        self.params.add(f"{name}.gamma", np.ones(d), kind="norm")
        self.params.add(f"{name}.beta", np.zeros(d), kind="norm")

    def _ln(self, name, x):
        return ad.layer_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def tokenize(self, batch) -> Tensor:
        x_num, x_cat = _check_batch(self.schema, *batch)
        m, d, p = x_num.shape[0], self.d_token, self.params
        cls = ad.broadcast_to(ad.reshape(p["tok.cls"], (1, 1, d)), (m, 1, d))
        tokens = [cls]
        if self.schema.n_num:
            xn = Tensor(x_num.reshape(m, self.schema.n_num, 1))
            tokens.append(ad.add(ad.mul(xn, p["tok.num_weight"]), p["tok.num_bias"]))
        for j in range(self.schema.n_cat):
            e = ad.embedding_lookup(p[f"tok.cat_embed.{j}"], x_cat[:, j:j + 1])
            tokens.append(ad.add(e, ad.getitem(p["tok.cat_bias"], slice(j, j + 1))))
        return ad.concat_cols(tokens, axis=1)

    def attention(self, i: int, x: Tensor, mode: str, rng=None) -> Tensor:
        p, pre = self.params, f"layer{i}.attn"
        q, k, v = (ad.add(ad.matmul(x, p[f"{pre}.w{n}"]), p[f"{pre}.b{n}"]) for n in "qkv")
        record = self.last_attention if self.record_attention else None
        out = ad.attention(q, k, v, self.n_heads, self.config.attn_dropout, mode, rng, record)
        return ad.add(ad.matmul(out, p[f"{pre}.wo"]), p[f"{pre}.bo"])

    def ffn(self, i: int, x: Tensor, mode: str, rng=None) -> Tensor:
        p, pre, f = self.params, f"layer{i}.ffn", self.d_ffn
        u = ad.add(ad.matmul(x, p[f"{pre}.w1"]), p[f"{pre}.b1"])
        # ReGLU: first half gated by relu of the second half
        u = ad.mul(ad.getitem(u, (Ellipsis, slice(0, f))), ad.relu(ad.getitem(u, (Ellipsis, slice(f, 2 * f)))))
        u = ad.dropout(u, self.config.ffn_dropout, mode, rng)
        return ad.add(ad.matmul(u, p[f"{pre}.w2"]), p[f"{pre}.b2"])

    def forward(self, batch, mode: str = EVAL, rng=None) -> Tensor:
        cfg = self.config
        self.last_attention = []
        x = self.tokenize(batch)
        for i in range(int(cfg.n_layers)):
            a = self.attention(i, self._ln(f"layer{i}.attn_norm", x), mode, rng)
            x = ad.add(x, ad.dropout(a, cfg.residual_dropout, mode, rng))
            f = self.ffn(i, self._ln(f"layer{i}.ffn_norm", x), mode, rng)
            x = ad.add(x, ad.dropout(f, cfg.residual_dropout, mode, rng))
        cls = ad.getitem(x, (slice(None), 0))
        z = ad.relu(self._ln("head.norm", cls))
        return ad.add(ad.matmul(z, self.params["head.weight"]), self.params["head.bias"])


def build_resnext(cfg: ResNeXtConfig, schema: InputSchema, n_classes: int, rng) -> ResNeXtModel:
    if cfg.cardinality < 1:
        raise ConfigurationError("cardinality must be positive")
    return ResNeXtModel(cfg, schema, n_classes, rng, cfg.cardinality)


def build_resnet(cfg: ResNetConfig, schema: InputSchema, n_classes: int, rng) -> ResNetModel:
    return ResNetModel(cfg, schema, n_classes, rng, cardinality=1)


def build_ft_transformer(cfg: FTConfig, schema: InputSchema, n_classes: int, rng) -> FTTransformer:
    return FTTransformer(cfg, schema, n_classes, rng)


BUILDERS = {
    "resnext": (ResNeXtConfig, build_resnext),
    "resnet": (ResNetConfig, build_resnet),
    "ft": (FTConfig, build_ft_transformer),
}


def build(tag: str, config: dict, schema: InputSchema, n_classes: int, rng) -> ModelInstance:
    """Build a model from a flat hyperparameter mapping."""
    if tag not in BUILDERS:
        raise ConfigurationError(f"unknown model tag {tag!r}")
    cfg_cls, builder = BUILDERS[tag]
    return builder(cfg_cls.from_dict(config), schema, n_classes, rng)


def forward(model: ModelInstance, batch, mode: str = EVAL, rng=None) -> Tensor:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    return model.forward(batch, mode, rng)


def param_count(model: ModelInstance) -> tuple[int, int]:
    """(weights, total): weights excludes biases and normalization affines."""
    weights = total = 0
    for name, t in model.params:
        n = int(t.data.size)
        total += n
        if model.params.kinds[name] in ("weight", "embedding"):
            weights += n
    return weights, total
