"""Set poolers g: (..., M, D) -> (..., D) and the JAP / DCP wrappers.

All poolers are weighted sums over the M rows, so their output does not
depend on row order. Parameter shapes are declared per class so counts and
FLOPs can be computed without allocating weights.

FLOP formulas count a multiply-accumulate as 2 FLOPs, elementwise ops and
one exp as 1 FLOP each, and only input-dependent work. Learned queries that
are fed to a projection without touching the input are treated as
precomputed.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .errors import NonFiniteError, ShapeError, UnknownArchError
from .numerics import Tensor, as_tensor, layer_norm, linear, parameter, softmax
from .rng import RngStream

logger = logging.getLogger(__name__)

LN_FLOPS = 5  # per feature: mean, center, square, scale, affine


class Pooler:
    """Base class. Subclasses set ``arch`` and implement ``_pool``."""

    arch: ClassVar[str]
    DEFAULTS: ClassVar[dict[str, int]] = {}

    def __init__(self, dim: int, params: Mapping[str, Tensor], **options: int) -> None:
        self.dim = dim
        self.options = {**self.DEFAULTS, **options}
        expected = self.param_shapes(dim, self.options)
        if set(params) != set(expected):
            raise ShapeError(f"{self.arch}: parameters {sorted(params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{self.arch}.{name}: shape {params[name].shape} != {shape}")
        self.params: dict[str, Tensor] = dict(params)

    @classmethod
    def param_shapes(cls, dim: int, options: Mapping[str, int]) -> dict[str, tuple[int, ...]]:
        return {}

    @classmethod
    def flops(cls, m: int, dim: int, options: Mapping[str, int]) -> int:
        """Analytic FLOPs of one forward pass over an (m, dim) set."""
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, feats: "Tensor | np.ndarray") -> Tensor:
        feats = as_tensor(feats)
        if feats.ndim < 2:
            raise ShapeError(f"{self.arch}: expected (..., M, D), got {feats.shape}")
        if feats.shape[-2] < 1:
            raise ShapeError(f"{self.arch}: cannot pool an empty set")
        if feats.shape[-1] != self.dim:
            raise ShapeError(f"{self.arch}: feature dim {feats.shape[-1]} != pooler dim {self.dim}")
        if not np.all(np.isfinite(feats.data)):
            raise NonFiniteError(f"{self.arch}: input contains NaN or Inf")
        return self._pool(feats)

    def _pool(self, feats: Tensor) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, options={self.options})"


def _squeeze_row(x: Tensor) -> Tensor:
    """(..., 1, D) -> (..., D)"""
    return x.reshape(x.shape[:-2] + x.shape[-1:])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., S, D) -> (..., H, S, D/H)"""
    *lead, s, d = x.shape
    return x.reshape(tuple(lead) + (s, heads, d // heads)).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., H, S, Dh) -> (..., S, H*Dh)"""
    x = x.swapaxes(-2, -3)
    *lead, s, h, dh = x.shape
    return x.reshape(tuple(lead) + (s, h * dh))


def _cross_attention(query: Tensor, keys: Tensor, values: Tensor, heads: int) -> Tensor:
    """Multi-head attention of a (1, D) query over (..., M, D) keys/values."""
    q = _split_heads(query, heads)
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(q.shape[-1])
    return _merge_heads(softmax(scores, axis=-1) @ v)


class MeanPooler(Pooler):
    arch = "mean"

    def _pool(self, feats: Tensor) -> Tensor:
        return feats.mean(axis=-2)

    @classmethod
    def flops(cls, m: int, dim: int, options: Mapping[str, int]) -> int:
        return m * dim


class SimPool(Pooler):
    """Query is the row mean; attention weights come from projected query and keys.

    Values are the unprojected rows.
    """

    arch = "simpool"

    @classmethod
    def param_shapes(cls, dim, options):
        return {"q_w": (dim, dim), "k_w": (dim, dim)}

    def _pool(self, feats: Tensor) -> Tensor:
        query = feats.mean(axis=-2, keepdims=True) @ self.params["q_w"]
        keys = feats @ self.params["k_w"]
        scores = (query @ keys.swapaxes(-1, -2)) / math.sqrt(self.dim)
        return _squeeze_row(softmax(scores, axis=-1) @ feats)

    @classmethod
    def flops(cls, m, dim, options):
        return 2 * dim * dim + m * (2 * dim * dim + 5 * dim + 3)


class ABMILPool(Pooler):
    """Gated attention MIL: score_i = w^T (tanh(V x_i) * sigmoid(U x_i))."""

    arch = "abmilp"

    @classmethod
    def param_shapes(cls, dim, options):
        hidden = max(dim // 2, 1)
        return {
            "v_w": (dim, hidden),
            "v_b": (hidden,),
            "u_w": (dim, hidden),
            "u_b": (hidden,),
            "w": (hidden, 1),
        }

    def _pool(self, feats: Tensor) -> Tensor:
        p = self.params
        gated = linear(feats, p["v_w"], p["v_b"]).tanh() * linear(feats, p["u_w"], p["u_b"]).sigmoid()
        weights = softmax(gated @ p["w"], axis=-2)
        return (weights * feats).sum(axis=-2)

    @classmethod
    def flops(cls, m, dim, options):
        hidden = max(dim // 2, 1)
        return m * (4 * dim * hidden + 2 * hidden + 3 * hidden + 2 * hidden + 3 + 2 * dim)


class EfficientProbe(Pooler):
    """k free queries against one shared key projection; values unprojected."""

    arch = "ep"
    DEFAULTS = {"queries": 4}

    @classmethod
    def param_shapes(cls, dim, options):
        return {"queries": (options["queries"], dim), "k_w": (dim, dim)}

    def _pool(self, feats: Tensor) -> Tensor:
        keys = feats @ self.params["k_w"]
        scores = (self.params["queries"] @ keys.swapaxes(-1, -2)) / math.sqrt(self.dim)
        return (softmax(scores, axis=-1) @ feats).mean(axis=-2)

    @classmethod
    def flops(cls, m, dim, options):
        k = options["queries"]
        return m * (2 * dim * dim + 4 * k * dim + 3 * k) + k * dim


class MABPool(Pooler):
    """Set-Transformer block with one learned seed.

    H = LN(s + MHA(s, X, X)); out = LN(H + FF(H)), FF = Linear(D, 2D) -> GELU -> Linear(2D, D).
    """

    arch = "mab"
    DEFAULTS = {"heads": 4}

    @classmethod
    def param_shapes(cls, dim, options):
        if dim % options["heads"]:
            raise ShapeError(f"mab: dim {dim} not divisible by heads {options['heads']}")
        shapes: dict[str, tuple[int, ...]] = {"seed": (1, dim)}
        for name in ("q", "k", "v", "o"):
            shapes[f"{name}_w"] = (dim, dim)
            shapes[f"{name}_b"] = (dim,)
        shapes.update(
            {
                "ln1_g": (dim,),
                "ln1_b": (dim,),
                "ln2_g": (dim,),
                "ln2_b": (dim,),
                "ff1_w": (dim, 2 * dim),
                "ff1_b": (2 * dim,),
                "ff2_w": (2 * dim, dim),
                "ff2_b": (dim,),
            }
        )
        return shapes

    def _pool(self, feats: Tensor) -> Tensor:
        p = self.params
        seed = p["seed"]
        attended = _cross_attention(
            linear(seed, p["q_w"], p["q_b"]),
            linear(feats, p["k_w"], p["k_b"]),
            linear(feats, p["v_w"], p["v_b"]),
            self.options["heads"],
        )
        h = layer_norm(seed + linear(attended, p["o_w"], p["o_b"]), p["ln1_g"], p["ln1_b"])
        ff = linear(linear(h, p["ff1_w"], p["ff1_b"]).gelu(), p["ff2_w"], p["ff2_b"])
        return _squeeze_row(layer_norm(h + ff, p["ln2_g"], p["ln2_b"]))

    @classmethod
    def flops(cls, m, dim, options):
        heads = options["heads"]
        per_row = 4 * dim * dim + 2 * dim + 2 * dim + 3 * heads + 2 * dim
        fixed = (
            2 * dim * dim + dim  # output projection
            + dim + 2 * LN_FLOPS * dim  # residuals into the norms
            + 2 * dim * 2 * dim + 2 * dim + 8 * 2 * dim  # FF first layer and GELU
            + 2 * 2 * dim * dim + dim + dim  # FF second layer and residual
        )
        return m * per_row + fixed


class MHCAPool(Pooler):
    """One free latent query; multi-head cross-attention with K, V and output projections."""

    arch = "mhca"
    DEFAULTS = {"heads": 4}

    @classmethod
    def param_shapes(cls, dim, options):
        if dim % options["heads"]:
            raise ShapeError(f"mhca: dim {dim} not divisible by heads {options['heads']}")
        return {
            "query": (1, dim),
            "k_w": (dim, dim),
            "k_b": (dim,),
            "v_w": (dim, dim),
            "v_b": (dim,),
            "o_w": (dim, dim),
            "o_b": (dim,),
        }

    def _pool(self, feats: Tensor) -> Tensor:
        p = self.params
        attended = _cross_attention(
            p["query"],
            linear(feats, p["k_w"], p["k_b"]),
            linear(feats, p["v_w"], p["v_b"]),
            self.options["heads"],
        )
        return _squeeze_row(linear(attended, p["o_w"], p["o_b"]))

    @classmethod
    def flops(cls, m, dim, options):
        per_row = 4 * dim * dim + 2 * dim + 2 * dim + 3 * options["heads"] + 2 * dim
        return m * per_row + 2 * dim * dim + dim


class ProtoBinPool(Pooler):
    """P learned prototypes each attend over the rows; prototype outputs are averaged."""

    arch = "protobin"
    DEFAULTS = {"prototypes": 8}

    @classmethod
    def param_shapes(cls, dim, options):
        return {"prototypes": (options["prototypes"], dim)}

    def _pool(self, feats: Tensor) -> Tensor:
        scores = (self.params["prototypes"] @ feats.swapaxes(-1, -2)) / math.sqrt(self.dim)
        return (softmax(scores, axis=-1) @ feats).mean(axis=-2)

    @classmethod
    def flops(cls, m, dim, options):
        p = options["prototypes"]
        return m * (4 * p * dim + 3 * p) + p * dim


POOLERS: dict[str, type[Pooler]] = {
    cls.arch: cls
    for cls in (MeanPooler, SimPool, ABMILPool, EfficientProbe, MABPool, MHCAPool, ProtoBinPool)
}


def pooler_class(arch: str) -> type[Pooler]:
    try:
        return POOLERS[arch]
    except KeyError:
        raise UnknownArchError(f"unknown pooler arch: {arch!r} (choose from {', '.join(POOLERS)})") from None


def _initial_value(name: str, shape: tuple[int, ...], stream: RngStream) -> np.ndarray:
    leaf = name.rsplit("_", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b":
        return np.zeros(shape)
    return stream.child(name).trunc_normal(shape, std=0.02)


def init_pooler(arch: str, dim: int, seed: int = 0, **options: int) -> Pooler:
    """Build a pooler with truncated-normal weights, unit norm gains and zero biases."""
    cls = pooler_class(arch)
    opts = {**cls.DEFAULTS, **options}
    stream = RngStream(seed).child("pooler", arch)
    params = {
        name: parameter(_initial_value(name, shape, stream))
        for name, shape in cls.param_shapes(dim, opts).items()
    }
    return cls(dim, params, **opts)


def pool(pooler: Pooler, feats: "Tensor | np.ndarray") -> Tensor:
    return pooler(feats)


@dataclass
class PoolingWrapper:
    """Applies one shared pooler jointly (JAP) or per channel then across channels (DCP)."""

    strategy: str
    pooler: Pooler

    def __post_init__(self) -> None:
        if self.strategy not in ("jap", "dcp"):
            raise ShapeError(f"unknown pooling strategy: {self.strategy}")

    def __call__(self, features: "Tensor | np.ndarray") -> Tensor:
        features = as_tensor(features)
        if features.ndim < 3:
            raise ShapeError(f"expected (..., C, N, D) features, got {features.shape}")
        if self.strategy == "jap":
            return jap_forward(self, features)
        return dcp_forward(self, features)

    def parameters(self) -> list[Tensor]:
        return self.pooler.parameters()

    def param_count(self) -> int:
        return self.pooler.param_count()


def jap_forward(wrapper: PoolingWrapper, features: "Tensor | np.ndarray") -> Tensor:
    """z_joint = g(concat(X_1 .. X_C)) over all C*N rows."""
    x = as_tensor(features)
    *lead, c, n, d = x.shape
    return wrapper.pooler(x.reshape(tuple(lead) + (c * n, d)))


def dcp_forward(wrapper: PoolingWrapper, features: "Tensor | np.ndarray") -> Tensor:
    """z_dcp = g((g(X_1), ..., g(X_C))), both passes with the same parameters."""
    local = wrapper.pooler(as_tensor(features))
    return wrapper.pooler(local)


def param_count(target: Pooler | PoolingWrapper) -> int:
    return target.param_count()


def pooler_param_count(arch: str, dim: int, **options: int) -> int:
    cls = pooler_class(arch)
    shapes = cls.param_shapes(dim, {**cls.DEFAULTS, **options})
    return sum(math.prod(s) for s in shapes.values())
