"""Frozen multi-channel ViT with joint and independent feature encoding.

Every channel is tokenized by one shared single-channel patch projection
and receives the same positional embedding at the same spatial index.
There are no channel embeddings.

JFE concatenates all channels into one sequence behind a single cls token,
so every token attends to every channel. IFE runs each channel's tokens
(with its own copy of the cls token) through the same blocks separately.
"""

import asyncio
import hashlib
import logging
import math
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING

import numpy as np
from einops import rearrange

from .config import EncoderConfig
from .errors import ConfigError, ShapeError
from .numerics import Tensor, layer_norm, softmax
from .rng import RngStream

if TYPE_CHECKING:
    from .synthdata import MultiChannelImage

logger = logging.getLogger(__name__)


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class BlockWeights:
    """Pre-norm transformer block. Linear weights are stored (in, out)."""

    norm1_g: np.ndarray
    norm1_b: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            object.__setattr__(self, f.name, _freeze(getattr(self, f.name)))


@dataclass(frozen=True)
class EncoderWeights:
    config: EncoderConfig
    patch_w: np.ndarray  # (P*P, D), shared by every channel
    patch_b: np.ndarray
    pos_embed: np.ndarray  # (N + 1, D); row 0 belongs to the cls token
    cls_token: np.ndarray
    blocks: tuple[BlockWeights, ...]
    norm_g: np.ndarray
    norm_b: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name not in ("config", "blocks"):
                object.__setattr__(self, f.name, _freeze(getattr(self, f.name)))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        cfg = self.config
        d, n = cfg.embed_dim, cfg.num_patches
        if self.patch_w.shape != (cfg.patch_size**2, d):
            raise ShapeError(f"patch_w has shape {self.patch_w.shape}")
        if self.pos_embed.shape != (n + 1, d):
            raise ShapeError(f"pos_embed has shape {self.pos_embed.shape}, want {(n + 1, d)}")
        if len(self.blocks) != cfg.depth:
            raise ShapeError(f"{len(self.blocks)} blocks for depth {cfg.depth}")

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            if f.name == "config":
                continue
            if f.name == "blocks":
                for i, block in enumerate(self.blocks):
                    for bf in fields(block):
                        yield f"blocks.{i}.{bf.name}", getattr(block, bf.name)
            else:
                yield f.name, getattr(self, f.name)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, array in self.arrays():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class TokenBatch:
    """Pre-encoder embeddings x + x_pos for one image, shape (C, N, D)."""

    tokens: np.ndarray

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3 or self.tokens.shape[0] < 1:
            raise ShapeError(f"token batch must be (C>=1, N, D), got {self.tokens.shape}")

    @property
    def channels(self) -> int:
        return self.tokens.shape[0]

    def select(self, channels: Sequence[int]) -> "TokenBatch":
        return TokenBatch(self.tokens[list(channels)])


@dataclass(frozen=True)
class FeatureMap:
    """Frozen features of one image.

    ``patches`` is always (C, N, D); under JFE the concatenated CN tokens
    are split back in channel order. ``cls`` is (1, D) under JFE and
    (C, D) under IFE.
    """

    mode: str
    patches: np.ndarray
    cls: np.ndarray

    def __post_init__(self) -> None:
        if self.mode not in ("jfe", "ife"):
            raise ConfigError(f"unknown encoding mode: {self.mode}")
        if self.patches.ndim != 3:
            raise ShapeError(f"patch features must be (C, N, D), got {self.patches.shape}")
        c, _, d = self.patches.shape
        want = (1, d) if self.mode == "jfe" else (c, d)
        if self.cls.shape != want:
            raise ShapeError(f"{self.mode} cls features must be {want}, got {self.cls.shape}")
        object.__setattr__(self, "patches", _freeze(self.patches))
        object.__setattr__(self, "cls", _freeze(self.cls))

    @property
    def channels(self) -> int:
        return self.patches.shape[0]


def init_encoder(cfg: EncoderConfig) -> EncoderWeights:
    """Truncated-normal (std 0.02) weights drawn from ``RngStream(cfg.init_seed)``."""
    root = RngStream(cfg.init_seed).child("encoder")
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio

    def draw(name: str, shape: tuple[int, ...]) -> np.ndarray:
        return root.child(name).trunc_normal(shape, std=0.02)

    blocks = []
    for i in range(cfg.depth):
        blocks.append(
            BlockWeights(
                norm1_g=np.ones(d),
                norm1_b=np.zeros(d),
                qkv_w=draw(f"blocks.{i}.qkv_w", (d, 3 * d)),
                qkv_b=np.zeros(3 * d),
                proj_w=draw(f"blocks.{i}.proj_w", (d, d)),
                proj_b=np.zeros(d),
                norm2_g=np.ones(d),
                norm2_b=np.zeros(d),
                fc1_w=draw(f"blocks.{i}.fc1_w", (d, hidden)),
                fc1_b=np.zeros(hidden),
                fc2_w=draw(f"blocks.{i}.fc2_w", (hidden, d)),
                fc2_b=np.zeros(d),
            )
        )
    weights = EncoderWeights(
        config=cfg,
        patch_w=draw("patch_w", (cfg.patch_size**2, d)),
        patch_b=np.zeros(d),
        pos_embed=draw("pos_embed", (cfg.num_patches + 1, d)),
        cls_token=draw("cls_token", (d,)),
        blocks=tuple(blocks),
        norm_g=np.ones(d),
        norm_b=np.zeros(d),
    )
    logger.debug("Initialized encoder seed=%d checksum=%s", cfg.init_seed, weights.checksum()[:12])
    return weights


def tokenize(image: "MultiChannelImage | np.ndarray", weights: EncoderWeights) -> TokenBatch:
    """Project every channel's patches with the shared projection and add x_pos."""
    cfg = weights.config
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] == 0:
        raise ShapeError(f"image must be (C>=1, H, W), got {pixels.shape}")
    if pixels.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"image is {pixels.shape[1]}x{pixels.shape[2]}, encoder expects {cfg.image_size}x{cfg.image_size}"
        )
    patches = rearrange(
        pixels, "c (gh p1) (gw p2) -> c (gh gw) (p1 p2)", p1=cfg.patch_size, p2=cfg.patch_size
    )
    tokens = patches @ weights.patch_w + weights.patch_b + weights.pos_embed[1:]
    return TokenBatch(tokens)


def _block(x: np.ndarray, blk: BlockWeights, cfg: EncoderConfig) -> np.ndarray:
    h = layer_norm(x, blk.norm1_g, blk.norm1_b, cfg.ln_eps).data
    qkv = h @ blk.qkv_w + blk.qkv_b
    q, k, v = rearrange(qkv, "s (three h d) -> three h s d", three=3, h=cfg.heads)
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    attended = rearrange(softmax(scores, axis=-1).data @ v, "h s d -> s (h d)")
    x = x + attended @ blk.proj_w + blk.proj_b

    h = layer_norm(x, blk.norm2_g, blk.norm2_b, cfg.ln_eps).data
    h = Tensor(h @ blk.fc1_w + blk.fc1_b).gelu().data
    return x + h @ blk.fc2_w + blk.fc2_b


def _encode_sequence(tokens: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """Run f(.) over one (N', D) token sequence with the cls token prepended."""
    cfg = weights.config
    cls = (weights.cls_token + weights.pos_embed[0])[None, :]
    x = np.concatenate([cls, tokens], axis=0)
    for blk in weights.blocks:
        x = _block(x, blk, cfg)
    return layer_norm(x, weights.norm_g, weights.norm_b, cfg.ln_eps).data


def encode_jfe(batch: TokenBatch, weights: EncoderWeights) -> FeatureMap:
    c, n, d = batch.tokens.shape
    length = 1 + c * n
    if length > weights.config.max_sequence:
        raise ShapeError(
            f"JFE sequence of {length} tokens exceeds max_sequence={weights.config.max_sequence}"
        )
    out = _encode_sequence(batch.tokens.reshape(c * n, d), weights)
    return FeatureMap(mode="jfe", patches=out[1:].reshape(c, n, d), cls=out[:1])


def encode_ife(batch: TokenBatch, weights: EncoderWeights) -> FeatureMap:
    outs = [_encode_sequence(channel, weights) for channel in batch.tokens]
    return FeatureMap(
        mode="ife",
        patches=np.stack([o[1:] for o in outs]),
        cls=np.stack([o[0] for o in outs]),
    )


def encode(image: "MultiChannelImage | np.ndarray", weights: EncoderWeights, mode: str) -> FeatureMap:
    batch = tokenize(image, weights)
    if mode == "jfe":
        return encode_jfe(batch, weights)
    if mode == "ife":
        return encode_ife(batch, weights)
    raise ConfigError(f"unknown encoding mode: {mode}")


async def encode_many(
    images: Sequence["MultiChannelImage | np.ndarray"],
    weights: EncoderWeights,
    mode: str,
    jobs: int = 1,
) -> list[FeatureMap]:
    """Encode images on ``jobs`` worker threads; output order follows input order."""
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [loop.run_in_executor(pool, encode, image, weights, mode) for image in images]
        results = await asyncio.gather(*futures)
    logger.info("Encoded %d images (%s, jobs=%d)", len(results), mode, jobs)
    return list(results)
