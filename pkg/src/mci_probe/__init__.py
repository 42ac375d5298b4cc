"""mci-probe: channel-aware probing of frozen multi-channel ViT features."""

from .config import EncoderConfig, GeneratorConfig, LRSearchConfig, ProbeConfig, RunConfig
from .encoder import FeatureMap, encode, encode_ife, encode_jfe, init_encoder, tokenize
from .pooling import PoolingWrapper, dcp_forward, init_pooler, jap_forward, param_count, pool
from .probe import ProbeRun, evaluate, lr_search, run_matrix, train_probe
from .cli import dispatch, main

__all__ = [
    "EncoderConfig",
    "GeneratorConfig",
    "LRSearchConfig",
    "ProbeConfig",
    "RunConfig",
    "FeatureMap",
    "encode",
    "encode_ife",
    "encode_jfe",
    "init_encoder",
    "tokenize",
    "PoolingWrapper",
    "dcp_forward",
    "init_pooler",
    "jap_forward",
    "param_count",
    "pool",
    "ProbeRun",
    "evaluate",
    "lr_search",
    "run_matrix",
    "train_probe",
    "dispatch",
    "main",
]
