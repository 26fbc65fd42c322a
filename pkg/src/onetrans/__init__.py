"""Unified ranking transformer over behavior sequences and per-candidate features."""

from .bench import flop_formula
from .cache import KVCacheStore, monolithic_logits, score_request, verify_equivalence
from .features import Request, SynthConfig, generate_synthetic, load_jsonl
from .model import ModelConfig, OneTrans, PooledBaseline, build_model, load_model, tiny_config
from .numerics import FlopCounter
from .train import TrainConfig, auc, desk_train_config, next_batch_loop, uauc

__version__ = "0.1.0"
