from .descriptor import TransformerSpec, ar_spec, score_spec
from .exact import ExactScoreModel
from .tabular import TabularScoreModel, fit_tabular_score, noise_buckets
from .transformer import ARTransformer, Counters, KVCache, ModelError, ScoreTransformer

__all__ = [
    "TransformerSpec", "ar_spec", "score_spec", "ExactScoreModel",
    "TabularScoreModel", "fit_tabular_score", "noise_buckets",
    "ARTransformer", "Counters", "KVCache", "ModelError", "ScoreTransformer",
]
