from .base import Cache, ForwardTrace, InstrumentedModel, LayerTrace, ModelConfig
from .scripted import ScriptedModel
from .toy import KVCache, ToyTransformer, build_toy_model, splitmix64_uniform, weight_layout

__all__ = [
    "Cache",
    "ForwardTrace",
    "InstrumentedModel",
    "KVCache",
    "LayerTrace",
    "ModelConfig",
    "ScriptedModel",
    "ToyTransformer",
    "build_toy_model",
    "splitmix64_uniform",
    "weight_layout",
]
