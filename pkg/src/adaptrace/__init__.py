"""Adaptive call-stack trace reduction and behavior detection.

Raw stacks are symbolicated against a module map, thinned by learned API and
stack selection, compressed, counted per process window and classified by a
random forest.
"""
from .trace import (
    BENIGN,
    DEFAULT_LABELS,
    ModuleMap,
    RawStackEvent,
    ResolvedCallStack,
    read_module_map,
    read_trace,
    write_module_map,
    write_trace,
)
from .resolver import ApiFilter, Resolver, ResolverCaches, parse_call_stack, resolve_address
from .embedding import FeatureWindow, Vocabulary, embed_window
from .forest import ForestModel, ForestParams, evaluate, predict, train_forest

__all__ = [
    "BENIGN", "DEFAULT_LABELS", "ModuleMap", "RawStackEvent", "ResolvedCallStack",
    "read_module_map", "read_trace", "write_module_map", "write_trace",
    "ApiFilter", "Resolver", "ResolverCaches", "parse_call_stack", "resolve_address",
    "FeatureWindow", "Vocabulary", "embed_window",
    "ForestModel", "ForestParams", "evaluate", "predict", "train_forest",
]
__version__ = "0.1.0"
