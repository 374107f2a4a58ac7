"""
Scale-then-compress toolkit.
Dynamic-S2 tiling, visual token compression, dataset pruning, sequence
packing, quantization simulation and an analytic cost model.
"""

__version__ = "0.1.0"

# Define public API
__all__ = [
    "settings",
    "PipelineConfig",
    "QuantSpec",
    "ModelShape",
    "FeatureMap",
    "Image",
    "plan_tiles",
    "multiscale_features",
    "TokenGrid",
    "stc_reshape",
    "temporal_pool",
    "count_tokens",
    "prune_deltaloss",
    "SequencePacker",
    "pack",
    "unpack",
    "quantize",
    "dequantize",
    "prefill_cost",
    "decode_cost",
    "ScaleThenCompressPipeline",
]

# Import main components for easier access
from .config import ModelShape, PipelineConfig, QuantSpec, settings
from .tensor import FeatureMap, Image
from .tiling import multiscale_features, plan_tiles
from .compress import TokenGrid, count_tokens, stc_reshape, temporal_pool
from .pruning import prune_deltaloss
from .packing import SequencePacker, pack, unpack
from .quantization import dequantize, quantize
from .cost_model import decode_cost, prefill_cost

# Import the pipeline last; it depends on every component above
from .pipeline import ScaleThenCompressPipeline
