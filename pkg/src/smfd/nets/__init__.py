"""Network graphs, builders and weight stores."""

from .blocks import (ABLATIONS, KINDS, UPSAMPLE_MODES, GraphBuilder, NetConfig, build_cbam,
                     build_network, build_rdc, build_upsample_block, postprocess_image)
from .graph import (GraphError, LayerNode, NetworkGraph, Tape, WeightError, backward, forward,
                    run)
from .store import (ParamCount, WeightFileError, init_weights, load_weights, param_count,
                    save_weights)

__all__ = [
    "ABLATIONS", "KINDS", "UPSAMPLE_MODES", "GraphBuilder", "NetConfig", "build_cbam",
    "build_network", "build_rdc", "build_upsample_block", "postprocess_image", "GraphError",
    "LayerNode", "NetworkGraph", "Tape", "WeightError", "backward", "forward", "run",
    "ParamCount", "WeightFileError", "init_weights", "load_weights", "param_count",
    "save_weights",
]
