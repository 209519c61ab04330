"""Sound preimage approximation for ReLU networks by branch and refine."""
from .engine import Result, RunConfig, premap2
from .model import (Network, OutputSpec, append_output_spec,
                    class_dominance_spec, forward, load_model,
                    load_model_file, pre_activations)

__all__ = ["Network", "OutputSpec", "Result", "RunConfig",
           "append_output_spec", "class_dominance_spec", "forward",
           "load_model", "load_model_file", "pre_activations", "premap2"]
__version__ = "0.1.0"
