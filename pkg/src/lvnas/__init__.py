"""Layer-variety architecture search for masked-language-model encoders.

A numpy implementation of self-attention, feed-forward and dynamic
convolution layers with hand-written backward passes, a weight-sharing
supernet trained by uniform single-path sampling, and an evolutionary
search over per-position layer choices scored by masked-token accuracy.
"""

__version__ = "0.1.0"

from .architecture import Genome, LayerKind, ModelConfig, count_params, parse_genome, preset_genome, render_genome
from .model import Model
from .search import SearchConfig, run_random_search, run_search
from .supernet import Supernet, inherit_weights

__all__ = [
    "Genome", "LayerKind", "Model", "ModelConfig", "SearchConfig", "Supernet", "count_params",
    "inherit_weights", "parse_genome", "preset_genome", "render_genome", "run_random_search", "run_search",
    "__version__",
]
