"""tadakv: mean-centered low-bit KV-cache compression for transformer decoding.

Key and value activations are split into a cross-head mean plus per-head
deviations; the deviations are stored as packed 2/4/8-bit codes while the
newest tokens stay verbatim in a residual buffer.  A streaming attention
kernel decodes straight from the compressed cache, and a random search picks
per-layer bit widths under a memory budget.
"""

from .attention import AttentionOutput, BlockSpec, attend_naive, attend_streaming, prefill_attend
from .cache import (
    CompressedLayerCache,
    ModelConfig,
    PrecisionPlan,
    deserialize_cache,
    mean_center,
    memory_ratio,
    serialize_cache,
)
from .errors import (
    BudgetInfeasibleError,
    CapacityError,
    ConfigError,
    DataError,
    FormatError,
    ShapeError,
    StateError,
    TadaError,
)
from .model import (
    ToyModel,
    decode_step,
    generate,
    load_weights,
    new_caches,
    prefill_forward,
    random_model,
    reference_forward,
    reference_generate,
    save_weights,
)
from .quant import (
    QuantizedDeviation,
    dequantize_tensor,
    direct_quantize_baseline,
    quantize_group,
    quantize_tensor,
)
from .search import CalibrationReport, CalibrationSet, SearchConfig, random_search, score_plan
from .tensor import RopeParams, apply_rope, matmul, softmax_rows

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "BlockSpec",
    "BudgetInfeasibleError",
    "CalibrationReport",
    "CalibrationSet",
    "CapacityError",
    "CompressedLayerCache",
    "ConfigError",
    "DataError",
    "FormatError",
    "ModelConfig",
    "PrecisionPlan",
    "QuantizedDeviation",
    "RopeParams",
    "SearchConfig",
    "ShapeError",
    "StateError",
    "TadaError",
    "ToyModel",
    "apply_rope",
    "attend_naive",
    "attend_streaming",
    "decode_step",
    "dequantize_tensor",
    "deserialize_cache",
    "direct_quantize_baseline",
    "generate",
    "load_weights",
    "matmul",
    "mean_center",
    "memory_ratio",
    "new_caches",
    "prefill_attend",
    "prefill_forward",
    "quantize_group",
    "quantize_tensor",
    "random_model",
    "random_search",
    "reference_forward",
    "reference_generate",
    "save_weights",
    "score_plan",
    "serialize_cache",
    "softmax_rows",
    "__version__",
]
