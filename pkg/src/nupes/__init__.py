"""Non-uniform power-exponent quantization for dense networks.

Modules:

* :mod:`nupes.tensor` -- shape checks, matmul, scale granularity helpers
* :mod:`nupes.quant` -- power quantization, levels, serialization
* :mod:`nupes.search` -- data-free exponent search
* :mod:`nupes.gptq` -- layer-wise learning of quantized values and exponents
* :mod:`nupes.runtime` -- models, datasets, inference and evaluation
* :mod:`nupes.cli` -- command-line front end
"""

__version__ = "0.1.0"

from .gptq import BetaScheduler, OptConfig, dsq, exponent_backward, optimize_model  # noqa: E402
from .quant import (  # noqa: E402
    QuantConfig,
    QuantizedTensor,
    dequantize,
    fake_quantize,
    generate_levels,
    quantize,
    reconstruction_error,
)
from .runtime import (  # noqa: E402
    Dataset,
    Layer,
    ModelSpec,
    QuantPolicy,
    calibrate,
    evaluate,
    forward_fp,
    forward_quant,
    load_model,
    make_dataset,
    save_model,
    train_fixture,
)
from .search import SearchConfig, powerquant_datafree, search_exponent  # noqa: E402
from .tensor import Granularity  # noqa: E402

__all__ = [
    "BetaScheduler", "Dataset", "Granularity", "Layer", "ModelSpec", "OptConfig", "QuantConfig",
    "QuantPolicy", "QuantizedTensor", "SearchConfig", "calibrate", "dequantize", "dsq", "evaluate",
    "exponent_backward", "fake_quantize", "forward_fp", "forward_quant", "generate_levels",
    "load_model", "make_dataset", "optimize_model", "powerquant_datafree", "quantize",
    "reconstruction_error", "save_model", "search_exponent", "train_fixture",
]
