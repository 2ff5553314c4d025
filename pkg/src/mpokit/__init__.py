"""Compress neural-network weight matrices into matrix product operators."""
from .checkpoint import (Checkpoint, LayerSpec, ModelManifest, inspect, read_checkpoint,
                         read_manifest, write_checkpoint, write_manifest)
from .estimators import AffineQuantizer, MPOCompressor, MPOHealingClassifier
from .mpo import IndexScheme, MpoLayer, apply, decompose, param_count, reconstruct
from .pipeline import (CompressionPlan, CompressionReport, compress_model, emit_report,
                       parse_plan, verify_compressed)
from .profiler import SensitivityCurve, profile
from .quantization import QuantizedTensor, dequantize, quantize_affine
from .tensor import (DenseTensor, DType, SvdResult, balanced_factorization, frobenius_norm,
                     permute_axes, reshape, truncated_svd)

__version__ = "0.1.0"
