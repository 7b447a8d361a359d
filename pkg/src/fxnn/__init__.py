"""Fixed-point NN reliability toolkit.

Bit-exact fixed-point inference and C emission, single-bit fault campaigns
with curvature-guided sensitivity ranking, loss-landscape metrics, and
noise-robust (Jacobian-regularized) training, evaluated with the Earth
Mover's Distance.
"""

from .fixedpoint import BitCode, FixedPointFormat, bit_value_delta, decode, encode, flip_bit, quantize
from .nn import DenseLayerSpec, LayerFormats, ModelSpec, TrainConfig, benchmark_spec
from .modelio import QuantizedModel
from .dataio import BlobConfig, Dataset, GridGeometry, NoiseSpec, add_noise, gen_synthetic, load_csv
from .metrics import emd_1d, emd_exact, linear_cka, neural_efficiency

__version__ = "0.1.0"

__all__ = [
    "BitCode",
    "BlobConfig",
    "Dataset",
    "DenseLayerSpec",
    "FixedPointFormat",
    "GridGeometry",
    "LayerFormats",
    "ModelSpec",
    "NoiseSpec",
    "QuantizedModel",
    "TrainConfig",
    "add_noise",
    "benchmark_spec",
    "bit_value_delta",
    "decode",
    "emd_1d",
    "emd_exact",
    "encode",
    "flip_bit",
    "gen_synthetic",
    "linear_cka",
    "load_csv",
    "neural_efficiency",
    "quantize",
]
