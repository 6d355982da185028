"""bncnn: desk-scale CPU training for batch-normalized convolutional nets.

Subpackages:
    tensor      dense array kernels (matmul, im2col, moments, top-k)
    netdef      the .ndef network-definition language
    transform   batch-norm insertion rewrite pass and net generators
    layers      layer forward/backward math and whole-net execution
    gradcheck   finite-difference verification of every backward
    solver      SGD loop, linear lr decay, snapshots, divergence restart
    data        datasets, resize/crop pipeline, synthetic generator
    evaluation  top-k error, single-crop validation, curve export
    cli         the ``bncnn`` command-line entry point
"""

from .netdef import NetDef, LayerSpec, Shape4, parse, serialize, infer_shapes
from .transform import insert_batchnorm, generate_plain, generate_resnet
from .solver import SolverConfig, train, lr_at
from .evaluation import EvalResult, evaluate, topk_error, reference_numbers

__version__ = "0.1.0"

__all__ = [
    "NetDef", "LayerSpec", "Shape4", "parse", "serialize", "infer_shapes",
    "insert_batchnorm", "generate_plain", "generate_resnet",
    "SolverConfig", "train", "lr_at",
    "EvalResult", "evaluate", "topk_error", "reference_numbers",
    "__version__",
]
