"""Sparse-augmented tensor-train compression of weight matrices."""

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    InfeasibleFactorizationError,
    ParameterError,
    SatenError,
    ShapeError,
)
from .layer import (
    CostReport,
    LayerGradients,
    SatenLayer,
    SvdFactors,
    backward,
    compress,
    cost_report,
    forward,
    sgd_step,
    svd_baseline_compress,
)
from .shape_opt import FoldPlan, balanced_factorization, exact_storage_optimum, plan_fold
from .sparsity import (
    SparseResidual,
    TokenFrequencyTable,
    count_token_frequencies,
    mask_rows,
    mask_two_four,
    mask_unstructured,
    sparse_matvec_t,
    sparse_param_count,
)
from .tensor_core import MulCounter, contract, fold, frobenius_norm
from .tt import (
    TTRepresentation,
    reconstruct,
    tt_mac_count,
    tt_matvec,
    tt_param_count,
    tt_svd,
)

__version__ = "0.1.0"
