"""Random-feature kernel maps and linearized attention.

Weight matrices (``weight_matrices``) are composed with component functions
(``component_functions``) into feature maps whose inner products estimate the
RBF or softmax kernel; ``attention`` turns them into linear-time attention and
checks it against the exact quadratic oracle.
"""

from rfattn.attention import (
    AttentionBatch,
    AttentionOutput,
    attention_error,
    exact_softmax_attention,
    feature_attention,
    kernel_estimator_attention,
    linearized_attention,
)
from rfattn.component_functions import (
    ComponentFunctionSpec,
    FeatureMap,
    Kind,
    Role,
    apply_feature_map,
    build_feature_map,
    rbf_kernel,
    softmax_kernel,
)
from rfattn.numerics import RngStream
from rfattn.weight_matrices import Family, WeightMatrix, WeightMatrixSpec, build_weight_matrix

__version__ = "0.1.0"
