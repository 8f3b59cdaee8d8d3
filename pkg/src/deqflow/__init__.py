"""Deep equilibrium models trained by gradient flow on the implicit layer,
with neural tangent kernel diagnostics and kernel-machine generalization bounds."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataFormatError,
    NonContractive,
    NumericFailure,
    SingularKernel,
)
from .model import (  # noqa: E402
    DataBatch,
    EquilibriumBatch,
    ModelParams,
    closed_form_equilibrium_nonneg,
    features,
    forward,
    init_params,
    predict,
    solve_equilibrium,
    spectral_norm_estimate,
)
from .implicit import (  # noqa: E402
    activation_pattern,
    dZ_dA_action,
    dense_kronecker_reference,
    feature_map,
    loss_grad_A,
    ntk_factors,
)
from .ntk import (  # noqa: E402
    GramSnapshot,
    gram,
    gram_drift,
    halfnormal_min_eig_bound,
    kernel_cross,
    limiting_ntk_mc,
    relu_expectation_kernel,
)
from .flow import FlowTrace, du_dt_consistency, flow_step, train  # noqa: E402
from .kernel_machine import (  # noqa: E402
    GenBoundReport,
    build_frozen_model,
    coupling_gap_train,
    evaluate_test,
    f_hat,
    gen_bound,
    gen_bound_ntk_inf,
    u_hat,
)
from .data import DatasetOnDisk, load_mnist_pair, make_synthetic, read_idx, write_idx  # noqa: E402
