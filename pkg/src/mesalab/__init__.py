"""Numerical laboratory for one-layer linear causal self-attention on AR processes.

Sequences follow x_{t+1} = W x_t with W = diag(lambda), |lambda_i| = 1.  A
one-layer linear attention model is trained autoregressively on such
sequences, and every empirical quantity (losses, gradients, trained
parameter products) is cross-checked against its closed-form counterpart
(gradient-flow ODE, fixed-point products, one-step-GD equivalence).
"""

from mesalab.ar_data import (
    ARSequence,
    FixedOnes,
    Gaussian,
    Moments,
    SparseUniform,
    TransitionSpectrum,
    closed_form_moments,
    empirical_moments,
    generate_dataset,
    generate_sequence,
    generate_sequence_recurrence,
    load_dataset,
    sample_initial,
    sample_spectrum,
    save_dataset,
)
from mesalab.attention import (
    AttentionParams,
    DiagonalAB,
    EmbeddedPrompt,
    embed,
    mean_elementwise_ratio,
    mesa_predict,
    one_step_gd_ols,
    predict_next,
    quadratic_form_predict,
)
from mesalab.theory import (
    FlowCoefficients,
    FlowResult,
    FlowState,
    fixed_point_ab,
    fixed_point_ab_ones,
    flow_coefficients,
    gaussian_ratio_prediction,
    integrate_flow,
    ode_rhs,
    ones_gradient_probe,
    pl_check,
    surrogate_loss,
)
from mesalab.training import (
    Diagonal,
    GaussianInit,
    Gradient,
    TrainConfig,
    TrainTrajectory,
    batch_loss,
    init_params,
    loss_gradient,
    mask_nondiagonal,
    sequence_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
