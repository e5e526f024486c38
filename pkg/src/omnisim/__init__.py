"""Desk-scale study of the hardware/statistical efficiency tradeoff in
asynchronous distributed SGD.

Subsystems:

* :mod:`omnisim.tensors`   -- convolution by lowering/GEMM/lifting, with a
  direct sliding-window oracle.
* :mod:`omnisim.sgd`       -- momentum SGD with stale gradients and the
  synchronous training loop.
* :mod:`omnisim.problems`  -- noisy quadratic, logistic, and tiny-CNN
  training problems.
* :mod:`omnisim.cluster`   -- analytic per-iteration time model for compute
  groups sharing a serial FC server.
* :mod:`omnisim.simulator` -- discrete-event simulator of asynchronous
  groups; measures iteration time, staleness, and implicit momentum.
* :mod:`omnisim.autotune`  -- asynchrony-aware hyperparameter optimizer
  (cold start, per-epoch grid search, group halving).
* :mod:`omnisim.cli`       -- experiment commands emitting CSV artifacts.
"""

from .cluster import (
    ClusterSpec,
    ExecutionPlan,
    GroupChoice,
    PhaseProfile,
    fc_saturated,
    flops_split,
    he_penalty,
    he_predict,
    he_predict_pipelined,
    min_saturating_groups,
    power_of_two_divisors,
    profile_from_cluster,
    t_conv,
)
from .problems import (
    LogisticProblem,
    QuadraticProblem,
    TinyCNNProblem,
    make_logistic,
    make_quadratic,
    make_tiny_cnn,
)
from .sgd import (
    Hyperparams,
    LossTrace,
    SGDState,
    StopRule,
    TrainingProblem,
    iterations_to_loss,
    run_sync,
    sgd_step,
    smoothed,
    stale_step,
)
from .simulator import (
    SECurveRow,
    SimConfig,
    SimEvent,
    SimTrace,
    StalenessStats,
    estimate_implicit_momentum,
    measured_he,
    se_curve,
    simulate,
    staleness_stats,
)
from .tensors import (
    ConvSpec,
    LoweredMatrix,
    Tensor4,
    blowup_ratio,
    conv_direct,
    conv_lowered,
    gemm,
    lift,
    lower,
    lower_kernel,
)

__version__ = "0.1.0"
