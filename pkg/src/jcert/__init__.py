"""jcert: certification of joint adversarial robustness for small ReLU-network ensembles.

The package splits into:

* ``netcore``  -- network data model, evaluation, serialization, merging
* ``bounds``   -- fast sound certification (interval + dual backward bounds)
* ``ensemble`` -- composition rules and joint certification
* ``simplex``  -- dense LP solver used by the complete verifier
* ``oracle``   -- exact branch-and-bound verification of tiny networks
* ``training`` -- cost-sensitive robust training of diverse models
* ``dataio``   -- dataset ingestion and report/CSV emission
* ``cli``      -- the ``jcert`` command-line front end
"""

from .netcore import (
    Affine,
    Conv2D,
    ReLU,
    Network,
    conv_to_linear,
    forward,
    linearize,
    load_model,
    merge_average,
    networks_equal,
    predict,
    save_model,
)
from .bounds import (
    ActivationBounds,
    MarginCertificate,
    PerturbationSpec,
    certify_single,
    dual_margin_bound,
    interval_bounds,
)
from .ensemble import (
    Decision,
    EnsembleSpec,
    JointCertificate,
    certify_averaging,
    certify_majority_independent,
    certify_unanimity_independent,
    certify_unanimity_via_averaging,
    decide,
    evaluate,
)
from .oracle import (
    OracleCapError,
    OracleResult,
    exact_majority_adversary,
    exact_margin_min,
    exact_unanimous_adversary,
    exact_verify,
    minimal_perturbation,
)
from .simplex import Infeasible, LinearProgram, LPResult, simplex_solve
from .training import (
    ClusteringResult,
    CostMatrix,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    adversarial_cluster,
    cost_matrix_presets,
    robust_loss,
    train,
)
from .dataio import (
    Dataset,
    SweepRow,
    emit_report,
    emit_sweep_csv,
    load_idx,
    save_idx,
    synthetic_blobs,
)

__version__ = "0.1.0"
