"""Exact mixed-integer encodings of ReLU surrogates for feedback-linearization
input constraints, with CLF-CBF and MPC controllers and closed-loop simulation."""

from .controllers import (ClfCbfController, ClfCbfSpec, MpcController, MpcSpec,
                          ball_cbf, quad_clf)
from .dynamics import (BrunovskyModel, MsdPlant, QuadPlant, discretize,
                       integrate_zoh, integrator_chain, rk4_step, stribeck)
from .encoder import (EncodedCopy, HorizonSystem, MiConstraintSystem, NodeBounds,
                      encode, fbbt, replicate_over_horizon)
from .errbound import (ErrorBoundReport, PsoConfig, ValidationResult,
                       estimate_epsilon, validate_epsilon)
from .errors import (ConfigurationError, DataError, DimensionError, DomainError,
                     FlmipError, GeometryError, NetworkFormatError,
                     SingularityError, SolverError, TooManyBinariesError)
from .harness import (PipelineError, Scenario, TrajectoryLog, emit_csv,
                      emit_report, pipeline, simulate, smoothed_square_ref,
                      square_wave_ref)
from .lp_io import export_lp, parse_lp
from .misolver import (LinearObjective, MiProblem, MiSolution, QuadraticObjective,
                       brute_force_mi, solve_mi, solve_relaxation)
from .relu_net import (FitResult, ReluNetwork, TrainConfig, TrainingGrid,
                       fit_regression, load_network, save_network)

__version__ = "0.1.0"
