"""Diffeomorphic point-cloud registration with residual Euler flows.

A stack of L piecewise-affine velocity fields (one small dense network per
time step) is integrated with forward Euler and trained with ADAM so that the
flow carries a source cloud onto a target.
"""

__version__ = "0.1.0"

from .errors import (DegenerateInput, Divergence, EmptyCloud, InvalidConfig, IoError,
                     MissingCorrespondence, NonFiniteGradient, NonFiniteState,
                     NumericalUnderflow, ParseError)
from .geometry import (NormalizationRecord, PointCloud, RigidTransform, load_pointcloud,
                       normalize, rigid_icp, save_pointcloud)
from .network import (ActivationKind, BlockParams, NetParams, block_lipschitz_bound,
                      block_velocity, xavier_init)
from .flow import FlowResult, apply_flow, flow_forward, refine_steps
from .objective import LossConfig, LossReport, TransportPlan, chamfer, kinetic_energy, sinkhorn_emd, total_loss
from .gradients import NetGradient, finite_difference_gradient, loss_gradient
from .solver import (AdamState, RegistrationConfig, RegistrationOutcome, adam_step, geodesic_path,
                     path_energy, register)
from .diagnostics import (ActivationPattern, DiagnosticsReport, activation_pattern, diagnose,
                          inverse_consistency, jacobian_grid_check, polytope_census, tre)
