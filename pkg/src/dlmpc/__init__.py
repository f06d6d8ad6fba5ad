"""Distributed and localized MPC via system-level responses.

Per-subsystem ADMM solvers compute globally optimal closed-loop MPC policies
while exchanging only d-hop-local state and model information, verified
against a centralized oracle.
"""

from .admm import AdmmParams, AdmmResult, ConvergenceError, Harness
from .admm import solve as solve_admm
from .agents import (AccessLog, AuditReport, ChannelTopology, Message,
                     ProtocolError, SequentialScheduler, ThreadScheduler,
                     audit, build_channels, exchange, new_access_logs)
from .consensus import (ConsensusParams, consensus_x_update, consensus_y_update,
                        consensus_z_update, solve_coupled)
from .costs import (ConstraintTemplate, CostTerm, QuadraticCost,
                    constraint_violation)
from .kernels import (ColumnProjector, KernelError, Polytope, QpSettings,
                      project_affine, pseudo_inverse, solve_eq_qp, solve_qp)
from .mpc import (CentralizedController, DistributedController, MpcProblem,
                  RunRecord, closed_loop_cost, receding_horizon,
                  solve_centralized)
from .problems import (ProblemGeometry, build_coupled_problems, build_geometry,
                       build_local_problems)
from .sls import (HorizonSpec, LocalityMask, ResponseColumn,
                  assemble_achievability, build_locality_mask, build_partitions,
                  check_localizability, realize_controller,
                  reconstruct_trajectory, solve_column_responses)
from .systems import (InterconnectionGraph, ModelError, SubsystemPartition,
                      SystemModel, build_benchmark_chain,
                      build_interconnection_graph, build_pendulum_chain,
                      d_incoming, d_outgoing, load_model, save_model)

__version__ = "0.1.0"
