"""Topology and line-impedance identification for radial distribution feeders from smart-meter data."""

from .errors import GridTwinError
from .fixtures import LOAD_SCALE, load_builtin, synthetic_loads
from .impedance import BranchEstimate, BranchInput, SweepResult, solve_branch, solve_branch_lad, solve_branch_ls, sweep
from .metrics import EvaluationReport, compare_topology, evaluate, relative_errors
from .network import ConductorLibrary, RadialNetwork, TreeTopology, build_network, network_from_parents
from .powerflow import NoiseSpec, SampleSet, corrupt_voltages, generate_samples, solve_exact, solve_linearized
from .topology import fit_laplacian, fit_laplacian_full, orient_tree, recover_topology, verify_prop3

__version__ = "0.1.0"
