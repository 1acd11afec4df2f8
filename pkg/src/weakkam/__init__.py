"""Weak KAM solutions, critical values and Mather's alpha function on flat tori."""

from .expr import ExpressionError, PotentialExpr, parse_potential
from .grid import GridFunction, MollifierKernel, PeriodicGrid, mollifier_kernel, mollify
from .hamiltonian import (
    Hamiltonian,
    Lagrangian,
    Mechanical,
    Shifted,
    Tabulated,
    TonelliConstants,
    estimate_constants,
    eval_H,
    lagrangian,
    legendre_point,
    mechanical,
    shifted,
)
from .lax_oleinik import (
    LaxOleinikConfig,
    WeakKamSolution,
    evolve,
    lo_step,
    solve_equivariant,
    solve_invariant,
    solve_weak_kam,
)
from .flows import PhasePoint, Trajectory, integrate, minimize_action, momentum_bound_check
from .mather import AlphaTable, alpha_oracle_1d, alpha_sweep, convexity_check, strict_critical, superlinearity_check
from .verify import (
    VerificationReport,
    check_calibration,
    check_domination,
    check_evolution,
    check_subsolution,
    clarke_hull_check,
    smooth_subsolution,
)

__version__ = "0.1.0"
