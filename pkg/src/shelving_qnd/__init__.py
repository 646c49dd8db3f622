"""Simulation of shelving-style QND phonon-number measurement in two-mode optomechanics."""
from .fock import (DensityMatrix, HilbertSpace, Operator, annihilator, fock_state, identity,
                   make_space, n_tot_op, number_op)
from .model import (LabFrame, Liouvillian, RampSchedule, SystemParams, build_dissipators, build_h_eff,
                    build_liouvillian, build_time_dependent, n_tot_sector, validate_rwa)
from .propagate import Trajectory, evolve, expectation, steady_state, two_time_corr

__version__ = "0.1.0"
