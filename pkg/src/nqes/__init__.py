"""Low-lying excited states of spin Hamiltonians from determinants of RBM wavefunctions."""

from .ensemble import SlaterState, build, local_energy_matrix
from .orchestrator import ExperimentConfig, run_experiment
from .postprocess import SpectralReport, diagonalize_energy_matrix
from .rbm import Rbm, RbmParams, init_params
from .sampler import SampleBatch, SamplerConfig, run_chains
from .spins import Hamiltonian, SpinConfig, build_model
from .sr import SrConfig

__all__ = [
    "ExperimentConfig", "Hamiltonian", "Rbm", "RbmParams", "SampleBatch", "SamplerConfig",
    "SlaterState", "SpectralReport", "SpinConfig", "SrConfig", "build", "build_model",
    "diagonalize_energy_matrix", "init_params", "local_energy_matrix", "run_chains", "run_experiment",
]
