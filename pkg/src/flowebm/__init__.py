"""Energy-based models defined as exponential tilts of normalizing flows.

The flow supplies a tractable base density and a latent parameterisation;
the tilted density is sampled by HMC in the flow's latent space.
"""

from .autodiff import Adam, Tape, Tensor, backward, value_and_grad
from .config import ConfigError, RunConfig
from .datasets import SyntheticTarget, load_idx, make_target
from .diagnostics import ChainEnsemble, autocorrelation, gelman_rubin, grid_kl, mode_coverage
from .energy import MLPEnergy, PolynomialEnergy, TiltedModel
from .flow import FlowModel, train_flow_mle
from .io import dump_chains, load_chains, load_checkpoint, save_checkpoint
from .samplers import HmcConfig, hmc_step, leapfrog, magnetized_path, run_chains, run_langevin
from .trainers import nce_train, nt_ebm_train

__version__ = "0.1.0"
