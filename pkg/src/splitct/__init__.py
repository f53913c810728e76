"""Multispectral tomography with multi-partition self-supervised learning.

Library layout:

  core       tensor container types, binary tensor file format, seeded RNG streams
  phantom    randomized three-material phantoms and dataset generation
  radon      sparse-matrix line projector with an exact adjoint
  spectral   energy-bin forward model, its Jacobian, material preconditioner
  noise      photon-counting and Gaussian measurement noise
  solver     preconditioned log-domain iterative reconstruction
  partition  angular/detector parity splits of the measurement index set
  model      small encoder-decoder network with hand-written gradients, Adam
  training   X-space and measurement-splitting training methods, inference
  metrics    PSNR / SSIM and evaluation tables
  verify     Monte Carlo checks of the splitting expectation identities
  cli        command-line pipeline
"""

from .core import (
    ContractViolation,
    MaterialImage,
    RngStream,
    SpectralSinogram,
    TensorFormatError,
    read_tensor,
    write_tensor,
)
from .metrics import evaluate, psnr, ssim
from .model import NetConfig, init_params, net_backward, net_forward
from .noise import NoiseConfig, apply_noise
from .partition import make_double_split, make_single_split, scheme_for_method
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .radon import Geometry, backproject, make_geometry, project, system_matrix
from .solver import SolverConfig, cp_fast, partial_reconstruction
from .spectral import SpectralModel, build_default_model, forward, phi
from .training import MethodConfig, infer, train
from .verify import verify_prop_noise2self, verify_theorem1

__version__ = "0.1.0"
