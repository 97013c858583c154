"""Multiscale simulator for pressure- and osmosis-driven water flow and
solute transport in periodic plant tissue.

The package is organized along the pipeline:

* `geometry`          unit cells, channels, meshes, tags
* `membrane_kinetics` interface flux laws and carrier dynamics
* `cell_problems`     periodic corrector problems on the unit cell
* `effective_tensors` homogenized permeability / diffusion / convection data
* `macro_solver`      Darcy + transport + transporter time loop
* `micro_reference`   resolved epsilon-scale runs and the convergence study
* `cli_io`            configs, CSV/VTK export, command line entry point
"""

from .errors import (
    CompatibilityError,
    ConfigError,
    DomainError,
    GeometryError,
    MeshError,
    ParameterError,
    SchemeError,
    SolveError,
    StateError,
    StepError,
    TissueflowError,
    ValidationError,
)

__version__ = "0.1.0"
