"""hypolab - 退化椭圆算子的数值实验室

在网格上离散散度型、可能退化的二阶算子，求解Dirichlet问题，计算Green核与Poisson核，
测量Harnack常数，并检验弱/强极大值原理与Hopf引理。
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .dirichlet_solver import Field, factorize, solve
from .discretize import StencilSystem, assemble
from .domain_grid import DomainMask, Grid, ball_domain, box_domain, build_grid, lens_domain
from .errors import ConfigError, HypolabError, NumericalError
from .experiments import Command, ExperimentEngine
from .green_kernel import GreenMatrix, green_matrix
from .harnack_lab import PoissonKernel, harnack_report, poisson_kernel
from .operator_core import OperatorSpec, from_expressions, gallery

__all__ = [
    "__version__",
    "Command",
    "ConfigError",
    "DomainMask",
    "ExperimentConfig",
    "ExperimentEngine",
    "Field",
    "GreenMatrix",
    "Grid",
    "HypolabError",
    "NumericalError",
    "OperatorSpec",
    "PoissonKernel",
    "StencilSystem",
    "assemble",
    "ball_domain",
    "box_domain",
    "build_grid",
    "factorize",
    "from_expressions",
    "gallery",
    "green_matrix",
    "harnack_report",
    "lens_domain",
    "load_config",
    "poisson_kernel",
    "solve",
]
