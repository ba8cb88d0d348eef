"""Attention-condenser network toolkit.

Numpy-only building blocks (visual attention condenser, PEPE module), an
architecture DSL with a compiler, desk-scale SGD training, symmetric 8-bit
weight quantization, exact complexity accounting, and a constrained
design-search harness.
"""

from .kernels import ConvSpec
from .netbuilder import (Network, NetworkSpec, compile_spec, load, parse_dsl,
                         reference_spec, save)
from .pepe import PepeConfig
from .vac import VacConfig

__all__ = [
    "ConvSpec", "VacConfig", "PepeConfig", "NetworkSpec", "Network",
    "parse_dsl", "compile_spec", "save", "load", "reference_spec",
]

__version__ = "0.1.0"
