"""Linear-time phylogenetic likelihood gradients on a block-tiled backend."""

from .alignment import PatternizedAlignment, RawAlignment, compress_patterns, parse_fasta
from .backend import Backend, BackendConfig, ExecutionPlan
from .core import (GradientReport, LikelihoodEngine, compute_log_likelihood,
                   finite_difference_gradient, full_gradient, oracle_gradient_quadratic)
from .errors import (ConfigurationError, ImpossiblePatternError, ParameterDomainError,
                     ParseError, PhylogradError, SequencingError, ValidationError)
from .model import (CodonModelParams, RateCategories, SubstitutionModel, build_codon_m0,
                    build_gtr, discrete_gamma, jukes_cantor)
from .tree import Phylogeny, parse_newick, random_tree

__version__ = "0.1.0"
