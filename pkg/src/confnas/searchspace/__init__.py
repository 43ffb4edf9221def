from .discrete import DiscreteNetwork, build_discrete_model, count_parameters
from .genotype import Genotype, GenotypeEdge, GenotypeError, discretize, edge_endpoints
from .operations import OPSET_KINDS, OperationSet, OpSpec, make_op, make_operation_set
from .supernet import (VARIANTS, ForwardContext, MixedEdge, Supernet, SupernetVariant, build_supernet,
                       cell_edge_count, cell_layout, get_variant, mixed_edge_forward)
