"""Multi-output Gaussian process regression over graph vertices."""
from .errors import GraphMogpError, InputError, NumericalError
from .graph import Graph, induced_subgraph, knn_graph, laplacian, random_k_regular
from .kernels import (
    DataKernelSpec,
    GraphKernelSpec,
    GraphPCKernel,
    SeparableKernel,
    SOGPKernel,
    SoSKernel,
    count_hyperparameters,
    graph_kernel_matrix,
    kernel_from_dict,
    mogp_gram,
)
from .model import MultiDataset, NoiseModel, TestQuery, log_marginal_likelihood, predict
from .training import OptimizerConfig, fit

__all__ = [
    "DataKernelSpec",
    "Graph",
    "GraphKernelSpec",
    "GraphMogpError",
    "GraphPCKernel",
    "InputError",
    "MultiDataset",
    "NoiseModel",
    "NumericalError",
    "OptimizerConfig",
    "SOGPKernel",
    "SeparableKernel",
    "SoSKernel",
    "TestQuery",
    "count_hyperparameters",
    "fit",
    "graph_kernel_matrix",
    "induced_subgraph",
    "kernel_from_dict",
    "knn_graph",
    "laplacian",
    "log_marginal_likelihood",
    "mogp_gram",
    "predict",
    "random_k_regular",
]
