"""Sparse voxel tensors, reverse-mode autograd, and sparse 3D convolutions."""
from ._backend import available_backends, backend_name, set_threads, use_backend
from .autograd import Parameter, Tensor, no_grad
from .conv import ConvLayerSpec, sparse_conv
from .gradcheck import gradient_check
from .layers import BatchNorm, ConvBNReLU, Module, SparseConv, batch_norm
from .optim import Adam
from .tensor import SparseVoxelTensor

__all__ = [
    "Adam",
    "BatchNorm",
    "ConvBNReLU",
    "ConvLayerSpec",
    "Module",
    "Parameter",
    "SparseConv",
    "SparseVoxelTensor",
    "Tensor",
    "available_backends",
    "backend_name",
    "batch_norm",
    "gradient_check",
    "no_grad",
    "set_threads",
    "sparse_conv",
    "use_backend",
]
