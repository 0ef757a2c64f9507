"""pathfuse: assemble homogeneous Conv-BN source models into a multi-pathway
network, adapt it to an unlabeled target domain without source data, and
reparameterize the pathways into a single convolution per unit for inference.
"""

from . import adapt, bench, ckpt, data, multipath, nn, precision, tensor
from .multipath import (FusedConv, MultiPathUnit, UncertaintyReport, assemble,
                        fuse_model, fuse_unit, merge_forward, model_uncertainty,
                        predict, softmax_weights)
from .nn import ArchSpec, ConvBNPathway, ModelBundle, init_model, train_source
from .precision import set_precision, use_precision
from .tensor import Tensor, conv2d, grad_check

__version__ = "0.1.0"
