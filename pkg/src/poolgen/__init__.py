"""Generalized pooling operators for CNNs, with a small numpy training stack.

Pooling variants: max, average, stochastic, a fixed 50/50 max-average mix,
learned mixed max-average, gated max-average and tree pooling.  Every
operator has a hand-written backward pass checked against finite differences
and a per-region reference implementation.
"""

from .checkpoint import CheckpointError, CheckpointVersionError, CorruptCheckpointError
from .data import (Dataset, DatasetError, TransformSpec, apply_transform, standard_sweep_grid,
                   invariance_sweep, load_cifar10_bin, load_mnist_idx, synthesize_shapes)
from .gradcheck import GradCheckReport, OperatorSpec, brute_force_pool, check_operator, fd_gradient
from .nn import SGD, LRSchedule, Network, default_architecture, lr_schedule_step, sgd_step
from .pooling import (GatedParams, Granularity, MixedParams, TreeParams, avg_pool_backward,
                      avg_pool_forward, gated_pool_backward, gated_pool_forward,
                      max_pool_backward, max_pool_forward, mixed_pool_backward,
                      mixed_pool_forward, stochastic_pool_backward, stochastic_pool_forward,
                      tree_pool_backward, tree_pool_forward)
from .tensor import PoolGeometry, extract_regions, gaussian_init, matmul, region_iter, zeros

__version__ = "0.1.0"
