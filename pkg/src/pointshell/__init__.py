"""Point-cloud deep learning with concentric-shell neighborhood statistics.

Self-contained: geometry kernels (compiled extension with a pure-Python
twin), a reverse-mode autodiff core over numpy arrays, the shell
convolution operator, classification and segmentation networks, a training
harness, and binary formats for clouds and checkpoints.
"""

from .geometry import (
    BACKEND,
    NeighborSet,
    PointCloud,
    ShellPartition,
    knn_query,
    partition_shells_equidistant,
    partition_shells_fixed,
    sample_representatives,
)
from .autodiff import Tensor, no_grad
from .shellconv import ShellConvParams, init_shell_conv, shell_conv, shell_conv_layer
from .network import (
    Network,
    NetworkConfig,
    build,
    build_classifier,
    build_segmenter,
    count_flops,
    count_parameters,
    forward,
)
from .training import (
    AdamState,
    EvalMetrics,
    TrainConfig,
    adam_step,
    augment_jitter,
    evaluate,
    train,
)
from .data import (
    Dataset,
    generate_parts,
    generate_shapes,
    load_checkpoint,
    load_dataset,
    read_cloud,
    save_checkpoint,
    save_dataset,
    write_cloud,
)

__version__ = "0.1.0"
