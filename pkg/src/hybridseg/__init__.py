"""Hybrid grouped-attention / selective-scan segmentation network at desk scale."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, grad_check  # noqa: F401
from .pointcloud import PointCloud, SparseVoxelSet, voxelize  # noqa: F401
from .serialization import SerializedOrder, partition, restore, serialize  # noqa: F401
from .network import NetworkConfig, build_plan, forward, forward_on_plan, init_network_params  # noqa: F401
from .training import TrainHyper, evaluate, miou, train  # noqa: F401
from .datagen import SceneSpec, generate_scene  # noqa: F401
from .config import RunConfig, load_run_config, resolve_config  # noqa: F401
