"""Fully convolutional mesh autoencoder with variant-coefficient convolutions."""

from .mesh import (
    MeshDataset, MeshTopology, VertexFeatures, bridge_components, build_topology_from_cells,
    connected_components, k_ring, load_cells, load_mesh, load_obj, write_obj,
)
from .sampling import (
    SamplingHierarchy, SamplingMap, build_coarse_topology, build_down_map, build_hierarchy,
    build_up_map, receptive_field, select_vertices,
)
from .layers import LcConv, VcConv, VcTransConv, VdPool, VdRes, VdUnpool, param_count
from .model import (
    AutoencoderModel, LatentCode, TrainConfig, Trainer, build_autoencoder, interpolate_latent,
    loss_l1, loss_laplacian, mix_latent, train,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .synthetic import make_synthetic

__version__ = "0.1.0"
