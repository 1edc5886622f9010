"""3D convolutional networks on voxel grids, built on numpy: layers and
gradients, training, mesh voxelisation, datasets, relevance maps,
activation maximisation and autoencoder transfer."""

from .archive import load_model, save_model
from .architectures import parse_architecture, reference_architecture
from .cae import AutoencoderSpec, TransferPlan, build_cae, fine_tune, train_cae, transfer_encoder
from .datasets import AugmentSpec, Dataset, SynthConfig, augment_plan, synth_shapes
from .explain import (
    ActMaxConfig,
    LrpRule,
    activation_maximization,
    conservation_check,
    feature_maps,
    lrp,
)
from .netgraph import LayerSpec, NetworkModel, backward, build_model, forward
from .tensorcore import ConvSpec, PoolSpec, deterministic_mode
from .training import TrainingConfig, evaluate, train
from .voxmesh import VoxelGrid, load_mesh, read_binvox, voxelize, write_binvox

__version__ = "0.1.0"
