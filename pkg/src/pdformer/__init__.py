"""Propagation-delay-aware spatial-temporal transformer for traffic flow forecasting."""

from .data import Scaler, TrafficTensor, generate_synthetic, make_samples, split
from .graph import RoadNetwork, build_from_edge_list, grid_to_graph, hop_distances, geographic_mask, laplacian_embedding_basis
from .model import ModelConfig, PDFormer
from .patterns import PatternSet, dtw_distance, kshape_cluster, semantic_mask
from .training import TrainConfig, train

__version__ = "0.1.0"
