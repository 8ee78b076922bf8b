"""Self-supervised BEV LiDAR place recognition and global localization."""
from sbevloc.bev import BevConfig, BevImage, project
from sbevloc.dataset_io import PointCloud, PoseSE2, Trajectory
from sbevloc.fast import FastConfig, Keypoint, detect
from sbevloc.kernels import BACKEND, available_backends, use_backend
from sbevloc.localization import LocalizationDatabase, build_database, localize, retrieve
from sbevloc.model import ModelConfig, ModelParams, describe, init_params

__version__ = "0.1.0"
