from .dataset import (CorruptDatasetError, Dataset, DatasetConfig, MultiViewSample, SplitData,
                      build_dataset, load_dataset)
from .render import render_view, render_views
from .rigs import DEFAULT_GROUPS, RIG_SIZES, CameraRig, make_rig
from .shapes import CLASS_NAMES, ShapeInstance, sample_shape

__all__ = [
    "CLASS_NAMES", "DEFAULT_GROUPS", "RIG_SIZES", "CameraRig", "CorruptDatasetError", "Dataset",
    "DatasetConfig", "MultiViewSample", "ShapeInstance", "SplitData", "build_dataset",
    "load_dataset", "make_rig", "render_view", "render_views", "sample_shape",
]
