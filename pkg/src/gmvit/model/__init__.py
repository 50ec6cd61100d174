from .checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from .config import DEFAULT_WIDTHS, DESK_WIDTHS, VARIANTS, ModelConfig, micro_config, paper_preset, preset
from .gmvit import (STAGES, GMViT, GroupingResult, ModelOutputs, StageTimer, assign_groups, build_model,
                    centroids_of, param_count)

__all__ = [
    "STAGES", "CheckpointError", "DEFAULT_WIDTHS", "DESK_WIDTHS", "GMViT", "GroupingResult", "ModelConfig", "ModelOutputs",
    "StageTimer", "VARIANTS", "assign_groups", "build_model", "centroids_of", "load_checkpoint", "micro_config",
    "paper_preset", "param_count", "preset", "read_meta", "save_checkpoint",
]
