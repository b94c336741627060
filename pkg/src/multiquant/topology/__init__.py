from .audit import CostRow, StorageReport, compute_cost, storage_report
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    ArchSpec,
    Branch,
    MultiQuantModel,
    QConvBlock,
    SwitchableModel,
    build_model,
    forward_composed,
    half_channels,
    set_bitwidth,
)
from .plan import HALF, BranchPlan, SelectionMap, build_branch_plan, build_selection_map, validate_selection

__all__ = [
    "ArchSpec",
    "Branch",
    "BranchPlan",
    "CheckpointError",
    "CostRow",
    "HALF",
    "MultiQuantModel",
    "QConvBlock",
    "SelectionMap",
    "StorageReport",
    "SwitchableModel",
    "build_branch_plan",
    "build_model",
    "build_selection_map",
    "compute_cost",
    "forward_composed",
    "half_channels",
    "load_checkpoint",
    "save_checkpoint",
    "set_bitwidth",
    "storage_report",
    "validate_selection",
]
