"""Procedural scene generation, augmentation, dataset storage and lab ingestion."""

from .augment import AugmentConfig, AugmentError, augment, block_dct_quantize, sample_augment
from .dataset import (
    ChecksumError,
    DatasetError,
    DatasetManifest,
    FrameSet,
    assign_split,
    load_dataset,
    plan_manifest,
    render_sequences,
    write_dataset,
)
from .mocap import MatchResult, MocapError, MocapRecord, match_mocap, read_mocap_export
from .render import Box, Cylinder, Frame, RenderError, SatelliteModel, default_satellite, render_frame, render_labels
from .trajectory import (
    PoseLabel,
    TrajectoryError,
    TrajectorySpec,
    detection_specs,
    expand_trajectory,
    table1_specs,
)
