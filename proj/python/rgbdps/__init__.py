"""Depth refinement and albedo recovery from posed RGB-D key frames.

Dictionaries cross the boundary as JSON; images come back as float64 arrays
indexed [row, column(, channel)].
"""

import json
import os

import numpy as np

from . import _rgbdps
from ._rgbdps import (
    METRICS_SCHEMA_VERSION,
    NumericalError,
    StageError,
    ValidationError,
    max_threads,
    parse_frame_range,
    read_pfm,
    set_max_threads,
    write_pfm,
)

__all__ = [
    "METRICS_SCHEMA_VERSION",
    "NumericalError",
    "StageError",
    "ValidationError",
    "check_config",
    "default_config",
    "default_scene",
    "max_threads",
    "parse_frame_range",
    "read_pfm",
    "rotate_lighting",
    "run_pipeline",
    "set_max_threads",
    "shade",
    "synthesize",
    "write_pfm",
]


def default_config():
    return json.loads(_rgbdps.default_config())


def check_config(config):
    """Fills in defaults; raises ValidationError on unknown keys or bad values."""
    return json.loads(_rgbdps.check_config(json.dumps(config)))


def default_scene():
    return json.loads(_rgbdps.default_scene())


def shade(lighting, normals):
    """RGB shading of unit normals shaped (..., 3)."""
    return _rgbdps.shade(json.dumps(lighting), np.asarray(normals, dtype=np.float64))


def rotate_lighting(lighting, R):
    return json.loads(_rgbdps.rotate_lighting(json.dumps(lighting), np.asarray(R, dtype=np.float64)))


def synthesize(out, **options):
    """Writes a synthetic dataset; options: scene, frames, corrupt_frames,
    sp_density, perturb_pixels, smooth_depth, downsample, seed. Returns the manifest."""
    return json.loads(_rgbdps.synthesize(os.fspath(out), json.dumps(options)))


def run_pipeline(dataset, out, config=None, frames="all"):
    """Runs every stage and returns the metrics written to out/metrics.json."""
    return json.loads(
        _rgbdps.run_pipeline(os.fspath(dataset), os.fspath(out), json.dumps(config or {}), frames)
    )
