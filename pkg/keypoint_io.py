"""
Keypoint files: one JSON document holding a header (schema version,
canonical joint names, image size) and one record per frame mapping joint
name -> [x, y, confidence].
"""
import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError, SchemaVersionError
from pose_calibration import CANONICAL_JOINTS, Joint, Skeleton2D

KEYPOINT_SCHEMA_VERSION = 1


class KeypointFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    joint_names: List[str]
    image_size: Tuple[int, int] = Field(description="(height, width) in pixels")
    frames: List[Dict[str, Tuple[float, float, float]]]

    @field_validator("frames")
    @classmethod
    def _known_joints(cls, frames, info):
        names = set(info.data.get("joint_names", []))
        for i, frame in enumerate(frames):
            unknown = set(frame) - names
            if unknown:
                raise ValueError(f"frame {i} has joints outside the header: {sorted(unknown)}")
        return frames


def skeleton_to_record(skel: Skeleton2D) -> Dict[str, Tuple[float, float, float]]:
    return {name: (j.x, j.y, j.confidence) for name, j in skel.joints.items()}


def record_to_skeleton(record: Dict[str, Sequence[float]]) -> Skeleton2D:
    return Skeleton2D({name: Joint(float(v[0]), float(v[1]), float(v[2])) for name, v in record.items()})


def write_keypoints(
    path: Path,
    frames: Sequence[Skeleton2D],
    image_size: Tuple[int, int],
    joint_names: Sequence[str] = CANONICAL_JOINTS,
) -> Path:
    """Write a keypoint file for a sequence of skeletons."""
    doc = KeypointFile(
        schema_version=KEYPOINT_SCHEMA_VERSION,
        joint_names=list(joint_names),
        image_size=tuple(image_size),
        frames=[skeleton_to_record(s) for s in frames],
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc.model_dump(mode="json"), f, indent=1)
    return path


def read_keypoints(path: Path) -> Tuple[List[Skeleton2D], Tuple[int, int]]:
    """
    Read a keypoint file.

    Returns:
        Tuple of (one skeleton per frame, (height, width)).

    Raises:
        SchemaVersionError: On an unknown schema version.
        ConfigError: On a malformed file.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read keypoint file {path}: {e}") from e
    version = raw.get("schema_version") if isinstance(raw, dict) else None
    if version != KEYPOINT_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: unsupported keypoint schema version {version!r} "
            f"(expected {KEYPOINT_SCHEMA_VERSION})"
        )
    try:
        doc = KeypointFile.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Malformed keypoint file {path}: {e}") from e
    return [record_to_skeleton(r) for r in doc.frames], tuple(doc.image_size)


def sequence_to_array(frames: Sequence[Skeleton2D], names: Sequence[str]) -> np.ndarray:
    """[frames, len(names), 2] coordinate array for metric computation."""
    return np.stack([s.to_array(names)[:, :2] for s in frames])
