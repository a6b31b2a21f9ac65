"""
Motion metrics over keypoint trajectories.

HKV and HMV are the mean over keypoints of the population variance over
frames, summed over x and y. Both are pure functions of coordinate arrays.
"""
import math
from typing import Any, Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from pose_calibration import FACE_JOINTS, HAND_JOINTS, Skeleton2D

HEAD_JOINTS = ("nose", "neck") + FACE_JOINTS


def keypoint_variance(sequence: np.ndarray) -> float:
    """
    Mean over keypoints of var_t(x) + var_t(y).

    Args:
        sequence: [frames, keypoints, 2] coordinates.

    Raises:
        ValueError: On fewer than 2 frames, a wrong shape or non-finite values.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim == 2 and seq.shape[-1] == 2:
        seq = seq[:, None, :]
    if seq.ndim != 3 or seq.shape[-1] != 2:
        raise ValueError(f"expected [frames, keypoints, 2], got {seq.shape}")
    if seq.shape[0] < 2:
        raise ValueError("motion variance needs at least 2 frames")
    if seq.shape[1] == 0:
        raise ValueError("motion variance needs at least one keypoint")
    if not np.isfinite(seq).all():
        raise ValueError("keypoint sequence contains non-finite values")
    per_keypoint = seq.var(axis=0).sum(axis=-1)
    return float(per_keypoint.mean())


def hkv(sequence: np.ndarray) -> float:
    """Hand keypoint variance over a [frames, 42, 2] hand trajectory."""
    return keypoint_variance(sequence)


def hmv(sequence: np.ndarray) -> float:
    """Head motion variance over a [frames, K, 2] face/nose/neck trajectory."""
    return keypoint_variance(sequence)


def joint_sequence(skeletons: Sequence[Skeleton2D], names: Sequence[str]) -> np.ndarray:
    """[frames, K, 2] for the joints present in every frame."""
    present = [n for n in names if all(n in s for s in skeletons)]
    if not present:
        raise ValueError("no requested joint is present in every frame")
    return np.stack([s.points(present) for s in skeletons])


def hand_sequence(skeletons: Sequence[Skeleton2D]) -> np.ndarray:
    return joint_sequence(skeletons, HAND_JOINTS)


def head_sequence(skeletons: Sequence[Skeleton2D]) -> np.ndarray:
    return joint_sequence(skeletons, HEAD_JOINTS)


class MetricReport(BaseModel):
    """
    Metrics of one generation or evaluation run.

    Attributes:
        hkv: Hand keypoint variance of the driving (calibrated) hands.
        hmv: Head motion variance tracked in generated frames.
        script_hmv: Head motion variance of the scripted ground-truth head.
        reconstruction_mse: Held-out codebook reconstruction error.
        codebook_usage: Fraction of codebook entries used.
        codebook_perplexity: Perplexity of the codebook assignment distribution.
        metadata: Free-form run details (seed, variant, whether calibration ran, ...).
    """
    model_config = ConfigDict(extra="forbid")

    hkv: float = Field(default=0.0, ge=0.0)
    hmv: float = Field(default=0.0, ge=0.0)
    script_hmv: Optional[float] = Field(default=None, ge=0.0)
    reconstruction_mse: Optional[float] = Field(default=None, ge=0.0)
    codebook_usage: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    codebook_perplexity: Optional[float] = Field(default=None, ge=0.0)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @field_validator(
        "hkv", "hmv", "script_hmv", "reconstruction_mse", "codebook_usage", "codebook_perplexity"
    )
    @classmethod
    def _finite(cls, value):
        if value is not None and not math.isfinite(value):
            raise ValueError("metrics must be finite")
        return value

    def scalars(self) -> Dict[str, float]:
        """Numeric fields that are set, for CSV rows and the run registry."""
        return {
            k: float(v)
            for k, v in self.model_dump(exclude={"metadata"}).items()
            if v is not None
        }
