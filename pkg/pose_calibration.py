"""
Pose calibration: training-free alignment of a driving skeleton to a
reference skeleton in three steps (global scale, segment proportions,
anchor translation).

Torso anchors are neck, shoulders and hips. The torso block is the root of
the segment tree: it is only scaled and translated, while limbs, the head
and the hand keypoints are re-lengthened root-to-leaf along their existing
directions. Face keypoints follow the nose rigidly.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import DegeneratePoseError, MissingAnchorError

logger = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 0.3

BODY_JOINTS = (
    "nose", "neck",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
)
TORSO_ANCHORS = ("neck", "left_shoulder", "right_shoulder", "left_hip", "right_hip")
HAND_KEYPOINTS = 21
FACE_KEYPOINTS = 10
# Finger chains inside a 21-point hand: 0 is the hand root, then four joints per finger.
FINGER_CHAINS = ((1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (13, 14, 15, 16), (17, 18, 19, 20))


def hand_joint(side: str, index: int) -> str:
    return f"{side}_hand_{index}"


def face_joint(index: int) -> str:
    return f"face_{index}"


def canonical_joint_names() -> List[str]:
    """Body joints, then 21 left and 21 right hand keypoints, then the face set."""
    names = list(BODY_JOINTS)
    for side in ("left", "right"):
        names += [hand_joint(side, i) for i in range(HAND_KEYPOINTS)]
    names += [face_joint(i) for i in range(FACE_KEYPOINTS)]
    return names


CANONICAL_JOINTS = tuple(canonical_joint_names())
FACE_JOINTS = tuple(face_joint(i) for i in range(FACE_KEYPOINTS))
HAND_JOINTS = tuple(
    hand_joint(side, i) for side in ("left", "right") for i in range(HAND_KEYPOINTS)
)


@dataclass(frozen=True)
class Joint:
    x: float
    y: float
    confidence: float = 1.0


@dataclass
class Skeleton2D:
    """
    Named 2D keypoints in pixel coordinates.

    Attributes:
        joints (Dict[str, Joint]): joint name -> (x, y, confidence).
    """
    joints: Dict[str, Joint]

    def __post_init__(self):
        for name, joint in self.joints.items():
            if not (math.isfinite(joint.x) and math.isfinite(joint.y)):
                raise ValueError(f"joint '{name}' has non-finite coordinates")
            if not 0.0 <= joint.confidence <= 1.0:
                raise ValueError(f"joint '{name}' confidence {joint.confidence} outside [0, 1]")

    def __contains__(self, name: str) -> bool:
        return name in self.joints

    def xy(self, name: str) -> np.ndarray:
        joint = self.joints[name]
        return np.array([joint.x, joint.y], dtype=np.float64)

    def confident(self, name: str, threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> bool:
        return name in self.joints and self.joints[name].confidence >= threshold

    def with_positions(self, positions: Dict[str, np.ndarray]) -> "Skeleton2D":
        """Copy with some joints moved; confidences are kept."""
        joints = dict(self.joints)
        for name, xy in positions.items():
            old = joints[name]
            joints[name] = Joint(float(xy[0]), float(xy[1]), old.confidence)
        return Skeleton2D(joints)

    def points(self, names: Iterable[str]) -> np.ndarray:
        present = [n for n in names if n in self.joints]
        if not present:
            return np.zeros((0, 2), dtype=np.float64)
        return np.stack([self.xy(n) for n in present])

    def to_array(self, names: Sequence[str] = CANONICAL_JOINTS) -> np.ndarray:
        """[len(names), 3] of (x, y, confidence); missing joints are zeros."""
        out = np.zeros((len(names), 3), dtype=np.float64)
        for i, name in enumerate(names):
            if name in self.joints:
                j = self.joints[name]
                out[i] = (j.x, j.y, j.confidence)
        return out

    @classmethod
    def from_array(cls, array: np.ndarray, names: Sequence[str] = CANONICAL_JOINTS) -> "Skeleton2D":
        """Inverse of `to_array`; rows with zero confidence are dropped."""
        joints = {}
        for name, (x, y, c) in zip(names, np.asarray(array, dtype=np.float64)):
            if c > 0.0:
                joints[name] = Joint(float(x), float(y), float(c))
        return cls(joints)


@dataclass(frozen=True)
class SegmentGraph:
    """
    Parent -> child segments in root-to-leaf order with reference lengths.

    The torso block is the implicit root; every listed parent is either a
    torso anchor or the child of an earlier segment.
    """
    segments: Tuple[Tuple[str, str], ...]
    lengths: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        seen_children = set()
        placed = set(TORSO_ANCHORS)
        for parent, child in self.segments:
            if child in seen_children:
                raise ValueError(f"joint '{child}' has more than one parent")
            if child in placed:
                raise ValueError(f"segment ({parent}, {child}) would create a cycle")
            if parent not in placed:
                raise ValueError(f"segment ({parent}, {child}) listed before its parent is placed")
            seen_children.add(child)
            placed.add(child)
        for key, length in self.lengths.items():
            if length < 0:
                raise ValueError(f"negative reference length for segment {key}")

    def children(self, joint: str) -> List[str]:
        return [c for p, c in self.segments if p == joint]

    def subtree(self, joint: str) -> List[str]:
        out, stack = [], [joint]
        while stack:
            node = stack.pop()
            for child in self.children(node):
                out.append(child)
                stack.append(child)
        return out


def canonical_segments() -> Tuple[Tuple[str, str], ...]:
    segments = [("neck", "nose")]
    for side in ("left", "right"):
        segments += [
            (f"{side}_shoulder", f"{side}_elbow"),
            (f"{side}_elbow", f"{side}_wrist"),
            (f"{side}_wrist", hand_joint(side, 0)),
        ]
        for chain in FINGER_CHAINS:
            parent = hand_joint(side, 0)
            for idx in chain:
                child = hand_joint(side, idx)
                segments.append((parent, child))
                parent = child
    return tuple(segments)


CANONICAL_SEGMENTS = canonical_segments()


def segment_graph_from(ref: Skeleton2D, segments: Sequence[Tuple[str, str]] = CANONICAL_SEGMENTS) -> SegmentGraph:
    """Measure reference lengths for every segment whose endpoints exist in `ref`."""
    lengths = {}
    for parent, child in segments:
        if parent in ref and child in ref:
            lengths[(parent, child)] = float(np.linalg.norm(ref.xy(child) - ref.xy(parent)))
    return SegmentGraph(segments=tuple(segments), lengths=lengths)


@dataclass
class CalibrationParams:
    """
    Every factor applied by `calibrate`.

    Attributes:
        r_x, r_y: Horizontal / vertical scale factors.
        rho: Segment -> l_ref / l_drv correction factor (after scaling).
        delta: Final translation (dx, dy) in pixels.
        pivot: Scaling pivot (driving torso center).
        skipped: Segments left unadjusted because their direction was undefined.
    """
    r_x: float = 1.0
    r_y: float = 1.0
    rho: Dict[Tuple[str, str], float] = field(default_factory=dict)
    delta: Tuple[float, float] = (0.0, 0.0)
    pivot: Tuple[float, float] = (0.0, 0.0)
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def _require_anchors(skel: Skeleton2D, threshold: float, names: Iterable[str]) -> None:
    missing = [n for n in names if not skel.confident(n, threshold)]
    if missing:
        raise MissingAnchorError(f"missing or low-confidence torso anchors: {', '.join(missing)}")


def torso_center(skel: Skeleton2D, threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> np.ndarray:
    """Mean of the confident torso anchors."""
    anchors = [n for n in TORSO_ANCHORS if skel.confident(n, threshold)]
    if not anchors:
        raise MissingAnchorError("no confident torso anchors")
    return np.mean([skel.xy(n) for n in anchors], axis=0)


def _hip_midpoint(skel: Skeleton2D, threshold: float) -> np.ndarray:
    hips = [n for n in ("left_hip", "right_hip") if skel.confident(n, threshold)]
    if not hips:
        raise MissingAnchorError("no confident hip anchors")
    return np.mean([skel.xy(n) for n in hips], axis=0)


def _shoulder_extent(skel: Skeleton2D) -> float:
    return abs(skel.joints["left_shoulder"].x - skel.joints["right_shoulder"].x)


def _torso_height(skel: Skeleton2D, threshold: float) -> float:
    return abs(_hip_midpoint(skel, threshold)[1] - skel.joints["neck"].y)


def estimate_scale(
    ref: Skeleton2D,
    drv: Skeleton2D,
    threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> Tuple[float, float]:
    """
    Horizontal factor from shoulder extent, vertical factor from neck-to-hip-midpoint extent.

    Raises:
        MissingAnchorError: If neck or shoulders are absent, or no hip is confident.
        DegeneratePoseError: If the driving extents are zero.
    """
    for skel in (ref, drv):
        _require_anchors(skel, threshold, ("neck", "left_shoulder", "right_shoulder"))
    drv_width = _shoulder_extent(drv)
    drv_height = _torso_height(drv, threshold)
    if drv_width <= 0.0 or drv_height <= 0.0:
        raise DegeneratePoseError(
            f"degenerate driving torso (shoulder extent {drv_width}, torso height {drv_height})"
        )
    r_x = _shoulder_extent(ref) / drv_width
    r_y = _torso_height(ref, threshold) / drv_height
    if not (r_x > 0 and r_y > 0 and math.isfinite(r_x) and math.isfinite(r_y)):
        raise DegeneratePoseError(f"degenerate reference torso (r_x={r_x}, r_y={r_y})")
    return r_x, r_y


def apply_scale(skel: Skeleton2D, r_x: float, r_y: float, pivot: Sequence[float]) -> Skeleton2D:
    """Map every joint to pivot + (r_x (x - px), r_y (y - py)); confidences unchanged."""
    px, py = float(pivot[0]), float(pivot[1])
    joints = {
        name: Joint(px + r_x * (j.x - px), py + r_y * (j.y - py), j.confidence)
        for name, j in skel.joints.items()
    }
    return Skeleton2D(joints)


def adjust_proportions(
    skel: Skeleton2D,
    ref_lengths: SegmentGraph,
    params: Optional[CalibrationParams] = None,
) -> Skeleton2D:
    """
    Re-length every segment to its reference length, root to leaf.

    Each child is placed at its (possibly moved) parent plus the original
    unit direction times the reference length. A zero-length segment with a
    nonzero reference is skipped and its subtree follows the parent; the
    skip is recorded in `params.skipped`. Face keypoints follow the nose.
    """
    if params is None:
        params = CalibrationParams()
    original = {name: skel.xy(name) for name in skel.joints}
    moved = dict(original)

    for parent, child in ref_lengths.segments:
        if parent not in moved or child not in moved:
            continue
        key = (parent, child)
        offset = original[child] - original[parent]
        length = float(np.linalg.norm(offset))
        ref_length = ref_lengths.lengths.get(key)
        if ref_length is None:
            moved[child] = moved[parent] + offset
            continue
        if length == 0.0:
            if ref_length != 0.0:
                params.skipped.append(key)
                logger.debug("segment %s has zero driving length; skipped", key)
            moved[child] = moved[parent] + offset
            continue
        params.rho[key] = ref_length / length
        moved[child] = moved[parent] + offset * (ref_length / length)

    if "nose" in moved:
        shift = moved["nose"] - original["nose"]
        for name in FACE_JOINTS:
            if name in moved:
                moved[name] = original[name] + shift

    return skel.with_positions({n: moved[n] for n in moved})


def anchor_translate(
    skel: Skeleton2D,
    ref: Skeleton2D,
    threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> Tuple[Skeleton2D, Tuple[float, float]]:
    """
    Shift the whole skeleton so its torso center lands on the reference torso center.

    Returns:
        Tuple of (translated skeleton, delta).
    """
    delta = torso_center(ref, threshold) - torso_center(skel, threshold)
    joints = {
        name: Joint(j.x + float(delta[0]), j.y + float(delta[1]), j.confidence)
        for name, j in skel.joints.items()
    }
    return Skeleton2D(joints), (float(delta[0]), float(delta[1]))


def calibrate(
    ref: Skeleton2D,
    drv: Skeleton2D,
    graph: Optional[SegmentGraph] = None,
    threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> Tuple[Skeleton2D, CalibrationParams]:
    """
    Scale -> proportions -> translation.

    Args:
        ref: Reference skeleton (target coordinate system).
        drv: Driving skeleton to align.
        graph: Segment tree with reference lengths; measured from `ref` if omitted.
        threshold: Confidence below which anchors count as missing.

    Returns:
        Tuple of (calibrated skeleton, parameters used).
    """
    if graph is None:
        graph = segment_graph_from(ref)
    _require_anchors(ref, threshold, TORSO_ANCHORS[:3])
    _require_anchors(drv, threshold, TORSO_ANCHORS[:3])

    r_x, r_y = estimate_scale(ref, drv, threshold)
    pivot = torso_center(drv, threshold)
    params = CalibrationParams(r_x=r_x, r_y=r_y, pivot=(float(pivot[0]), float(pivot[1])))

    scaled = apply_scale(drv, r_x, r_y, pivot)
    proportioned = adjust_proportions(scaled, graph, params)
    translated, delta = anchor_translate(proportioned, ref, threshold)
    params.delta = delta
    return translated, params


def calibrate_sequence(
    ref: Skeleton2D,
    frames: Sequence[Skeleton2D],
    threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> Tuple[List[Skeleton2D], List[CalibrationParams]]:
    """Calibrate every driving frame against one reference."""
    graph = segment_graph_from(ref)
    out, params = [], []
    for frame in frames:
        calibrated, p = calibrate(ref, frame, graph, threshold)
        out.append(calibrated)
        params.append(p)
    return out, params


def segment_length_error(skel: Skeleton2D, graph: SegmentGraph) -> float:
    """Mean relative |l - l_ref| / l_ref over segments with nonzero reference length."""
    errors = []
    for (parent, child), ref_length in graph.lengths.items():
        if ref_length <= 0.0 or parent not in skel or child not in skel:
            continue
        length = float(np.linalg.norm(skel.xy(child) - skel.xy(parent)))
        errors.append(abs(length - ref_length) / ref_length)
    return float(np.mean(errors)) if errors else 0.0
