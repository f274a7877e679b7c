"""Bounding boxes + depth features -> planar disc obstacles.

Pixels are unprojected through the camera intrinsics, moved into the
body frame and then the spatial frame; features are grouped by bounding
box, and each group becomes a disc whose radius is half the maximum
pairwise 3D distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .geometry import Obstacle, State2


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray  # 3x3 intrinsics, zero skew
    R_bc: np.ndarray  # camera-to-body rotation
    T_bc: np.ndarray  # camera-to-body translation, meters

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        R = np.asarray(self.R_bc, dtype=float)
        T = np.asarray(self.T_bc, dtype=float).ravel()
        if K.shape != (3, 3) or K[0, 0] <= 0.0 or K[1, 1] <= 0.0:
            raise ValueError("invalid intrinsics matrix")
        _check_rotation(R)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R_bc", R)
        object.__setattr__(self, "T_bc", T)


@dataclass(frozen=True)
class BodyPose:
    R_sb: np.ndarray  # body-to-spatial rotation
    T_sb: np.ndarray  # body-to-spatial translation, meters

    def __post_init__(self):
        R = np.asarray(self.R_sb, dtype=float)
        T = np.asarray(self.T_sb, dtype=float).ravel()
        _check_rotation(R)
        object.__setattr__(self, "R_sb", R)
        object.__setattr__(self, "T_sb", T)


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0.0:
        raise ValueError("rotation must be orthonormal with det +1")


@dataclass(frozen=True)
class FeatureObservation:
    x_p: float  # pixels
    y_p: float
    depth: float  # meters, camera frame Z

    def __post_init__(self):
        if self.depth <= 0.0:
            raise ValueError("feature depth must be positive")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: str = ""

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("degenerate bounding box")

    def contains(self, x_p: float, y_p: float) -> bool:
        # Edge pixels count as inside.
        return self.x_min <= x_p <= self.x_max and self.y_min <= y_p <= self.y_max

    def center(self) -> Tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)


def unproject(obs: FeatureObservation, cam: CameraModel, pose: BodyPose) -> np.ndarray:
    """Pixel + depth -> 3D position in the spatial frame."""
    ray = np.linalg.solve(cam.K, np.array([obs.x_p, obs.y_p, 1.0]))
    X_c = obs.depth * ray
    X_b = cam.R_bc @ X_c + cam.T_bc
    return pose.R_sb @ X_b + pose.T_sb


def project(X_s: np.ndarray, cam: CameraModel, pose: BodyPose) -> FeatureObservation:
    """Forward projection, the inverse of `unproject` (used as an oracle)."""
    X_b = pose.R_sb.T @ (np.asarray(X_s, dtype=float) - pose.T_sb)
    X_c = cam.R_bc.T @ (X_b - cam.T_bc)
    if X_c[2] <= 0.0:
        raise ValueError("point is behind the camera")
    pix = cam.K @ (X_c / X_c[2])
    return FeatureObservation(float(pix[0]), float(pix[1]), float(X_c[2]))


def assign_features(
    features: Sequence[Tuple[Tuple[float, float], np.ndarray]],
    boxes: Sequence[BoundingBox],
) -> List[List[np.ndarray]]:
    """Group unprojected features by bounding box.

    Each entry of `features` is ((x_p, y_p), X_s). A feature inside
    several boxes goes to the box with the nearest center; ties resolve
    to the earlier box.
    """
    groups: List[List[np.ndarray]] = [[] for _ in boxes]
    for (x_p, y_p), X_s in features:
        hits = [i for i, b in enumerate(boxes) if b.contains(x_p, y_p)]
        if not hits:
            continue
        best = min(
            hits,
            key=lambda i: (
                math.hypot(x_p - boxes[i].center()[0], y_p - boxes[i].center()[1]),
                i,
            ),
        )
        groups[best].append(np.asarray(X_s, dtype=float))
    return groups


def to_obstacle(group: Sequence[np.ndarray]) -> Obstacle:
    """Disc from a feature group: centroid center, radius = half the
    maximum pairwise 3D distance."""
    if not len(group):
        raise ValueError("empty feature group")
    pts = np.asarray(group, dtype=float).reshape(len(group), 3)
    centroid = pts.mean(axis=0)
    diffs = pts[:, None, :] - pts[None, :, :]
    max_dist = float(np.sqrt((diffs**2).sum(axis=2)).max())
    return Obstacle(centroid[0], centroid[1], 0.5 * max_dist)


def filter_range(
    obstacles: Iterable[Obstacle], robot: State2, max_range: float
) -> List[Obstacle]:
    """Keep obstacles whose center is within max_range of the robot
    (inclusive boundary)."""
    if max_range <= 0.0:
        raise ValueError("max_range must be positive")
    return [
        o
        for o in obstacles
        if math.hypot(o.cx - robot.x, o.cy - robot.y) <= max_range
    ]


# ---------------------------------------------------------------------------
# File input: line-delimited feature and box records
# ---------------------------------------------------------------------------


def load_features(path) -> List[Tuple[int, FeatureObservation]]:
    """Read `frame_id, x_p, y_p, Z_c` records (one per line, '#' comments)."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [s.strip() for s in line.split(",")]
            if len(parts) != 4:
                raise ValueError(f"malformed feature record: {line!r}")
            frame = int(parts[0])
            out.append((frame, FeatureObservation(*(float(s) for s in parts[1:]))))
    return out


def load_boxes(path) -> List[Tuple[int, BoundingBox]]:
    """Read `frame_id, x_min, y_min, x_max, y_max, label` records."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [s.strip() for s in line.split(",")]
            if len(parts) != 6:
                raise ValueError(f"malformed box record: {line!r}")
            frame = int(parts[0])
            out.append(
                (frame, BoundingBox(*(float(s) for s in parts[1:5]), label=parts[5]))
            )
    return out


def obstacles_from_files(
    feature_path,
    box_path,
    cam: CameraModel,
    pose: BodyPose,
    frame: int = 0,
) -> List[Obstacle]:
    """Full pipeline for one frame of feature/box files."""
    feats = [
        ((f.x_p, f.y_p), unproject(f, cam, pose))
        for fid, f in load_features(feature_path)
        if fid == frame
    ]
    boxes = [b for fid, b in load_boxes(box_path) if fid == frame]
    return [to_obstacle(g) for g in assign_features(feats, boxes) if g]
