"""Rigid transforms and closed-form rigid fitting."""
import numpy as np
from dataclasses import dataclass
from typing import Optional
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-6


class DegenerateConfigurationError(ValueError):
    """Raised when point pairs cannot determine a rigid transform."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): x -> rotation @ x + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError(
                f"RigidTransform needs a 3x3 rotation and a 3-vector translation, "
                f"got {rotation.shape} and {translation.shape}"
            )
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("RigidTransform entries must be finite")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ValueError("RigidTransform rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("RigidTransform rotation must have determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix (nested lists or array)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {matrix.shape}")
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of a rigid transform must be [0, 0, 0, 1]")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        translation_scale: float = 1.0,
        yaw_only: bool = False,
    ) -> "RigidTransform":
        """Sample a transform; yaw_only restricts the rotation to the +z axis."""
        if yaw_only:
            rotation = Rotation.from_euler("z", rng.uniform(0.0, 2.0 * np.pi))
        else:
            rotation = Rotation.random(random_state=rng)
        translation = rng.uniform(-translation_scale, translation_scale, size=3)
        return cls(rotation.as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array (or a single 3-vector)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rotation_t = self.rotation.T
        return RigidTransform(rotation_t, -rotation_t @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self o other (apply other first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None  # type: ignore[assignment]

    def isclose(self, other: "RigidTransform", atol: float = 1e-6) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotation)
    fixed = u @ vt
    if np.linalg.det(fixed) < 0:
        u[:, -1] *= -1
        fixed = u @ vt
    return fixed


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """
    Least-squares rigid fit mapping source points onto target points.

    Cross-covariance SVD with reflection correction.

    Args:
        source: (n, 3) points, n >= 3, not collinear
        target: (n, 3) corresponding points

    Returns:
        RigidTransform T minimizing sum ||T(source_i) - target_i||^2

    Raises:
        DegenerateConfigurationError: fewer than 3 pairs or collinear source
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError(
            f"kabsch needs matching (n, 3) arrays, "
            f"got {source.shape} and {target.shape}"
        )
    if source.shape[0] < 3:
        raise DegenerateConfigurationError(
            f"kabsch needs at least 3 point pairs, got {source.shape[0]}"
        )

    centroid_source = source.mean(axis=0)
    centroid_target = target.mean(axis=0)
    centered_source = source - centroid_source
    centered_target = target - centroid_target

    spread = np.linalg.svd(centered_source, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * max(1.0, spread[0]):
        raise DegenerateConfigurationError("kabsch sample is collinear or coincident")

    covariance = centered_source.T @ centered_target
    u, _, vt = np.linalg.svd(covariance)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    rotation = _orthonormalize(rotation)
    translation = centroid_target - rotation @ centroid_source
    return RigidTransform(rotation, translation)


def yaw_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Rigid fit restricted to rotation about +z (2D SVD in the xy plane)."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape[0] < 1:
        raise DegenerateConfigurationError("yaw fit needs at least one point pair")

    centroid_source = source.mean(axis=0)
    centroid_target = target.mean(axis=0)
    covariance = (source - centroid_source)[:, :2].T @ (target - centroid_target)[:, :2]
    u, _, vt = np.linalg.svd(covariance)
    rotation_2d = vt.T @ u.T
    if np.linalg.det(rotation_2d) < 0:
        vt[-1] *= -1
        rotation_2d = vt.T @ u.T
    rotation = np.eye(3)
    rotation[:2, :2] = rotation_2d
    rotation = _orthonormalize(rotation)
    translation = centroid_target - rotation @ centroid_source
    return RigidTransform(rotation, translation)


def fit_rigid(
    source: np.ndarray, target: np.ndarray, min_pairs: int = 2
) -> Optional[RigidTransform]:
    """
    Fit a rigid transform, falling back to a yaw-only fit when underdetermined.

    Two pairs, or collinear sources, cannot fix a full rotation; for
    gravity-aligned scenes a rotation about +z is still recoverable.

    Returns:
        RigidTransform, or None when fewer than min_pairs pairs are given
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if source.shape[0] < min_pairs:
        return None
    try:
        return kabsch(source, target)
    except DegenerateConfigurationError:
        return yaw_fit(source, target)


def rotation_error_deg(estimated: np.ndarray, reference: np.ndarray) -> float:
    """Geodesic angle between two rotations in degrees (arccos argument clamped)."""
    cosine = (np.trace(estimated.T @ reference) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))
