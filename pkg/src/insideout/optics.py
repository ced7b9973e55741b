"""Pinhole cameras with two radial distortion terms, stereo geometry, and Zhang calibration."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from insideout.models.errors import ErrorCode, InsideOutError
from insideout.xform import RigidTransform, invert

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-9
MIN_TRIANGULATION_ANGLE = 1e-6


def radial_distort(xy: np.ndarray, k1: float, k2: float) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * (1.0 + k1 * r2 + k2 * r2 * r2)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with radial distortion (1 + k1 r^2 + k2 r^4)."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 640
    height: int = 480
    rms_error: float | None = None
    undistort_max_iterations: int = 20
    undistort_tolerance: float = 1e-10

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise InsideOutError(
                code=ErrorCode.INVALID_INPUT,
                message="Focal lengths must be positive",
                details={"fx": self.fx, "fy": self.fy},
            )
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InsideOutError(
                code=ErrorCode.INVALID_INPUT,
                message="Principal point must lie inside the image",
                details={"cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height},
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def distort(self, xy: np.ndarray) -> np.ndarray:
        """Apply radial distortion to normalized coordinates (..., 2)."""
        return radial_distort(xy, self.k1, self.k2)

    def undistort(self, xy_d: np.ndarray) -> np.ndarray:
        """Invert radial distortion by fixed-point iteration."""
        xy_d = np.asarray(xy_d, dtype=float)
        if self.k1 == 0.0 and self.k2 == 0.0:
            return xy_d.copy()
        xy = xy_d.copy()
        for _ in range(self.undistort_max_iterations):
            r2 = np.sum(xy * xy, axis=-1, keepdims=True)
            updated = xy_d / (1.0 + self.k1 * r2 + self.k2 * r2 * r2)
            step = float(np.max(np.abs(updated - xy))) if updated.size else 0.0
            xy = updated
            if step < self.undistort_tolerance:
                return xy
        raise InsideOutError(
            code=ErrorCode.NO_CONVERGENCE,
            message=f"Distortion inversion did not converge in {self.undistort_max_iterations} iterations",
            details={"k1": self.k1, "k2": self.k2},
        )

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        return (
            (pixels[..., 0] >= 0)
            & (pixels[..., 0] < self.width)
            & (pixels[..., 1] >= 0)
            & (pixels[..., 1] < self.height)
        )


@dataclass(frozen=True)
class StereoRig:
    """Two cameras; t_left_right is the right camera pose in the left camera frame."""

    left: CameraIntrinsics
    right: CameraIntrinsics
    t_left_right: RigidTransform
    t_right_left: RigidTransform = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.baseline_mm <= 0:
            raise InsideOutError(
                code=ErrorCode.INVALID_INPUT,
                message="Stereo baseline must be positive",
            )
        object.__setattr__(self, "t_right_left", invert(self.t_left_right))

    @property
    def baseline_mm(self) -> float:
        return float(np.linalg.norm(self.t_left_right.translation))

    def to_right(self, points_left: np.ndarray) -> np.ndarray:
        """Express left-camera points in the right-camera frame."""
        return self.t_right_left.apply(points_left)


@dataclass
class PlanarView:
    """Correspondences between a planar target (mm, z=0) and image pixels."""

    grid_points: np.ndarray
    image_points: np.ndarray

    def __post_init__(self) -> None:
        self.grid_points = np.asarray(self.grid_points, dtype=float).reshape(-1, 2)
        self.image_points = np.asarray(self.image_points, dtype=float).reshape(-1, 2)
        if len(self.grid_points) != len(self.image_points):
            raise InsideOutError(
                code=ErrorCode.LENGTH_MISMATCH,
                message="grid_points and image_points must have the same length",
            )


def make_stereo_rig(
    fx: float = 615.0,
    fy: float = 615.0,
    cx: float = 320.0,
    cy: float = 240.0,
    k1: float = 0.0,
    k2: float = 0.0,
    width: int = 640,
    height: int = 480,
    baseline_mm: float = 50.0,
    undistort_max_iterations: int = 20,
    undistort_tolerance: float = 1e-10,
) -> StereoRig:
    """Rectified rig: identical intrinsics, right camera at +x baseline."""
    cam = CameraIntrinsics(
        fx=fx,
        fy=fy,
        cx=cx,
        cy=cy,
        k1=k1,
        k2=k2,
        width=width,
        height=height,
        undistort_max_iterations=undistort_max_iterations,
        undistort_tolerance=undistort_tolerance,
    )
    t_lr = RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.array([baseline_mm, 0.0, 0.0]))
    return StereoRig(left=cam, right=cam, t_left_right=t_lr)


def project_points(cam: CameraIntrinsics, points_cam: np.ndarray) -> np.ndarray:
    """Vectorized projection of (N, 3) camera points; no depth check."""
    p = np.asarray(points_cam, dtype=float)
    xy = p[..., :2] / p[..., 2:3]
    xy_d = cam.distort(xy)
    u = cam.fx * xy_d[..., 0] + cam.cx
    v = cam.fy * xy_d[..., 1] + cam.cy
    return np.stack([u, v], axis=-1)


def project(cam: CameraIntrinsics, point_cam: np.ndarray) -> np.ndarray:
    """Project one camera-frame point (mm) to pixels."""
    p = np.asarray(point_cam, dtype=float).reshape(3)
    if p[2] <= MIN_DEPTH:
        raise InsideOutError(
            code=ErrorCode.BEHIND_CAMERA,
            message="Point lies at or behind the camera plane",
            details={"z": float(p[2])},
        )
    return project_points(cam, p[None, :])[0]


def normalized_from_pixels(cam: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Undistorted normalized coordinates (N, 2) for pixels (N, 2)."""
    px = np.asarray(pixels, dtype=float)
    xy_d = np.stack([(px[..., 0] - cam.cx) / cam.fx, (px[..., 1] - cam.cy) / cam.fy], axis=-1)
    return cam.undistort(xy_d)


def unproject_many(cam: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit rays (N, 3) for pixels (N, 2)."""
    xy = normalized_from_pixels(cam, pixels)
    rays = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def unproject(cam: CameraIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Unit viewing ray for one pixel."""
    return unproject_many(cam, np.asarray(pixel, dtype=float).reshape(1, 2))[0]


def triangulate_many(
    rig: StereoRig, px_left: np.ndarray, px_right: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation of N matches.

    Returns (points (N, 3) in the left frame, status (N,)) where status is 0 for valid
    points, 1 for near-parallel rays and 2 for points behind either camera.
    """
    d1 = unproject_many(rig.left, px_left)
    d2 = unproject_many(rig.right, px_right) @ rig.t_left_right.rotation_matrix.T
    c2 = rig.t_left_right.translation

    # minimize |s d1 - (c2 + t d2)|
    b = np.einsum("ij,ij->i", d1, d2)
    e = d1 @ c2
    f = d2 @ c2
    denom = 1.0 - b * b
    sin_angle = np.linalg.norm(np.cross(d1, d2), axis=1)
    parallel = sin_angle < MIN_TRIANGULATION_ANGLE
    safe = np.where(parallel, 1.0, denom)
    s = (e - b * f) / safe
    t = (b * e - f) / safe

    p1 = s[:, None] * d1
    p2 = c2 + t[:, None] * d2
    points = 0.5 * (p1 + p2)

    status = np.zeros(len(points), dtype=int)
    status[(s <= MIN_DEPTH) | (t <= MIN_DEPTH)] = 2
    status[parallel] = 1
    return points, status


def triangulate(rig: StereoRig, px_left: np.ndarray, px_right: np.ndarray) -> np.ndarray:
    """Triangulate one stereo match to a left-camera point (mm)."""
    points, status = triangulate_many(
        rig, np.asarray(px_left, dtype=float).reshape(1, 2), np.asarray(px_right, dtype=float).reshape(1, 2)
    )
    if status[0] == 1:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_GEOMETRY,
            message="Viewing rays are parallel; point cannot be triangulated",
            details={"px_left": list(map(float, px_left)), "px_right": list(map(float, px_right))},
        )
    if status[0] == 2:
        raise InsideOutError(
            code=ErrorCode.BEHIND_CAMERA,
            message="Triangulated point lies behind a camera",
        )
    return points[0]


def _check_not_collinear(points: np.ndarray, what: str) -> None:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if len(points) < 3 or s[0] == 0 or s[1] / s[0] < 1e-9:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_CONFIGURATION,
            message=f"{what} are collinear or coincident",
        )


def _hartley_normalization(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = np.sqrt(2.0) / mean_dist
    return np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_homography(view: PlanarView) -> np.ndarray:
    """Normalized DLT homography mapping grid points to image points, ‖H‖_F = 1."""
    src = view.grid_points
    dst = view.image_points
    if len(src) < 4:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_CORRESPONDENCES,
            message=f"Homography needs at least 4 correspondences, got {len(src)}",
        )
    _check_not_collinear(src, "Grid points")
    _check_not_collinear(dst, "Image points")

    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    src_h = np.column_stack([src, np.ones(len(src))]) @ t_src.T
    dst_h = np.column_stack([dst, np.ones(len(dst))]) @ t_dst.T

    rows = []
    for (x, y, w), (u, v, s) in zip(src_h, dst_h):
        rows.append([0.0, 0.0, 0.0, -s * x, -s * y, -s * w, v * x, v * y, v * w])
        rows.append([s * x, s * y, s * w, 0.0, 0.0, 0.0, -u * x, -u * y, -u * w])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[0] == 0 or sv[7] / sv[0] < 1e-12:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_CONFIGURATION,
            message="Homography design matrix is rank deficient",
        )
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    h /= np.linalg.norm(h)
    if h[2, 2] < 0:
        h = -h
    return h


def pose_from_homography(k: np.ndarray, h: np.ndarray) -> RigidTransform:
    """Plane-to-camera pose from a homography of z=0 plane points."""
    k_inv = np.linalg.inv(k)
    h1, h2, h3 = (k_inv @ h).T
    lam = 1.0 / np.linalg.norm(h1)
    if (lam * h3)[2] < 0:
        lam = -lam
    r1 = lam * h1
    r2 = lam * h2
    r3 = np.cross(r1, r2)
    u, _, vt = np.linalg.svd(np.column_stack([r1, r2, r3]))
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return RigidTransform.from_rotation(Rotation.from_matrix(r), lam * h3)


def _v_row(h: np.ndarray, i: int, j: int) -> np.ndarray:
    hi = h[:, i]
    hj = h[:, j]
    return np.array(
        [
            hi[0] * hj[0],
            hi[0] * hj[1] + hi[1] * hj[0],
            hi[1] * hj[1],
            hi[2] * hj[0] + hi[0] * hj[2],
            hi[2] * hj[1] + hi[1] * hj[2],
            hi[2] * hj[2],
        ]
    )


def _closed_form_intrinsics(homographies: list[np.ndarray]) -> np.ndarray:
    rows = []
    for h in homographies:
        rows.append(_v_row(h, 0, 1))
        rows.append(_v_row(h, 0, 0) - _v_row(h, 1, 1))
    # zero skew: B12 = 0
    rows.append(np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
    v = np.asarray(rows)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    _, sv, vt = np.linalg.svd(v)
    if sv[0] == 0 or sv[-2] / sv[0] < 1e-9:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_CONFIGURATION,
            message="Planar views do not constrain the intrinsics (parallel target planes)",
            details={"singular_values": sv.tolist()},
        )
    b11, b12, b22, b13, b23, b33 = vt[-1]
    denom = b11 * b22 - b12 * b12
    if b11 == 0 or denom == 0:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_CONFIGURATION,
            message="Closed-form intrinsic solution is singular",
        )
    v0 = (b12 * b13 - b11 * b23) / denom
    lam = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11
    if lam / b11 <= 0 or lam * b11 / denom <= 0:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_CONFIGURATION,
            message="Closed-form intrinsic solution is not positive definite",
        )
    alpha = np.sqrt(lam / b11)
    beta = np.sqrt(lam * b11 / denom)
    u0 = -b13 * alpha * alpha / lam
    return np.array([[alpha, 0.0, u0], [0.0, beta, v0], [0.0, 0.0, 1.0]])


def _calibration_residuals(params: np.ndarray, views: list[PlanarView]) -> np.ndarray:
    fx, fy, cx, cy, k1, k2 = params[:6]
    residuals = []
    for i, view in enumerate(views):
        rvec = params[6 + 6 * i: 9 + 6 * i]
        tvec = params[9 + 6 * i: 12 + 6 * i]
        grid = np.column_stack([view.grid_points, np.zeros(len(view.grid_points))])
        pc = Rotation.from_rotvec(rvec).apply(grid) + tvec
        xy = radial_distort(pc[:, :2] / pc[:, 2:3], k1, k2)
        uv = np.column_stack([fx * xy[:, 0] + cx, fy * xy[:, 1] + cy])
        residuals.append((uv - view.image_points).ravel())
    return np.concatenate(residuals)


def calibrate_intrinsics(views: list[PlanarView], width: int = 640, height: int = 480) -> CameraIntrinsics:
    """Zhang calibration: closed form from homographies, then Levenberg-Marquardt refinement.

    The returned intrinsics carry the final RMS reprojection error in ``rms_error``.
    """
    if len(views) < 3:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_VIEWS,
            message=f"Calibration needs at least 3 views, got {len(views)}",
        )
    homographies = [estimate_homography(v) for v in views]
    k = _closed_form_intrinsics(homographies)
    logger.debug(f"Closed-form intrinsics: fx={k[0, 0]:.3f} fy={k[1, 1]:.3f} cx={k[0, 2]:.3f} cy={k[1, 2]:.3f}")

    params = [k[0, 0], k[1, 1], k[0, 2], k[1, 2], 0.0, 0.0]
    for h in homographies:
        pose = pose_from_homography(k, h)
        params.extend(pose.as_rotation().as_rotvec())
        params.extend(pose.translation)
    x0 = np.asarray(params)

    result = least_squares(
        _calibration_residuals,
        x0,
        args=(views,),
        method="lm",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=2000 * len(x0),
    )
    fx, fy, cx, cy, k1, k2 = result.x[:6]
    rms = float(np.sqrt(np.mean(result.fun**2)))
    logger.info(f"Intrinsic calibration from {len(views)} views: RMS reprojection error {rms:.4f} px")
    cam = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, k1=k1, k2=k2, width=width, height=height)
    return replace(cam, rms_error=rms)
