"""Procedural face world with fully known generative factors.

Every image downstream — training data, inversion targets, evaluation
clips — renders from this module, so ground truth exists for all of them.
Head pose and camera pose are deliberately entangled: the head angles are
composed into the camera, so the backdrop moves with the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import facegeo
from .camera import CameraPose, check_resolution, ray_grid
from .errors import InvalidInputError
from .facegeo import BACKDROP_Z, FaceLayout

YAW_RANGE = np.pi / 6
PITCH_RANGE = np.pi / 9
COEF_RANGE = 3.0

ATTRIBUTE_SLOTS = ("age", "hair_length", "glasses", "facial_hair", "gender_code", "yaw")
# first five slots squash to (-1, 1); the yaw slot is the head yaw itself
ATTRIBUTE_RANGES = {name: (-1.0, 1.0) for name in ATTRIBUTE_SLOTS[:5]}
ATTRIBUTE_RANGES["yaw"] = (-YAW_RANGE, YAW_RANGE)

# bilaterally symmetric light keeps mirrored identities mirror-rendered
_LIGHT = np.array([0.0, 0.5, 0.85]) / np.linalg.norm([0.0, 0.5, 0.85])


@dataclass(frozen=True)
class FactorVector:
    """Ground-truth generative factors of one subject in one configuration."""

    beta: np.ndarray          # identity, d_id
    theta_exp: np.ndarray     # expression, d_exp
    psi: np.ndarray           # pose: [yaw, pitch, roll, jaw...]
    alpha_app: np.ndarray     # appearance, d_attr

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "theta_exp", np.asarray(self.theta_exp, dtype=np.float64))
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=np.float64))
        object.__setattr__(self, "alpha_app", np.asarray(self.alpha_app, dtype=np.float64))
        if self.psi.shape != (6,):
            raise InvalidInputError("psi must have 6 components")
        for name, v in (("beta", self.beta), ("theta_exp", self.theta_exp),
                        ("alpha_app", self.alpha_app), ("psi", self.psi)):
            if np.abs(v).max(initial=0.0) > COEF_RANGE:
                raise InvalidInputError(f"{name} outside [-3, 3]")
        if abs(self.psi[0]) > YAW_RANGE + 1e-12:
            raise InvalidInputError("head yaw outside [-pi/6, pi/6]")
        if abs(self.psi[1]) > PITCH_RANGE + 1e-12:
            raise InvalidInputError("head pitch outside [-pi/9, pi/9]")

    @property
    def jaw(self) -> np.ndarray:
        return self.psi[3:6]

    def layout(self) -> FaceLayout:
        return FaceLayout(self.beta, self.theta_exp, self.jaw, self.alpha_app)

    def as_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "theta_exp": self.theta_exp.tolist(),
                "psi": self.psi.tolist(), "alpha_app": self.alpha_app.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "FactorVector":
        return FactorVector(np.array(d["beta"]), np.array(d["theta_exp"]),
                            np.array(d["psi"]), np.array(d["alpha_app"]))


@dataclass
class WorldImage:
    """Rendered ground truth: color, ray depth and face/mouth masks."""

    rgb: np.ndarray
    depth: np.ndarray
    face_mask: np.ndarray
    mouth_mask: np.ndarray

    def __post_init__(self):
        if (self.mouth_mask & ~self.face_mask).any():
            raise InvalidInputError("mouth mask must be contained in the face mask")
        if not np.isfinite(self.depth[self.face_mask | self.mouth_mask]).all():
            raise InvalidInputError("depth must be finite on masked pixels")


@dataclass(frozen=True)
class AttributeVector:
    """Named appearance attributes; a pure function of the generative factors."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.shape != (len(ATTRIBUTE_SLOTS),):
            raise InvalidInputError(f"attribute vector needs {len(ATTRIBUTE_SLOTS)} slots")

    def __getitem__(self, name: str) -> float:
        return float(self.values[ATTRIBUTE_SLOTS.index(name)])

    def with_edits(self, edits: dict[str, float]) -> "AttributeVector":
        vals = self.values.copy()
        for name, delta in edits.items():
            if name not in ATTRIBUTE_SLOTS:
                raise InvalidInputError(f"unknown attribute slot {name!r}")
            i = ATTRIBUTE_SLOTS.index(name)
            new = vals[i] + float(delta)
            lo, hi = ATTRIBUTE_RANGES[name]
            if not (lo <= new <= hi):
                raise InvalidInputError(
                    f"edit drives slot {name!r} to {new:.3f}, outside [{lo}, {hi}]")
            vals[i] = new
        return AttributeVector(vals)


def sample_factors(seed: int) -> FactorVector:
    """Deterministic draw of one subject configuration."""
    rng = np.random.default_rng(np.uint64(seed) + np.uint64(0x5EED_FACE))
    beta = rng.uniform(-1.5, 1.5, facegeo.D_ID)
    theta = rng.uniform(-1.5, 1.5, facegeo.D_EXP)
    alpha = rng.uniform(-1.5, 1.5, facegeo.D_ATTR)
    yaw = rng.uniform(-0.9 * YAW_RANGE, 0.9 * YAW_RANGE)
    pitch = rng.uniform(-0.9 * PITCH_RANGE, 0.9 * PITCH_RANGE)
    jaw_open = max(0.0, rng.uniform(-0.5, 0.8))  # a run of subjects keep the mouth closed
    jaw = np.array([jaw_open, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)])
    psi = np.array([yaw, pitch, 0.0, *jaw])
    return FactorVector(beta, theta, psi, alpha)


def label_attributes(f: FactorVector) -> AttributeVector:
    """Monotone slot readout; the yaw slot equals the head yaw exactly."""
    a = f.alpha_app
    vals = np.array([np.tanh(a[0]), np.tanh(a[1]), np.tanh(a[2]),
                     np.tanh(a[3]), np.tanh(a[4]), f.psi[0]])
    return AttributeVector(vals)


def _ellipsoid_hit(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                   axes: np.ndarray) -> np.ndarray:
    """Smallest positive ray parameter hitting the ellipsoid, inf when missed."""
    o = (origin - center) / axes
    d = dirs / axes
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * d @ o
    c = float(o @ o) - 1.0
    disc = b * b - 4.0 * a * c
    hit = disc > 0.0
    t = np.full(dirs.shape[0], np.inf)
    sq = np.sqrt(np.clip(disc, 0.0, None))
    t_near = (-b - sq) / (2.0 * a)
    t[hit & (t_near > 1e-6)] = t_near[hit & (t_near > 1e-6)]
    return t


def _shade(points: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    normal = (points - center) / (axes ** 2)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True) + 1e-12
    return 0.82 + 0.18 * np.clip(normal @ _LIGHT, 0.0, None)


def reference_render(f: FactorVector, pose_cam: CameraPose, res: int,
                     supersample: int = 2) -> WorldImage:
    """Render the analytic scene; head angles compose into the camera."""
    check_resolution(res)
    lay = f.layout()
    total = CameraPose(pose_cam.yaw + f.psi[0], pose_cam.pitch + f.psi[1],
                       pose_cam.roll + f.psi[2], pose_cam.radius)
    origin, dirs = ray_grid(total, res, supersample)
    n = dirs.shape[0]
    rays = dirs.reshape(-1, 3)

    KIND_BACKDROP, KIND_HEAD, KIND_NOSE, KIND_HAIR = 0, 1, 2, 3
    t_best = np.full(rays.shape[0], np.inf)
    kind = np.full(rays.shape[0], KIND_BACKDROP, dtype=np.int8)

    def consider(t: np.ndarray, k: int) -> None:
        closer = t < t_best
        t_best[closer] = t[closer]
        kind[closer] = k

    consider(_ellipsoid_hit(origin, rays, np.zeros(3), lay.head_axes), KIND_HEAD)
    consider(_ellipsoid_hit(origin, rays, lay.nose_center, lay.nose_axes), KIND_NOSE)
    for center, axes in lay.hair_blobs:
        consider(_ellipsoid_hit(origin, rays, center, axes), KIND_HAIR)

    # backdrop plane z = BACKDROP_Z closes every remaining ray
    dz = rays[:, 2]
    t_plane = np.where(dz < -1e-9, (BACKDROP_Z - origin[2]) / dz, np.inf)
    no_hit = ~np.isfinite(t_best)
    t_best[no_hit] = t_plane[no_hit]

    points = origin[None, :] + t_best[:, None] * rays
    rgb = np.zeros((rays.shape[0], 3))

    m = kind == KIND_BACKDROP
    if m.any():
        rgb[m] = lay.backdrop_rgb(points[m, 0], points[m, 1])
    m = kind == KIND_HEAD
    if m.any():
        rgb[m] = lay.paint(points[m]) * _shade(points[m], np.zeros(3), lay.head_axes)[:, None]
    m = kind == KIND_NOSE
    if m.any():
        rgb[m] = lay.paint(points[m]) * _shade(points[m], lay.nose_center, lay.nose_axes)[:, None]
    m = kind == KIND_HAIR
    if m.any():
        cap_center, cap_axes = lay.hair_blobs[0]
        shade = _shade(points[m], cap_center, cap_axes)
        rgb[m] = lay.hair_rgb[None, :] * shade[:, None]

    face = (kind == KIND_HEAD) | (kind == KIND_NOSE)
    mouth = np.zeros_like(face)
    if lay.mouth_open and face.any():
        mouth[face] = lay.cavity_mask(points[face])

    ss = supersample
    rgb = np.clip(rgb, 0.0, 1.0).reshape(n, n, 3)
    rgb = rgb.reshape(res, ss, res, ss, 3).mean(axis=(1, 3))
    depth = t_best.reshape(n, n).reshape(res, ss, res, ss).mean(axis=(1, 3))
    face = face.reshape(n, n).reshape(res, ss, res, ss).mean(axis=(1, 3)) > 0.5
    mouth = mouth.reshape(n, n).reshape(res, ss, res, ss).mean(axis=(1, 3)) > 0.5
    mouth &= face
    return WorldImage(rgb, depth, face, mouth)


@dataclass
class TargetFrame:
    factors: FactorVector
    cam: CameraPose


def make_target_sequence(seed: int, n_frames: int) -> list[TargetFrame]:
    """Band-limited expression/pose trajectories with a mouth-open segment.

    Per-frame yaw and pitch deltas stay below POSE_DELTA_CAP by construction.
    """
    if n_frames < 1:
        raise InvalidInputError("n_frames must be >= 1")
    rng = np.random.default_rng(np.uint64(seed) + np.uint64(0xC11BEE))
    base = sample_factors(int(rng.integers(0, 2 ** 31)))
    t = np.zeros(n_frames) if n_frames == 1 else np.linspace(0.0, 1.0, n_frames)

    yaw_amp = rng.uniform(0.03, 0.06)
    pitch_amp = rng.uniform(0.02, 0.04)
    yaw_ph, pitch_ph = rng.uniform(0, 2 * np.pi, 2)
    a_exp = rng.uniform(0.4, 0.9, facegeo.D_EXP)
    ph_exp = rng.uniform(0, 2 * np.pi, facegeo.D_EXP)
    om_exp = rng.uniform(1.0, 2.0, facegeo.D_EXP)

    frames = []
    for i, ti in enumerate(t):
        yaw = float(np.clip(base.psi[0] + yaw_amp * np.sin(2 * np.pi * ti + yaw_ph),
                            -YAW_RANGE, YAW_RANGE))
        pitch = float(np.clip(base.psi[1] + pitch_amp * np.sin(2 * np.pi * ti + pitch_ph),
                              -PITCH_RANGE, PITCH_RANGE))
        theta = base.theta_exp + a_exp * np.sin(2 * np.pi * om_exp * ti + ph_exp)
        theta = np.clip(theta, -COEF_RANGE, COEF_RANGE)
        # guaranteed mouth-open bump over the middle third of clips with >= 3 frames
        bump = np.sin(np.pi * np.clip((ti - 1 / 3) * 3.0, 0.0, 1.0))
        jaw_open = float(np.clip(base.psi[3] + 0.55 * bump, 0.0, 1.2))
        psi = np.array([yaw, pitch, 0.0, jaw_open, base.psi[4], base.psi[5]])
        frames.append(TargetFrame(FactorVector(base.beta, theta, psi, base.alpha_app),
                                  CameraPose(0.0, 0.0)))
    return frames


POSE_DELTA_CAP = 0.05  # radians per frame, documented trajectory bound
