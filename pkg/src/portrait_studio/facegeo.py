"""Parametric face layout shared by the procedural world and the mesh model.

All geometry and coloring derives from four coefficient blocks:

  beta  (8)  identity: head axes, brow base, nose placement/size, eye placement
  theta (8)  expression: mouth width/curve/thickness, brows, cheeks, mouth shift
  jaw   (3)  articulation: [open, side shift, lower-lip emphasis]
  alpha (6)  appearance: [age, hair length, glasses, facial hair, gender, backdrop tint]

Geometric primitives are ellipsoids (head, nose, hair shells) plus a backdrop
plane; eyes, brows, lips, mouth cavity, glasses, facial hair and cheeks are
painted onto the head surface by smooth weight fields. The painted-feature
functions are evaluated identically by the volumetric world renderer and the
mesh rasterizer, which is what makes analysis-by-synthesis fitting well posed.
Every coefficient moves something visible from a frontal view; the
sensitivity scales below are chosen so one coefficient unit displaces paint
or silhouette by at least a fifth of a pixel at the working resolutions.

The jaw-opening component is ``jaw[0]``; the mouth cavity exists only above
``JAW_OPEN_THRESHOLD`` and the lip gap height is ``DROP_PER_JAW * jaw[0]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

D_ID = 8
D_EXP = 8
D_ATTR = 6

JAW_OPEN_THRESHOLD = 0.1
DROP_PER_JAW = 0.11

SKIN_BASE = np.array([0.85, 0.70, 0.60])
EYE_RGB = np.array([0.15, 0.12, 0.10])
BROW_RGB = np.array([0.22, 0.16, 0.12])
CAVITY_RGB = np.array([0.06, 0.04, 0.04])
HAIR_BASE = np.array([0.28, 0.20, 0.14])
HAIR_GRAY = np.array([0.68, 0.68, 0.68])
GLASSES_RGB = np.array([0.10, 0.10, 0.12])
BACKDROP_BASE = np.array([0.56, 0.58, 0.62])
BACKDROP_Z = -1.5


def _smooth_disc(d2: np.ndarray, feather: float = 0.35) -> np.ndarray:
    """1 inside the unit disc, rolling off to 0 near the rim."""
    return np.clip((1.0 - d2) / feather, 0.0, 1.0)


def _band(y: np.ndarray, lo, hi, feather: float = 0.006) -> np.ndarray:
    return np.clip((y - lo) / feather, 0.0, 1.0) * np.clip((hi - y) / feather, 0.0, 1.0)


@dataclass
class FaceLayout:
    """All blob parameters and paint fields for one coefficient setting."""

    beta: np.ndarray
    theta: np.ndarray
    jaw: np.ndarray
    alpha: np.ndarray

    head_axes: np.ndarray = field(init=False)
    nose_center: np.ndarray = field(init=False)
    nose_axes: np.ndarray = field(init=False)
    hair_blobs: list[tuple[np.ndarray, np.ndarray]] = field(init=False)
    skin_rgb: np.ndarray = field(init=False)
    hair_rgb: np.ndarray = field(init=False)
    lip_rgb: np.ndarray = field(init=False)

    def __post_init__(self):
        b, t, j, a = (np.asarray(v, dtype=np.float64)
                      for v in (self.beta, self.theta, self.jaw, self.alpha))
        self.beta, self.theta, self.jaw, self.alpha = b, t, j, a
        self.head_axes = np.array([0.50 + 0.04 * b[0], 0.60 + 0.03 * b[1], 0.46])

        nx = 0.030 * b[3]
        ny = -0.05
        zs = self.surface_z(np.array([nx]), np.array([ny]))[0]
        self.nose_axes = np.array([0.070 + 0.020 * b[5], 0.105, 0.095 + 0.014 * b[4]])
        self.nose_center = np.array([nx, ny, zs])
        self.nose_tint = 0.08 * (1.0 + 0.25 * np.tanh(b[4]))

        # eyes / brows placement
        self.eye_dx = 0.20 + 0.020 * b[6]
        self.eye_y = 0.14 + 0.020 * b[7]
        self.eye_rx, self.eye_ry = 0.050, 0.034
        brow_base = 0.225 + 0.020 * b[2]
        self.brow_y = np.array([brow_base + 0.022 * t[3], brow_base + 0.022 * t[4]])
        self.brow_h = 0.020 + 0.006 * np.tanh(a[4])

        # mouth
        self.mouth_y = -0.26 + 0.025 * t[7]
        self.mouth_x = 0.030 * t[6]
        self.mouth_w = 0.130 + 0.030 * t[0]
        self.smile = 0.050 * t[1]
        self.lip_u = 0.016 + 0.008 * t[2]
        self.lip_l = (0.016 + 0.008 * t[2]) * (1.0 + 0.45 * j[2])
        self.jaw_side = 0.030 * j[1]
        self.drop = DROP_PER_JAW * max(float(j[0]), 0.0)
        self.mouth_open = float(j[0]) > JAW_OPEN_THRESHOLD

        # appearance
        age = np.tanh(a[0])
        self.skin_rgb = SKIN_BASE * (1.0 - 0.10 * age)
        self.hair_rgb = HAIR_BASE + (HAIR_GRAY - HAIR_BASE) * (0.40 * 0.5 * (1.0 + age))
        self.glasses_strength = 0.18 + 0.15 * np.tanh(a[2])
        self.beard_strength = 0.15 + 0.13 * np.tanh(a[3])
        self.cheek_tint = 0.12 * np.tanh(t[5])
        gender = 0.5 * (1.0 + np.tanh(a[4]))
        self.lip_rgb = np.array([0.55, 0.30, 0.30]) * (1 - gender) + np.array([0.72, 0.24, 0.33]) * gender
        self.backdrop_tint = 0.02 * np.tanh(a[5])

        ax, ay = self.head_axes[0], self.head_axes[1]
        hair_len = 0.16 + 0.14 * np.tanh(a[1])
        # the cap sits far enough back that it never occludes frontal face pixels
        cap = (np.array([0.0, 0.10, -0.22]), np.array([ax * 1.12, ay * 1.05, self.head_axes[2]]))
        left = (np.array([-ax * 0.96, 0.12 - hair_len, -0.16]), np.array([0.085, hair_len, 0.22]))
        right = (np.array([ax * 0.96, 0.12 - hair_len, -0.16]), np.array([0.085, hair_len, 0.22]))
        self.hair_blobs = [cap, left, right]

    # -- geometry -------------------------------------------------------
    def surface_z(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Front (z > 0) head-ellipsoid surface height over the xy plane."""
        ax, ay, az = self.head_axes
        q = 1.0 - (x / ax) ** 2 - (y / ay) ** 2
        return az * np.sqrt(np.clip(q, 0.0, None))

    def nose_bump(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Outward displacement of the head surface near the nose (mesh path)."""
        cx, cy = self.nose_center[0], self.nose_center[1]
        d2 = ((x - cx) / self.nose_axes[0]) ** 2 + ((y - cy) / self.nose_axes[1]) ** 2
        return self.nose_axes[2] * np.clip(1.0 - d2, 0.0, None) ** 1.5

    # -- painting ---------------------------------------------------------
    def lip_center(self, x: np.ndarray) -> np.ndarray:
        u = (x - self.mouth_x) / self.mouth_w
        return self.mouth_y + self.smile * u * u

    def base_skin(self, points: np.ndarray) -> np.ndarray:
        """Skin with nose and cheek tints; what a de-featured texture captures."""
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        rgb = np.tile(self.skin_rgb, (len(pts), 1))
        d2n = ((x - self.nose_center[0]) / self.nose_axes[0]) ** 2 + \
            ((y - self.nose_center[1]) / self.nose_axes[1]) ** 2
        rgb *= (1.0 - self.nose_tint * _smooth_disc(d2n, feather=0.5))[:, None]
        for sx in (-1.0, 1.0):
            d2 = ((x - sx * 0.26) / 0.095) ** 2 + ((y + 0.08) / 0.085) ** 2
            rgb *= (1.0 - self.cheek_tint * _smooth_disc(d2))[:, None]
        return rgb

    def feature_layers(self, points: np.ndarray, drop: float | None = None):
        """Yield (weight, color) layers in paint order, nearest-skin first."""
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        drop = self.drop if drop is None else float(drop)
        layers: list[tuple[np.ndarray, np.ndarray]] = []

        for i, sx in enumerate((-1.0, 1.0)):
            d2 = ((x - sx * self.eye_dx) / self.eye_rx) ** 2 + ((y - self.eye_y) / self.eye_ry) ** 2
            layers.append((_smooth_disc(d2), EYE_RGB))
            by = self.brow_y[i]
            wb = _band(y, by - self.brow_h, by + self.brow_h) * \
                _band(x * sx, self.eye_dx - 0.075, self.eye_dx + 0.075, feather=0.02)
            layers.append((wb, BROW_RGB))

        for sx in (-1.0, 1.0):
            r = np.sqrt(((x - sx * self.eye_dx) / 0.085) ** 2 + ((y - self.eye_y) / 0.070) ** 2)
            ring = np.clip(1.0 - np.abs(r - 1.0) / 0.16, 0.0, 1.0)
            layers.append((ring * self.glasses_strength, GLASSES_RGB))

        yc = self.lip_center(x)
        in_w = _band(x, self.mouth_x - self.mouth_w, self.mouth_x + self.mouth_w, feather=0.02)
        layers.append((_band(y - yc, 0.0, self.lip_u) * in_w, self.lip_rgb))
        xl = x - self.jaw_side
        ycl = self.lip_center(xl)
        in_wl = _band(xl, self.mouth_x - self.mouth_w, self.mouth_x + self.mouth_w, feather=0.02)
        layers.append((_band(y - ycl, -drop - self.lip_l, -drop) * in_wl, self.lip_rgb))
        if self.mouth_open and drop > 0.0:
            cav = _band(y - ycl, -drop, 0.0) * \
                _band(xl, self.mouth_x - 0.85 * self.mouth_w,
                      self.mouth_x + 0.85 * self.mouth_w, feather=0.01)
            layers.append((cav, CAVITY_RGB))

        chin = _band(-y, 0.32 + drop, 0.58) * _band(x, -0.30, 0.30, feather=0.05)
        layers.append((chin * self.beard_strength, HAIR_BASE))
        return layers

    def paint_decomposed(self, points: np.ndarray, drop: float | None = None):
        """Return (base, survival, features) with full = base*survival + features.

        ``survival`` is the product of (1 - w) over feature layers; ``features``
        is the premultiplied feature color. A texture-backed render substitutes
        its own base while reusing survival and features unchanged.
        """
        pts = np.atleast_2d(points)
        base = self.base_skin(pts)
        survival = np.ones(len(pts))
        features = np.zeros((len(pts), 3))
        for w, color in self.feature_layers(pts, drop):
            features = features * (1.0 - w[:, None]) + color[None, :] * w[:, None]
            survival = survival * (1.0 - w)
        return base, survival, features

    def paint(self, points: np.ndarray, drop: float | None = None) -> np.ndarray:
        """Full surface color at head-frame points (N,3)."""
        base, survival, features = self.paint_decomposed(points, drop)
        return base * survival[:, None] + features

    def cavity_mask(self, points: np.ndarray, drop: float | None = None) -> np.ndarray:
        """Boolean mouth-interior test for painted surface points."""
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        drop = self.drop if drop is None else float(drop)
        if not self.mouth_open or drop <= 0.0:
            return np.zeros(len(pts), dtype=bool)
        xl = x - self.jaw_side
        ycl = self.lip_center(xl)
        rel = y - ycl
        inside = (rel > -drop) & (rel < 0.0) & (np.abs(xl - self.mouth_x) < 0.85 * self.mouth_w)
        return inside

    def backdrop_rgb(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Low-contrast backdrop pattern at plane coordinates (head frame)."""
        pattern = 0.015 * np.cos(2.3 * x) * np.sin(1.9 * y + 0.3)
        rgb = BACKDROP_BASE[None, :] + pattern[:, None]
        rgb = rgb + self.backdrop_tint * np.array([1.0, 0.4, -0.6])[None, :]
        return np.clip(rgb, 0.0, 1.0)
