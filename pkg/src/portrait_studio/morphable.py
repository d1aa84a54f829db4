"""Morphable head mesh, software rasterizer, fitting and expression transfer.

The mesh is a front-facing shell over the shared face layout: a longitude /
latitude grid displaced to the head ellipsoid plus the nose bump. Vertex
positions are linear in the identity coefficients (a finite-difference
identity basis around the neutral head). The expression block moves the
painted features rather than the geometry at this scale (its geometric basis
is zero), and the jaw block articulates the rows below the lip seam; the seam
row is duplicated, so an open jaw exposes an uncovered gap between the lips,
which is exactly the disocclusion region reported as the mouth mask.

Head angles are composed into the camera, the same rigid-transform convention
the synthetic world uses, so the two render paths agree pixel-for-pixel at
the true parameters. That agreement is what makes analysis-by-synthesis
fitting well posed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import facegeo
from .camera import CameraPose, camera_frame, check_resolution, project_points
from .errors import InvalidInputError, NumericalError
from .facegeo import FaceLayout
from .nn import AdamState, adam_step
from .world import WorldImage

GRID = 17
SEAM_ROW = 5            # latitude row carrying the lip seam (0 = chin side)
RIM_HALF_SPAN = 4       # seam columns within this span of center form the mouth rim
TEXTURE_RES = 128

_LIGHT = np.array([0.0, 0.5, 0.85]) / np.linalg.norm([0.0, 0.5, 0.85])
_PHI_MAX = np.deg2rad(75.0)
_LAM_MIN, _LAM_MAX = np.deg2rad(-78.0), np.deg2rad(82.0)


@dataclass(frozen=True)
class MorphParams:
    """Identity, expression and the 6-component pose (head angles + jaw block)."""

    beta: np.ndarray
    theta_exp: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "theta_exp", np.asarray(self.theta_exp, dtype=np.float64))
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=np.float64))
        if self.psi.shape != (6,):
            raise InvalidInputError("psi must have 6 components")

    @property
    def jaw(self) -> np.ndarray:
        return self.psi[3:6]

    def layout(self, alpha: np.ndarray | None = None) -> FaceLayout:
        a = np.zeros(facegeo.D_ATTR) if alpha is None else alpha
        return FaceLayout(self.beta, self.theta_exp, self.jaw, a)

    @staticmethod
    def from_factors(f) -> "MorphParams":
        return MorphParams(f.beta.copy(), f.theta_exp.copy(), f.psi.copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.theta_exp, self.psi])

    @staticmethod
    def from_vector(v: np.ndarray) -> "MorphParams":
        d1, d2 = facegeo.D_ID, facegeo.D_EXP
        return MorphParams(v[:d1].copy(), v[d1:d1 + d2].copy(), v[d1 + d2:d1 + d2 + 6].copy())


def transfer_params(src: MorphParams, tgt: MorphParams) -> MorphParams:
    """Source identity, target expression, source head angles, target jaw."""
    psi = np.concatenate([src.psi[0:3], tgt.psi[3:6]])
    return MorphParams(src.beta.copy(), tgt.theta_exp.copy(), psi)


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------

def _grid_uv(grid: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.repeat(np.arange(grid), grid) / (grid - 1)   # longitude, column-major id
    v = np.tile(np.arange(grid), grid) / (grid - 1)     # latitude, row within column
    return u, v


def _shell_positions(beta: np.ndarray, grid: int) -> np.ndarray:
    """Analytic shell for one identity: ellipsoid radius plus the nose bump."""
    lay = FaceLayout(beta, np.zeros(facegeo.D_EXP), np.zeros(3), np.zeros(facegeo.D_ATTR))
    u, v = _grid_uv(grid)
    phi = (u - 0.5) * 2.0 * _PHI_MAX
    lam = _LAM_MIN + v * (_LAM_MAX - _LAM_MIN)
    n = np.stack([np.sin(phi) * np.cos(lam), np.sin(lam), np.cos(phi) * np.cos(lam)], axis=1)
    inv_r = np.sqrt(((n / lay.head_axes) ** 2).sum(axis=1))
    pts = n / inv_r[:, None]
    bump = lay.nose_bump(pts[:, 0], pts[:, 1]) * (pts[:, 2] > 0.0)
    return pts + np.array([0.0, 0.0, 1.0])[None, :] * bump[:, None]


class MeshBases:
    """Neutral shell, linear identity basis, fixed topology with a lip seam."""

    def __init__(self, grid: int = GRID):
        self.grid = g = grid
        base_core = _shell_positions(np.zeros(facegeo.D_ID), g)
        eps = 0.5
        basis_core = np.stack([
            (_shell_positions(eps * np.eye(facegeo.D_ID)[k], g) - base_core) / eps
            for k in range(facegeo.D_ID)])

        # duplicate the seam row; the copies live at ids nv .. nv+g-1
        nv = g * g
        self.seam_upper = np.array([SEAM_ROW + c * g for c in range(g)])
        self.seam_lower = np.arange(nv, nv + g)
        self.n_verts = nv + g
        self.base = np.concatenate([base_core, base_core[self.seam_upper]], axis=0)
        self.identity_basis = np.concatenate(
            [basis_core, basis_core[:, self.seam_upper]], axis=1)
        self.expression_basis = np.zeros((facegeo.D_EXP, self.n_verts, 3))

        u, v = _grid_uv(g)
        self.uv = np.stack([u, v], axis=1)
        self.uv = np.concatenate([self.uv, self.uv[self.seam_upper]], axis=0)

        # jaw articulation: tapered by longitude so the lip gap closes toward
        # the cheeks, and graded by row so the chin silhouette stays put (the
        # analytic world articulates the mouth in paint space, not geometry)
        phi_col = (np.arange(g) / (g - 1) - 0.5) * 2.0 * _PHI_MAX
        taper_col = np.clip(np.cos(1.5 * phi_col), 0.0, 1.0)
        row_grade = np.zeros(g)
        row_grade[:SEAM_ROW] = [0.0, 0.0, 0.1, 0.3, 0.65][:SEAM_ROW]
        self.taper = np.zeros(self.n_verts)
        for c in range(g):
            self.taper[c * g:c * g + SEAM_ROW] = taper_col[c] * row_grade[:SEAM_ROW]
        self.taper[self.seam_lower] = taper_col
        self.jaw_ids = np.flatnonzero(self.taper > 0.0)

        lower_of = dict(zip(self.seam_upper.tolist(), self.seam_lower.tolist()))
        tris = []
        for c in range(g - 1):
            for r in range(g - 1):
                i00 = r + c * g
                i01 = (r + 1) + c * g
                i10 = r + (c + 1) * g
                i11 = (r + 1) + (c + 1) * g
                if r + 1 == SEAM_ROW:  # quad below the seam: top edge uses the copies
                    i01 = lower_of[i01]
                    i11 = lower_of[i11]
                tris.append((i00, i10, i11))
                tris.append((i00, i11, i01))
        self.tris = np.array(tris, dtype=np.int64)

        center = g // 2
        rim_cols = np.arange(center - RIM_HALF_SPAN, center + RIM_HALF_SPAN + 1)
        self.rim_ids = np.concatenate([self.seam_upper[rim_cols], self.seam_lower[rim_cols]])
        self.labels = {
            "face": np.arange(self.n_verts),
            "mouth_rim": self.rim_ids,
            "jaw": self.jaw_ids,
        }


_bases_cache: dict[int, MeshBases] = {}


def mesh_bases(grid: int = GRID) -> MeshBases:
    if grid not in _bases_cache:
        _bases_cache[grid] = MeshBases(grid)
    return _bases_cache[grid]


@dataclass
class FaceMesh:
    """Articulated head-frame mesh; painting happens at articulated positions,
    with the layout's own jaw drop, exactly like the volumetric world."""

    verts: np.ndarray        # (V, 3) articulated positions
    canonical: np.ndarray    # (V, 3) pre-articulation positions (texture anchors)
    tris: np.ndarray
    uv: np.ndarray
    shade: np.ndarray        # (V,) per-vertex light factor
    labels: dict[str, np.ndarray]

    def __post_init__(self):
        if self.tris.max() >= len(self.verts):
            raise InvalidInputError("triangle index out of range")


def build_mesh(params: MorphParams, alpha: np.ndarray | None = None,
               grid: int = GRID) -> FaceMesh:
    bases = mesh_bases(grid)
    lay = params.layout(alpha)
    canonical = bases.base + np.tensordot(params.beta, bases.identity_basis, axes=1) \
        + np.tensordot(params.theta_exp, bases.expression_basis, axes=1)
    verts = canonical.copy()
    verts[:, 1] -= lay.drop * bases.taper
    verts[:, 0] += lay.jaw_side * bases.taper

    normal = canonical / (lay.head_axes[None, :] ** 2)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True) + 1e-12
    shade = 0.82 + 0.18 * np.clip(normal @ _LIGHT, 0.0, None)
    return FaceMesh(verts, canonical, bases.tris, bases.uv, shade, bases.labels)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

@dataclass
class RasterOut:
    cov: np.ndarray          # (res, res) coverage fraction in [0, 1]
    surface: np.ndarray      # (res, res, 3) interpolated articulated positions
    uv: np.ndarray           # (res, res, 2)
    shade: np.ndarray        # (res, res)
    depth: np.ndarray        # (res, res) camera distance, inf where empty
    gap: np.ndarray          # (res, res) fraction inside the rim hull but uncovered
    skipped_triangles: int = 0


def total_pose(cam: CameraPose, psi: np.ndarray) -> CameraPose:
    """Head angles composed into the camera (the world's rigid-pose convention)."""
    return CameraPose(cam.yaw + psi[0], cam.pitch + psi[1], cam.roll + psi[2], cam.radius)


def _edge(a, b, pr, pc):
    return (b[:, 0, None] - a[:, 0, None]) * (pc - a[:, 1, None]) - \
           (b[:, 1, None] - a[:, 1, None]) * (pr - a[:, 0, None])


def rasterize(mesh: FaceMesh, cam: CameraPose, psi: np.ndarray, res: int,
              supersample: int = 2) -> RasterOut:
    """Z-buffered rasterization with interpolated canonical/uv/shade channels."""
    check_resolution(res)
    ss = supersample
    n = res * ss
    pose = total_pose(cam, psi)
    pix, in_front = project_points(mesh.verts, pose, n)
    origin, _ = camera_frame(pose)
    dist = np.linalg.norm(mesh.verts - origin[None, :], axis=1)

    tri = mesh.tris
    p0, p1, p2 = pix[tri[:, 0]], pix[tri[:, 1]], pix[tri[:, 2]]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - \
           (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    visible = in_front[tri].all(axis=1)
    ok = visible & (np.abs(area) > 1e-12)
    skipped = int(np.count_nonzero(visible & ~ok))

    cand_px, cand_tri, cand_bary = _raster_candidates(
        p0[ok], p1[ok], p2[ok], area[ok], n)
    tri_ok = tri[ok]

    out_tri = np.full(n * n, -1, dtype=np.int64)
    out_bary = np.zeros((n * n, 3))
    zfill = np.full(n * n, np.inf)
    if cand_px.size:
        z = (dist[tri_ok[cand_tri]] * cand_bary).sum(axis=1)
        order = np.lexsort((z, cand_px))
        px_sorted = cand_px[order]
        first = np.concatenate(([True], px_sorted[1:] != px_sorted[:-1]))
        sel = order[first]
        out_tri[cand_px[sel]] = cand_tri[sel]
        out_bary[cand_px[sel]] = cand_bary[sel]
        zfill[cand_px[sel]] = z[sel]

    covered = out_tri >= 0
    surface = np.zeros((n * n, 3))
    uv = np.zeros((n * n, 2))
    shade = np.zeros(n * n)
    if covered.any():
        t_idx = tri_ok[out_tri[covered]]
        b = out_bary[covered]
        surface[covered] = np.einsum("nk,nkc->nc", b, mesh.verts[t_idx])
        uv[covered] = np.einsum("nk,nkc->nc", b, mesh.uv[t_idx])
        shade[covered] = (mesh.shade[t_idx] * b).sum(axis=1)

    rim_pix = pix[mesh.labels["mouth_rim"]]
    hull = _convex_hull_mask(rim_pix, n) if len(rim_pix) >= 3 else np.zeros(n * n, bool)
    gap = hull & ~covered

    cov_f = covered.astype(np.float64).reshape(res, ss, res, ss)
    cov = cov_f.mean(axis=(1, 3))
    weight = np.maximum(cov_f.sum(axis=(1, 3)), 1e-12)
    surface_img = surface.reshape(res, ss, res, ss, 3).sum(axis=(1, 3)) / weight[:, :, None]
    uv_img = uv.reshape(res, ss, res, ss, 2).sum(axis=(1, 3)) / weight[:, :, None]
    shade_img = shade.reshape(res, ss, res, ss).sum(axis=(1, 3)) / weight
    depth = zfill.reshape(res, ss, res, ss).min(axis=(1, 3))
    gap_frac = gap.astype(np.float64).reshape(res, ss, res, ss).mean(axis=(1, 3))
    return RasterOut(cov, surface_img, uv_img, shade_img, depth, gap_frac, skipped)


def _raster_candidates(p0, p1, p2, area, n):
    """Vectorized bbox scan producing (pixel, triangle, barycentric) hits."""
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if len(p0) == 0:
        return empty
    lo = np.maximum(np.ceil(np.minimum(np.minimum(p0, p1), p2)), 0).astype(np.int64)
    hi = np.minimum(np.floor(np.maximum(np.maximum(p0, p1), p2)), n - 1).astype(np.int64)
    spans_r = hi[:, 0] - lo[:, 0] + 1
    spans_c = hi[:, 1] - lo[:, 1] + 1
    keep = (spans_r > 0) & (spans_c > 0)
    if not keep.any():
        return empty
    p0, p1, p2, area, lo, hi = p0[keep], p1[keep], p2[keep], area[keep], lo[keep], hi[keep]
    side_r = int((hi[:, 0] - lo[:, 0]).max() + 1)
    side_c = int((hi[:, 1] - lo[:, 1]).max() + 1)
    shape = (len(p0), side_r, side_c)
    gr = np.arange(side_r)[None, :, None]
    gc = np.arange(side_c)[None, None, :]
    rows = np.broadcast_to(lo[:, 0, None, None] + gr, shape)
    cols = np.broadcast_to(lo[:, 1, None, None] + gc, shape)
    valid = (rows <= hi[:, 0, None, None]) & (cols <= hi[:, 1, None, None])

    pr = rows.astype(np.float64).reshape(len(p0), -1)
    pc = cols.astype(np.float64).reshape(len(p0), -1)
    b0 = _edge(p1, p2, pr, pc) / area[:, None]
    b1 = _edge(p2, p0, pr, pc) / area[:, None]
    b2 = _edge(p0, p1, pr, pc) / area[:, None]
    inside = valid.reshape(len(p0), -1) & (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    t_idx, flat = np.nonzero(inside)
    if not t_idx.size:
        return empty
    px = rows.reshape(len(p0), -1)[t_idx, flat] * n + cols.reshape(len(p0), -1)[t_idx, flat]
    bary = np.stack([b0[t_idx, flat], b1[t_idx, flat], b2[t_idx, flat]], axis=1)
    remap = np.flatnonzero(keep)
    return px, remap[t_idx], bary


def _convex_hull_mask(points: np.ndarray, n: int) -> np.ndarray:
    """Filled convex hull of (row, col) points over an n x n grid, flat bools."""
    pts = np.unique(points, axis=0)
    if len(pts) < 3:
        return np.zeros(n * n, dtype=bool)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def chain(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and np.cross(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = chain(list(pts))
    upper = chain(list(pts[::-1]))
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        return np.zeros(n * n, dtype=bool)

    lo = np.maximum(np.floor(hull.min(axis=0)), 0).astype(int)
    hi = np.minimum(np.ceil(hull.max(axis=0)), n - 1).astype(int)
    if (hi < lo).any():
        return np.zeros(n * n, dtype=bool)
    rr = np.arange(lo[0], hi[0] + 1)
    cc = np.arange(lo[1], hi[1] + 1)
    pr, pc = np.meshgrid(rr, cc, indexing="ij")
    inside = np.ones(pr.shape, dtype=bool)
    m = len(hull)
    for i in range(m):
        a, b = hull[i], hull[(i + 1) % m]
        cross = (b[0] - a[0]) * (pc - a[1]) - (b[1] - a[1]) * (pr - a[0])
        inside &= cross >= 0.0
    mask = np.zeros((n, n), dtype=bool)
    mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1] = inside
    return mask.reshape(-1)


# ---------------------------------------------------------------------------
# texture extraction and template rendering
# ---------------------------------------------------------------------------

@dataclass
class TextureMap:
    """UV-space skin colors sampled from a source image (features removed)."""

    rgb: np.ndarray          # (TEXTURE_RES, TEXTURE_RES, 3)
    valid: np.ndarray        # bool, True where directly observed

    def sample(self, uv: np.ndarray) -> np.ndarray:
        """Bilinear lookup at uv in [0,1]^2; uv rows are (u, v)."""
        r = TEXTURE_RES - 1
        x = np.clip(uv[:, 0], 0, 1) * r
        y = np.clip(uv[:, 1], 0, 1) * r
        ix = np.minimum(x.astype(int), r - 1)
        iy = np.minimum(y.astype(int), r - 1)
        fx = (x - ix)[:, None]
        fy = (y - iy)[:, None]
        t = self.rgb
        return (t[ix, iy] * (1 - fx) * (1 - fy) + t[ix, iy + 1] * (1 - fx) * fy +
                t[ix + 1, iy] * fx * (1 - fy) + t[ix + 1, iy + 1] * fx * fy)


@dataclass
class TemplateRender:
    """Expression-transferred render: textured face plus face / mouth masks."""

    rgb: np.ndarray
    face_mask: np.ndarray
    mouth_mask: np.ndarray
    cam: CameraPose | None = None
    psi: np.ndarray | None = None

    def __post_init__(self):
        if (self.face_mask & self.mouth_mask).any():
            raise InvalidInputError("face and mouth masks must be disjoint")


def _texel_geometry(params: MorphParams, lay: FaceLayout, grid: int = GRID):
    """Canonical and articulated positions for every texel of the UV grid."""
    bases = mesh_bases(grid)
    g = grid
    t = np.linspace(0.0, 1.0, TEXTURE_RES)
    uu, vv = np.meshgrid(t, t, indexing="ij")
    core = bases.base[:g * g].reshape(g, g, 3)
    core = core + np.tensordot(params.beta,
                               bases.identity_basis[:, :g * g].reshape(facegeo.D_ID, g, g, 3),
                               axes=1)
    x = uu * (g - 1)
    y = vv * (g - 1)
    ix = np.minimum(x.astype(int), g - 2)
    iy = np.minimum(y.astype(int), g - 2)
    fx = (x - ix)[..., None]
    fy = (y - iy)[..., None]
    canonical = (core[ix, iy] * (1 - fx) * (1 - fy) + core[ix, iy + 1] * (1 - fx) * fy +
                 core[ix + 1, iy] * fx * (1 - fy) + core[ix + 1, iy + 1] * fx * fy)
    canonical = canonical.reshape(-1, 3)

    taper_col = np.clip(np.cos(1.5 * (t - 0.5) * 2.0 * _PHI_MAX), 0.0, 1.0)
    row_f = vv.reshape(-1) * (g - 1)
    grade = np.interp(row_f, [0.0, 1.0, 2.0, 3.0, 4.0, SEAM_ROW], [0.0, 0.0, 0.1, 0.3, 0.65, 1.0])
    grade[row_f >= SEAM_ROW] = 0.0  # texels at or above the seam follow the upper lip
    art = canonical.copy()
    taper_tex = np.repeat(taper_col, TEXTURE_RES) * grade
    art[:, 1] -= lay.drop * taper_tex
    art[:, 0] += lay.jaw_side * taper_tex
    return canonical, art


def extract_texture(image: np.ndarray | WorldImage, params: MorphParams,
                    cam: CameraPose = CameraPose(0.0, 0.0),
                    alpha: np.ndarray | None = None) -> TextureMap:
    """Sample de-featured skin colors from the image into UV space.

    Feature regions (eyes, brows, lips, glasses, beard) and texels occluded at
    the fitted pose are marked invalid and filled from the nearest valid texel.
    """
    img = image.rgb if isinstance(image, WorldImage) else np.asarray(image)
    res = img.shape[0]
    lay = params.layout(alpha)
    canonical, art = _texel_geometry(params, lay)
    pose = total_pose(cam, params.psi)
    pix, in_front = project_points(art, pose, res)

    mesh = build_mesh(params, alpha)
    raster = rasterize(mesh, cam, params.psi, res)
    origin, _ = camera_frame(pose)
    t_dist = np.linalg.norm(art - origin[None, :], axis=1)

    rows = np.clip(pix[:, 0], 0, res - 1)
    cols = np.clip(pix[:, 1], 0, res - 1)
    ir = np.minimum(rows.astype(int), res - 2)
    ic = np.minimum(cols.astype(int), res - 2)
    fr = (rows - ir)[:, None]
    fc = (cols - ic)[:, None]
    sampled = (img[ir, ic] * (1 - fr) * (1 - fc) + img[ir, ic + 1] * (1 - fr) * fc +
               img[ir + 1, ic] * fr * (1 - fc) + img[ir + 1, ic + 1] * fr * fc)

    zref = raster.depth[np.clip(np.round(pix[:, 0]).astype(int), 0, res - 1),
                        np.clip(np.round(pix[:, 1]).astype(int), 0, res - 1)]
    visible = in_front & np.isfinite(zref) & (t_dist <= zref + 0.03)
    _, survival, _ = lay.paint_decomposed(art)
    skin_like = survival > 0.85
    valid = visible & skin_like & (pix[:, 0] >= 0) & (pix[:, 0] <= res - 1) & \
        (pix[:, 1] >= 0) & (pix[:, 1] <= res - 1)

    rgb = sampled.reshape(TEXTURE_RES, TEXTURE_RES, 3)
    valid = valid.reshape(TEXTURE_RES, TEXTURE_RES)
    if not valid.all():
        if valid.any():
            _, (inds_r, inds_c) = ndimage.distance_transform_edt(
                ~valid, return_indices=True)
            rgb = rgb[inds_r, inds_c]
        else:
            rgb = np.tile(lay.skin_rgb, (TEXTURE_RES, TEXTURE_RES, 1))
    return TextureMap(rgb, valid)


def render_template(params: MorphParams, tex: TextureMap, res: int,
                    cam: CameraPose = CameraPose(0.0, 0.0),
                    alpha: np.ndarray | None = None,
                    supersample: int = 2) -> TemplateRender:
    """Rasterize the articulated mesh, textured skin plus re-painted features.

    The face mask covers textured pixels; the mouth mask is the disocclusion
    gap inside the rim hull, left untextured for downstream in-painting.
    """
    check_resolution(res)
    mesh = build_mesh(params, alpha)
    raster = rasterize(mesh, cam, params.psi, res, supersample)
    lay = params.layout(alpha)

    face = raster.cov >= 0.5
    mouth = (raster.gap >= 0.5) & ~face
    rgb = np.zeros((res, res, 3))
    if face.any():
        pts = raster.surface[face]
        base, survival, features = lay.paint_decomposed(pts)
        skin = tex.sample(raster.uv[face])
        shade = raster.shade[face][:, None]
        rgb[face] = np.clip(skin * survival[:, None] + features * shade, 0.0, 1.0)
    return TemplateRender(rgb, face, mouth, cam=cam, psi=params.psi.copy())


# ---------------------------------------------------------------------------
# appearance estimation and parameter fitting
# ---------------------------------------------------------------------------

def estimate_appearance(image: WorldImage) -> np.ndarray:
    """Coarse appearance readout used to color the fitting render (age only)."""
    alpha = np.zeros(facegeo.D_ATTR)
    if image.face_mask.any():
        lum = image.rgb[image.face_mask].mean()
        neutral = FaceLayout(np.zeros(8), np.zeros(8), np.zeros(3), alpha)
        ref = float((neutral.skin_rgb * 0.92).mean())  # mean shading factor ~0.92
        k = np.clip(lum / max(ref, 1e-6), 0.8, 1.2)
        alpha[0] = np.arctanh(np.clip((1.0 - k) / 0.10, -0.95, 0.95))
    return alpha


def _fit_render(params: MorphParams, alpha: np.ndarray, cam: CameraPose,
                res: int, supersample: int) -> tuple[np.ndarray, RasterOut]:
    mesh = build_mesh(params, alpha)
    raster = rasterize(mesh, cam, params.psi, res, supersample)
    lay = params.layout(alpha)
    rgb = np.zeros((res, res, 3))
    covered = raster.cov > 0.0
    if covered.any():
        pts = raster.surface[covered]
        base, survival, features = lay.paint_decomposed(pts)
        shade = raster.shade[covered][:, None]
        rgb[covered] = (base * survival[:, None] + features) * shade
    return rgb, raster


def _fit_loss(params: MorphParams, alpha: np.ndarray, image: WorldImage,
              cam: CameraPose, res: int, supersample: int = 2) -> float:
    rgb, raster = _fit_render(params, alpha, cam, res, supersample)
    scale = image.rgb.shape[0] // res
    target = image.rgb if scale == 1 else \
        image.rgb.reshape(res, scale, res, scale, 3).mean(axis=(1, 3))
    face = image.face_mask if scale == 1 else \
        image.face_mask.reshape(res, scale, res, scale).mean(axis=(1, 3)) > 0.5
    mouth = image.mouth_mask if scale == 1 else \
        image.mouth_mask.reshape(res, scale, res, scale).mean(axis=(1, 3)) > 0.25

    # interior photometric term: stay off the faceted silhouette, and weight
    # dark feature pixels up so the small feature coefficients stay observable
    cov = raster.cov
    interior = ndimage.binary_erosion(face & (cov >= 1.0), iterations=1) & ~mouth
    if interior.any():
        lum = target[interior].mean(axis=1)
        wgt = 1.0 + 20.0 * np.clip(0.55 - lum, 0.0, None)
        err = ((rgb[interior] - target[interior]) ** 2).mean(axis=1)
        photo = float((wgt * err).sum() / wgt.sum())
    else:
        photo = 1.0
    sil = float(((cov - (face & ~mouth)) ** 2).mean())
    mouth_iou = float(((raster.gap - mouth) ** 2).mean())
    return photo + 0.3 * sil + 1.0 * mouth_iou


_FIT_EPS = np.concatenate([
    np.full(facegeo.D_ID, 0.05), np.full(facegeo.D_EXP, 0.05),
    [0.01, 0.01, 0.01], np.full(3, 0.04)])


def fit_params(image: WorldImage, init: MorphParams, steps: int = 90,
               cam: CameraPose = CameraPose(0.0, 0.0)) -> MorphParams:
    """Analysis-by-synthesis fit by Adam on central-difference gradients.

    A coarse yaw/pitch grid seeds the pose, then two refinement stages run at
    increasing resolution. Raises when the loss turns non-finite.
    """
    alpha = estimate_appearance(image)
    vec = init.as_vector().copy()

    # pose grid seeding at coarse resolution
    best = (np.inf, vec[16], vec[17])
    for yaw in np.linspace(-0.4, 0.4, 9):
        for pitch in np.linspace(-0.25, 0.25, 5):
            probe = vec.copy()
            probe[16], probe[17] = yaw, pitch
            loss = _fit_loss(MorphParams.from_vector(probe), alpha, image, cam, 32, 1)
            if loss < best[0]:
                best = (loss, yaw, pitch)
    vec[16], vec[17] = best[1], best[2]

    stage_plan = [(32, max(steps * 2 // 3, 1), 0.06), (64, max(steps // 3, 1), 0.025)]
    trace = []
    for res, n_steps, lr in stage_plan:
        state = AdamState(lr=lr)
        for _ in range(n_steps):
            base_loss = _fit_loss(MorphParams.from_vector(vec), alpha, image, cam, res)
            if not np.isfinite(base_loss):
                raise NumericalError(f"fitting diverged; loss trace {trace[-5:]}")
            trace.append(base_loss)
            grad = np.zeros_like(vec)
            for i in range(len(vec)):
                e = _FIT_EPS[i]
                up, dn = vec.copy(), vec.copy()
                up[i] += e
                dn[i] -= e
                grad[i] = (_fit_loss(MorphParams.from_vector(up), alpha, image, cam, res)
                           - _fit_loss(MorphParams.from_vector(dn), alpha, image, cam, res)) / (2 * e)
            if np.linalg.norm(grad) < 1e-7:
                break
            state, vec = adam_step(state, vec, grad)
        if steps == 0:
            break
    if steps == 0:
        return init
    return MorphParams.from_vector(vec)
