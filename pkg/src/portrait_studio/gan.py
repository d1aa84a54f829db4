"""Tri-plane volumetric generator: mapping, plane synthesis, decode, rendering.

The generator is latent-to-scene: the intermediate latent fixes the whole
radiance field (including head orientation), and the camera only chooses a
viewpoint. Rendering integrates emission-absorption along per-pixel rays with
a fixed stratified jitter, so repeated renders are bit-identical.

Ray geometry and bilinear plane-sampling index structures depend only on
(pose, resolution, sample count); they are cached so optimization loops that
re-render from a fixed viewpoint pay for them once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import FAR, NEAR, CameraPose, check_resolution, ray_grid
from .errors import InvalidInputError
from .nn import MLPParams, mlp_apply, mlp_init
from .tensor import Tensor, concat, custom_op, scatter_rows

D_Z = 32
D_W = 32
PLANE_C = 16
PLANE_R = 32
N_SAMPLES = 48
TRUNCATION_POOL = 4096


@dataclass
class TriPlanes:
    """Three feature planes over the world cube, stored as (3, R, R, C)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3 or \
                self.data.shape[1] != self.data.shape[2]:
            raise InvalidInputError(f"bad tri-plane shape {self.data.shape}")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def as_crr(self) -> np.ndarray:
        """Planes in the documented (3, C, R, R) order."""
        return np.ascontiguousarray(self.data.transpose(0, 3, 1, 2))


@dataclass
class GeneratorParams:
    """All trainable arrays of the generator, addressable by name."""

    mapping: MLPParams
    synthesis: MLPParams
    decoder: MLPParams
    background: np.ndarray  # (3,) pre-sigmoid logits
    plane_r: int = PLANE_R
    plane_c: int = PLANE_C
    n_samples: int = N_SAMPLES
    _w_mean: np.ndarray | None = field(default=None, repr=False)

    @staticmethod
    def init(seed: int, dtype=np.float32, synth_hidden: int = 128,
             plane_r: int = PLANE_R, plane_c: int = PLANE_C) -> "GeneratorParams":
        rng = np.random.default_rng(np.uint64(seed) + np.uint64(0x3D6A17))
        mapping = mlp_init([D_Z, 64, 64, D_W], rng, dtype=dtype)
        out = 3 * plane_r * plane_r * plane_c
        synthesis = mlp_init([D_W, synth_hidden, synth_hidden, out], rng,
                             scale=0.5, dtype=dtype)
        # softsign is much cheaper than tanh at render-path volume
        decoder = mlp_init([plane_c, 32, 4], rng, dtype=dtype, activation="softsign")
        background = np.zeros(3, dtype=dtype)
        return GeneratorParams(mapping, synthesis, decoder, background,
                               plane_r=plane_r, plane_c=plane_c)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.mapping.arrays("mapping"))
        out.update(self.synthesis.arrays("synthesis"))
        out.update(self.decoder.arrays("decoder"))
        out["background"] = self.background
        return out

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for a in self.arrays().values())

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.mapping.copy(), self.synthesis.copy(),
                               self.decoder.copy(), self.background.copy(),
                               self.plane_r, self.plane_c, self.n_samples,
                               None if self._w_mean is None else self._w_mean.copy())

    def astype(self, dtype) -> "GeneratorParams":
        g = self.copy()
        for mlp in (g.mapping, g.synthesis, g.decoder):
            mlp.weights = [w.astype(dtype) for w in mlp.weights]
            mlp.biases = [b.astype(dtype) for b in mlp.biases]
        g.background = g.background.astype(dtype)
        return g

    def state_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.arrays()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays()[name]).tobytes())
        return h.hexdigest()

    def pack(self, groups: tuple[str, ...] = ("mapping", "synthesis", "decoder", "background")) -> dict[str, Tensor]:
        """Tensor-wrap the named parameter groups for gradient computation."""
        out = {}
        for name, arr in self.arrays().items():
            if name.split(".")[0] in groups:
                out[name] = Tensor(arr, requires_grad=True)
        return out


def _mlp_io(params: MLPParams, prefix: str, pack: dict[str, Tensor] | None):
    if not pack:
        return None, None
    n = len(params.weights)
    ws, bs, hit = [], [], False
    for i in range(n):
        w = pack.get(f"{prefix}.w{i}")
        b = pack.get(f"{prefix}.b{i}")
        hit = hit or w is not None or b is not None
        ws.append(w if w is not None else Tensor(params.weights[i]))
        bs.append(b if b is not None else Tensor(params.biases[i]))
    return (ws, bs) if hit else (None, None)


def map_latent(gen: GeneratorParams, z, pack: dict[str, Tensor] | None = None) -> Tensor:
    """Mapping network; deterministic and differentiable in z and its weights."""
    z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=gen.background.dtype))
    if z_t.shape[-1] != D_Z:
        raise InvalidInputError(f"latent z must have width {D_Z}")
    ws, bs = _mlp_io(gen.mapping, "mapping", pack)
    return mlp_apply(gen.mapping, z_t, weights=ws, biases=bs)


def synthesize_planes(gen: GeneratorParams, w, pack: dict[str, Tensor] | None = None) -> Tensor:
    """w-conditioned plane features, shape (3, R, R, C) on the graph."""
    w_t = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=gen.background.dtype))
    ws, bs = _mlp_io(gen.synthesis, "synthesis", pack)
    flat = mlp_apply(gen.synthesis, w_t, weights=ws, biases=bs)
    r, c = gen.plane_r, gen.plane_c
    return flat.reshape(3, r, r, c)


def synthesize_triplanes(gen: GeneratorParams, w, pack: dict[str, Tensor] | None = None) -> TriPlanes:
    return TriPlanes(synthesize_planes(gen, w, pack).data)


# ---------------------------------------------------------------------------
# plane sampling
# ---------------------------------------------------------------------------

_PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ projections


class PlaneSampler:
    """Bilinear sampling of the three planes as one fixed sparse operator.

    For a fixed point set the summed bilinear lookup is linear in the plane
    values: ``feats = S @ P`` with P the (3*R*R, C) stacked plane matrix and S
    holding 12 corner weights per point. S and its transpose are prebuilt per
    ray bundle, so both directions are single sparse-dense products.
    """

    def __init__(self, points: np.ndarray, plane_r: int):
        from scipy.sparse import csr_matrix
        r = plane_r
        n = points.shape[0]
        self.n = n
        self.r = r
        self.inside = (np.abs(points) <= 1.0).all(axis=1)
        cols = np.empty((n, 12), dtype=np.int64)
        vals = np.empty((n, 12), dtype=np.float64)
        for k, (a, b) in enumerate(_PLANE_AXES):
            u = (np.clip(points[:, a], -1.0, 1.0) + 1.0) * 0.5 * (r - 1)
            v = (np.clip(points[:, b], -1.0, 1.0) + 1.0) * 0.5 * (r - 1)
            iu = np.minimum(u.astype(np.int64), r - 2)
            iv = np.minimum(v.astype(np.int64), r - 2)
            fu, fv = u - iu, v - iv
            base = k * r * r + iu * r + iv
            cols[:, 4 * k:4 * k + 4] = np.stack([base, base + 1, base + r, base + r + 1], axis=1)
            vals[:, 4 * k:4 * k + 4] = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv,
                                                 fu * (1 - fv), fu * fv], axis=1)
        indptr = np.arange(0, 12 * n + 1, 12, dtype=np.int64)
        self._raw = (vals.reshape(-1), cols.reshape(-1).astype(np.int32), indptr)
        self._mats: dict = {}

    def _ops(self, dtype):
        key = np.dtype(dtype)
        if key not in self._mats:
            from scipy.sparse import csr_matrix
            vals, cols, indptr = self._raw
            fwd = csr_matrix((vals.astype(key), cols, indptr),
                             shape=(self.n, 3 * self.r * self.r))
            self._mats[key] = [fwd, None]
        return self._mats[key]

    def _bwd(self, dtype):
        # the transposed CSR costs one sort; build it on first backward only
        ops = self._ops(dtype)
        if ops[1] is None:
            ops[1] = ops[0].T.tocsr()
        return ops[1]

    def sample(self, planes: Tensor) -> Tensor:
        """Sum of bilinear samples over the three planes -> Tensor (n, C)."""
        data = planes.data
        r, c = self.r, data.shape[3]
        fwd = self._ops(data.dtype)[0]
        feats = fwd @ data.reshape(3 * r * r, c)

        def vjp(g: np.ndarray) -> np.ndarray:
            return (self._bwd(data.dtype) @ np.ascontiguousarray(g)).reshape(data.shape)

        return custom_op(feats, [(planes, vjp)])


def _plane_sample_with_point_grads(planes: Tensor, points: Tensor, plane_r: int) -> Tensor:
    """Slow-path bilinear sampling differentiable in the query points as well."""
    r = plane_r
    data = planes.data
    c = data.shape[3]
    p = points.data
    n = p.shape[0]
    feats = np.zeros((n, c), dtype=np.result_type(data.dtype, p.dtype))
    plane_terms = []
    for k, (a, b) in enumerate(_PLANE_AXES):
        u = (np.clip(p[:, a], -1.0, 1.0) + 1.0) * 0.5 * (r - 1)
        v = (np.clip(p[:, b], -1.0, 1.0) + 1.0) * 0.5 * (r - 1)
        on_u = (np.abs(p[:, a]) <= 1.0) * 0.5 * (r - 1)  # du/dcoord, 0 when clipped
        on_v = (np.abs(p[:, b]) <= 1.0) * 0.5 * (r - 1)
        iu = np.minimum(u.astype(np.int64), r - 2)
        iv = np.minimum(v.astype(np.int64), r - 2)
        fu, fv = u - iu, v - iv
        pt = data[k].reshape(r * r, c)
        base = iu * r + iv
        v00, v01, v10, v11 = pt[base], pt[base + 1], pt[base + r], pt[base + r + 1]
        feats += ((1 - fu) * (1 - fv))[:, None] * v00 + ((1 - fu) * fv)[:, None] * v01 \
            + (fu * (1 - fv))[:, None] * v10 + (fu * fv)[:, None] * v11
        plane_terms.append((k, a, b, base, fu, fv, v00, v01, v10, v11, on_u, on_v))

    def vjp_planes(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(data)
        for k, a, b, base, fu, fv, *_ in plane_terms:
            flat = out[k].reshape(r * r, c)
            np.add.at(flat, base, ((1 - fu) * (1 - fv))[:, None] * g)
            np.add.at(flat, base + 1, ((1 - fu) * fv)[:, None] * g)
            np.add.at(flat, base + r, (fu * (1 - fv))[:, None] * g)
            np.add.at(flat, base + r + 1, (fu * fv)[:, None] * g)
        return out

    def vjp_points(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(p)
        for k, a, b, base, fu, fv, v00, v01, v10, v11, on_u, on_v in plane_terms:
            dfu = ((1 - fv)[:, None] * (v10 - v00) + fv[:, None] * (v11 - v01)) * g
            dfv = ((1 - fu)[:, None] * (v01 - v00) + fu[:, None] * (v11 - v10)) * g
            out[:, a] += dfu.sum(axis=1) * on_u
            out[:, b] += dfv.sum(axis=1) * on_v
        return out

    parents = [(planes, vjp_planes)]
    if isinstance(points, Tensor):
        parents.append((points, vjp_points))
    return custom_op(feats, parents)


def _decode_features(gen: GeneratorParams, feats: Tensor,
                     pack: dict[str, Tensor] | None) -> tuple[Tensor, Tensor]:
    ws, bs = _mlp_io(gen.decoder, "decoder", pack)
    raw = mlp_apply(gen.decoder, feats, weights=ws, biases=bs)
    sigma = (raw[..., 0] - 1.0).softplus()  # biased low so empty space starts empty
    rgb = raw[..., 1:4].sigmoid()
    return sigma, rgb


def sample_decode(gen: GeneratorParams, planes, point,
                  pack: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Radiance-field readout at 3-D points; sigma is 0 outside the world cube.

    Differentiable in the planes, the decoder parameters and (when a Tensor is
    passed) the query points themselves.
    """
    if isinstance(planes, TriPlanes):
        planes = Tensor(planes.data)
    pts_arr = point.data if isinstance(point, Tensor) else np.atleast_2d(np.asarray(point))
    single = pts_arr.ndim == 1
    if single:
        pts_arr = pts_arr[None, :]
        point = pts_arr
    feats = _plane_sample_with_point_grads(
        planes, point if isinstance(point, Tensor) else Tensor(pts_arr), gen.plane_r)
    sigma, rgb = _decode_features(gen, feats, pack)
    inside = (np.abs(pts_arr) <= 1.0).all(axis=1).astype(sigma.data.dtype)
    sigma = sigma * Tensor(inside)
    return sigma, rgb


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def composite_rays(sigma: Tensor, rgb: Tensor, t_vals: np.ndarray,
                   bg: Tensor, far: float = FAR) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Emission-absorption compositing along sampled rays.

    ``sigma`` (n_rays, n) holds densities at the sample positions ``t_vals``;
    each sample governs the segment up to the next sample (the last one up to
    ``far``), with per-segment opacity 1 - exp(-sigma * delta). Returns the
    composited colors on the graph plus depth (expected ray termination,
    ``far`` where nothing is hit) and accumulated opacity as arrays.
    """
    n_rays, n = sigma.shape
    dtype = sigma.data.dtype
    deltas = np.diff(t_vals, axis=1)
    deltas = np.concatenate([deltas, (far - t_vals[:, -1:])], axis=1).astype(dtype)
    tau = sigma * Tensor(deltas)
    trans_in = (-tau.cumsum(1)).exp()             # transmittance after segment k
    ones = Tensor(np.ones((n_rays, 1), dtype=dtype))
    trans_ex = concat([ones, trans_in[:, :-1]], axis=1)
    weights = trans_ex - trans_in                 # in [0, 1], summing to opacity
    residual = trans_in[:, -1:]
    rgb_rays = (weights.reshape(n_rays, n, 1) * rgb).sum(axis=1)
    rgb_rays = rgb_rays + residual * bg.reshape(1, 3)
    depth = (weights.data * t_vals.astype(dtype)).sum(axis=1) + residual.data[:, 0] * far
    opacity = 1.0 - residual.data[:, 0]
    return rgb_rays, depth, opacity


_jitter_cache: dict[tuple[int, int], np.ndarray] = {}
_bundle_cache: dict[tuple, "RayBundle"] = {}
_BUNDLE_CACHE_CAP = 8


def _hash_u32(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint32)
    x ^= x >> np.uint32(16)
    x *= np.uint32(0x7FEB352D)
    x ^= x >> np.uint32(15)
    x *= np.uint32(0x846CA68B)
    x ^= x >> np.uint32(16)
    return x


def _pixel_jitter(res: int, n_samples: int) -> np.ndarray:
    """Deterministic per-(pixel, sample) offsets in [0, 1)."""
    key = (res, n_samples)
    if key not in _jitter_cache:
        pix = np.arange(res * res, dtype=np.uint32)[:, None]
        k = np.arange(n_samples, dtype=np.uint32)[None, :]
        h = _hash_u32(pix * np.uint32(73856093) ^ k * np.uint32(19349663) ^ np.uint32(0x9E3779B9))
        _jitter_cache[key] = (h.astype(np.float64) + 0.5) / 2.0 ** 32
    return _jitter_cache[key]


@dataclass
class RayBundle:
    origin: np.ndarray
    dirs: np.ndarray          # (n_rays, 3)
    t_vals: np.ndarray        # (n_rays, n_samples)
    sampler: PlaneSampler     # built over in-cube sample points only
    idx_in: np.ndarray        # flat indices of in-cube points among all samples


def _ray_bundle(pose: CameraPose, res: int, n_samples: int, plane_r: int) -> RayBundle:
    key = (round(pose.yaw, 12), round(pose.pitch, 12), round(pose.roll, 12),
           round(pose.radius, 12), res, n_samples, plane_r)
    bundle = _bundle_cache.get(key)
    if bundle is not None:
        return bundle
    origin, dirs = ray_grid(pose, res)
    dirs = dirs.reshape(-1, 3)
    delta = (FAR - NEAR) / n_samples
    t_vals = NEAR + (np.arange(n_samples)[None, :] + _pixel_jitter(res, n_samples)) * delta
    points = origin[None, None, :] + t_vals[:, :, None] * dirs[:, None, :]
    points = points.reshape(-1, 3)
    idx_in = np.flatnonzero((np.abs(points) <= 1.0).all(axis=1))
    sampler = PlaneSampler(points[idx_in], plane_r)
    bundle = RayBundle(origin, dirs, t_vals, sampler, idx_in)
    if len(_bundle_cache) >= _BUNDLE_CACHE_CAP:
        _bundle_cache.pop(next(iter(_bundle_cache)))
    _bundle_cache[key] = bundle
    return bundle


@dataclass
class RenderResult:
    rgb: Tensor              # (res, res, 3) on the graph
    depth: np.ndarray        # (res, res) expected ray-termination distance
    opacity: np.ndarray      # (res, res) accumulated opacity in [0, 1]

    def image(self) -> np.ndarray:
        return self.rgb.data.copy()


def render(gen: GeneratorParams, w, pose: CameraPose, res: int,
           pack: dict[str, Tensor] | None = None,
           rays_mask: np.ndarray | None = None,
           n_samples: int | None = None) -> RenderResult:
    """Volumetric render of the latent ``w`` from ``pose``.

    ``rays_mask`` (flat res*res booleans) restricts computation to a pixel
    subset; unselected pixels come out black with zero depth/opacity. This is
    an internal optimization for masked losses: the returned image is only
    meaningful where the mask is set.
    """
    check_resolution(res)
    n_samples = n_samples or gen.n_samples
    bundle = _ray_bundle(pose, res, n_samples, gen.plane_r)
    dtype = gen.background.dtype

    planes = synthesize_planes(gen, w, pack)

    if rays_mask is not None:
        rays_mask = np.asarray(rays_mask).reshape(-1)
        ray_idx = np.flatnonzero(rays_mask)
        sub = _masked_bundle(pose, res, n_samples, gen.plane_r, ray_idx)
        sampler, idx_in, t_vals = sub.sampler, sub.idx_in, sub.t_vals
        n_rays = ray_idx.size
    else:
        ray_idx = None
        sampler, idx_in, t_vals = bundle.sampler, bundle.idx_in, bundle.t_vals
        n_rays = res * res

    # decode only in-cube sample points: outside ones carry zero density and
    # therefore exactly zero compositing weight
    feats = sampler.sample(planes)
    sigma_in, rgb_in = _decode_features(gen, feats, pack)
    n_pts = n_rays * n_samples
    sigma = scatter_rows(sigma_in.reshape(-1, 1), idx_in, n_pts).reshape(n_rays, n_samples)
    rgb_pts = scatter_rows(rgb_in, idx_in, n_pts)

    bg = _bg_rgb(gen, pack)
    rgb_rays, depth_rays, opacity_rays = composite_rays(
        sigma, rgb_pts.reshape(n_rays, n_samples, 3), t_vals, bg)

    if ray_idx is not None:
        rgb_img = scatter_rows(rgb_rays, ray_idx, res * res).reshape(res, res, 3)
        depth = np.zeros(res * res, dtype=dtype)
        depth[ray_idx] = depth_rays
        opacity = np.zeros(res * res, dtype=dtype)
        opacity[ray_idx] = opacity_rays
    else:
        rgb_img = rgb_rays.reshape(res, res, 3)
        depth = depth_rays
        opacity = opacity_rays
    return RenderResult(rgb_img, depth.reshape(res, res), opacity.reshape(res, res))


def _masked_bundle(pose: CameraPose, res: int, n_samples: int, plane_r: int,
                   ray_idx: np.ndarray) -> RayBundle:
    key = (round(pose.yaw, 12), round(pose.pitch, 12), round(pose.roll, 12),
           round(pose.radius, 12), res, n_samples, plane_r,
           ray_idx.size, int(ray_idx[0]) if ray_idx.size else -1,
           hash(ray_idx.tobytes()))
    bundle = _bundle_cache.get(key)
    if bundle is not None:
        return bundle
    full = _ray_bundle(pose, res, n_samples, plane_r)
    pts = full.origin[None, None, :] + \
        full.t_vals[ray_idx][:, :, None] * full.dirs[ray_idx][:, None, :]
    pts = pts.reshape(-1, 3)
    idx_in = np.flatnonzero((np.abs(pts) <= 1.0).all(axis=1))
    sampler = PlaneSampler(pts[idx_in], plane_r)
    bundle = RayBundle(full.origin, full.dirs[ray_idx], full.t_vals[ray_idx],
                       sampler, idx_in)
    if len(_bundle_cache) >= _BUNDLE_CACHE_CAP:
        _bundle_cache.pop(next(iter(_bundle_cache)))
    _bundle_cache[key] = bundle
    return bundle


def _bg_rgb(gen: GeneratorParams, pack: dict[str, Tensor] | None) -> Tensor:
    logits = (pack or {}).get("background")
    if logits is None:
        logits = Tensor(gen.background)
    return logits.sigmoid()


def foreground_mask(opacity: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return opacity > threshold


# ---------------------------------------------------------------------------
# latent sampling
# ---------------------------------------------------------------------------

def sample_z(seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.uint64(seed) + np.uint64(0x2A7A17))
    return rng.standard_normal(D_Z)


def latent_mean(gen: GeneratorParams) -> np.ndarray:
    """Empirical mean of the mapped latent over a fixed seeded pool (cached)."""
    if gen._w_mean is None:
        rng = np.random.default_rng(0xA11CE)
        zs = rng.standard_normal((TRUNCATION_POOL, D_Z)).astype(gen.background.dtype)
        ws = map_latent(gen, zs).data
        gen._w_mean = ws.mean(axis=0)
    return gen._w_mean.copy()


def sample_w_truncated(gen: GeneratorParams, seed: int, psi_trunc: float) -> np.ndarray:
    """Truncation sampling: pull the mapped latent toward the pool mean."""
    if not (0.0 <= psi_trunc <= 1.0):
        raise InvalidInputError("truncation factor must lie in [0, 1]")
    w_bar = latent_mean(gen)
    w = map_latent(gen, sample_z(seed).astype(gen.background.dtype)).data
    return w_bar + psi_trunc * (w - w_bar)
