"""Fixed multi-scale convolutional feature bank and the perceptual distance.

The bank is a seeded, untrained stack of 3x3 stride-2 convolutions with a
tanh squash at each level. One extractor serves both the masked inversion
loss and the perceptual reconstruction loss; its filters never train, so
gradients flow only to the image argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .tensor import Tensor, as_tensor, custom_op

DEFAULT_BANK_SEED = 77_1031
N_LEVELS = 3
N_CHANNELS = 8


def conv3x3_s2(x: Tensor, filt: np.ndarray) -> Tensor:
    """3x3 stride-2 convolution, pad 1, HWC layout; differentiable in x only."""
    h, w, cin = x.data.shape
    filt = np.asarray(filt, dtype=x.data.dtype)
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    win = win[::2, ::2]  # (oh, ow, cin, 3, 3)
    oh, ow = win.shape[:2]
    col = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, 9 * cin)
    fmat = filt.reshape(9 * cin, -1)
    out = (col @ fmat).reshape(oh, ow, fmat.shape[1])

    def vjp(g: np.ndarray) -> np.ndarray:
        gcol = g.reshape(oh * ow, -1) @ fmat.T
        gcol = gcol.reshape(oh, ow, 3, 3, cin)
        gxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                gxp[ky:ky + 2 * oh:2, kx:kx + 2 * ow:2, :] += gcol[:, :, ky, kx, :]
        return gxp[1:h + 1, 1:w + 1, :]

    return custom_op(out, [(x, vjp)])


@dataclass(frozen=True)
class FeaturePyramid:
    """Feature tensors at strictly decreasing spatial resolutions."""

    levels: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise InvalidInputError("pyramid needs at least 2 levels")
        sizes = [lv.shape[0] for lv in self.levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise InvalidInputError("level sizes must strictly decrease")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [lv.shape for lv in self.levels]

    def concat_flat(self) -> Tensor:
        from .tensor import concat
        return concat([lv.reshape(lv.size) for lv in self.levels], axis=0)


class FeatureBank:
    """Seeded filter stack shared by every distance computed in a run."""

    def __init__(self, seed: int = DEFAULT_BANK_SEED, levels: int = N_LEVELS,
                 channels: int = N_CHANNELS):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.filters: list[np.ndarray] = []
        cin = 3
        for _ in range(levels):
            fan = 9 * cin
            f = rng.standard_normal((3, 3, cin, channels)) * np.sqrt(2.0 / fan)
            self.filters.append(f)
            cin = channels

    def extract(self, image) -> FeaturePyramid:
        x = as_tensor(image)
        if x.data.ndim != 3 or x.data.shape[2] != 3:
            raise InvalidInputError(f"expected HxWx3 image, got shape {x.data.shape}")
        if not np.isfinite(x.data).all():
            raise InvalidInputError("image contains non-finite values")
        if min(x.data.shape[0], x.data.shape[1]) < 2 ** len(self.filters):
            raise InvalidInputError("image too small for the pyramid depth")
        levels = []
        h = x
        for f in self.filters:
            h = conv3x3_s2(h, f).tanh()
            levels.append(h)
        return FeaturePyramid(tuple(levels))

    def embed(self, image: np.ndarray) -> np.ndarray:
        """Flattened final pyramid level, used as the statistics feature space."""
        pyr = self.extract(np.asarray(image))
        return pyr.levels[-1].data.reshape(-1).copy()


_default_bank: FeatureBank | None = None


def default_bank() -> FeatureBank:
    global _default_bank
    if _default_bank is None:
        _default_bank = FeatureBank()
    return _default_bank


def feature_extract(image, bank: FeatureBank | None = None) -> FeaturePyramid:
    return (bank or default_bank()).extract(image)


def _guarded_norm(sumsq: Tensor) -> Tensor:
    """sqrt with a zero (sub)gradient at the origin instead of a division blowup."""
    root = np.sqrt(sumsq.data)
    denom = max(float(root), 1e-12)
    return custom_op(root, [(sumsq, lambda g: g * (0.5 / denom))])


def perceptual_distance(a, b, bank: FeatureBank | None = None) -> Tensor:
    """L2 norm over the concatenated feature pyramids of two same-shape images."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape != b.data.shape:
        raise InvalidInputError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    bank = bank or default_bank()
    pa = bank.extract(a).concat_flat()
    pb = bank.extract(b).concat_flat()
    d = pa - pb
    return _guarded_norm((d * d).sum())


def masked_feature_loss(target_masked, rendered_masked, bank: FeatureBank | None = None) -> Tensor:
    """Feature-space L2 between two already-masked images (the stage-1 objective)."""
    return perceptual_distance(target_masked, rendered_masked, bank=bank)
