"""Reconstruction pretraining of the generator on the synthetic world.

Stands in for adversarial training: the generator plus a factor encoder are
fit so that rendering the encoded factors from a camera reproduces the world
render whose head angles were composed into that camera. Head yaw/pitch enter
the latent (the scene rotates), so the camera argument stays a free viewpoint
control afterwards.

The factor encoder is a fixed orthogonal embedding into z-space followed by
the trainable mapping network; unused z directions are excited with noise
during training so the generator learns to ignore them, keeping randomly
sampled latents on-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import facegeo
from .camera import CameraPose
from .errors import NumericalError
from .features import FeatureBank, default_bank, perceptual_distance
from .gan import D_Z, GeneratorParams, map_latent, render
from .nn import AdamGroup
from .tensor import Tensor
from .world import FactorVector, reference_render, sample_factors

# factor block layout inside the embedding: (beta, theta, yaw/pitch, jaw, alpha)
_FACTOR_DIM = facegeo.D_ID + facegeo.D_EXP + 2 + 3 + facegeo.D_ATTR
_SCALES = np.concatenate([
    np.full(facegeo.D_ID, 0.9), np.full(facegeo.D_EXP, 0.9),
    [0.30, 0.20], [0.35, 0.2, 0.2], np.full(facegeo.D_ATTR, 0.9)])


@dataclass
class FactorEmbed:
    """Fixed orthogonal map from generative factors into the z-space."""

    matrix: np.ndarray  # (D_Z, D_Z), orthogonal
    seed: int

    @staticmethod
    def create(seed: int = 0) -> "FactorEmbed":
        rng = np.random.default_rng(np.uint64(seed) + np.uint64(0xE4BED))
        q, _ = np.linalg.qr(rng.standard_normal((D_Z, D_Z)))
        return FactorEmbed(q, seed)

    def features(self, f: FactorVector) -> np.ndarray:
        return np.concatenate([f.beta, f.theta_exp, f.psi[0:2], f.psi[3:6], f.alpha_app])

    def encode(self, f: FactorVector, ghost: np.ndarray | None = None) -> np.ndarray:
        s = np.zeros(D_Z)
        s[:_FACTOR_DIM] = self.features(f) / _SCALES
        if ghost is not None:
            s[_FACTOR_DIM:] = ghost
        return self.matrix @ s

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embed.matrix": self.matrix, "embed.seed": np.array([float(self.seed)])}


def encode_factors(gen: GeneratorParams, embed: FactorEmbed, f: FactorVector) -> np.ndarray:
    """Factor-to-latent encoder: embedding followed by the mapping network."""
    z = embed.encode(f).astype(gen.background.dtype)
    return map_latent(gen, z).data


@dataclass
class PretrainConfig:
    seed: int = 0
    stages: tuple[tuple[int, int, int], ...] = ((1400, 32, 4), (220, 64, 2))  # (steps, res, batch)
    lr: float = 2e-3
    perc_weight: float = 0.02
    cam_pool: int = 16
    cam_pool_hires: int = 6
    val_subjects: int = 12
    val_res: int = 64
    target_psnr_db: float = 22.0  # recorded after the calibration run

    def camera_pool(self, res: int) -> list[CameraPose]:
        n = self.cam_pool if res <= 32 else self.cam_pool_hires
        rng = np.random.default_rng(np.uint64(self.seed) + np.uint64(0xCA5))
        poses = [CameraPose(0.0, 0.0)]
        while len(poses) < n:
            poses.append(CameraPose(rng.uniform(-0.55, 0.55), rng.uniform(-0.32, 0.32)))
        return poses


@dataclass
class PretrainResult:
    gen: GeneratorParams
    embed: FactorEmbed
    loss_curve: list[float] = field(default_factory=list)
    val_psnr_db: float = float("nan")


def _world_target(f: FactorVector, cam: CameraPose, res: int) -> np.ndarray:
    return reference_render(f, cam, res).rgb


def psnr_db(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def validation_psnr(gen: GeneratorParams, embed: FactorEmbed, cfg: PretrainConfig) -> float:
    vals = []
    for k in range(cfg.val_subjects):
        f = sample_factors(900_000 + k)
        cam = CameraPose(0.12 * np.sin(1.7 * k), 0.08 * np.cos(2.3 * k))
        target = _world_target(f, cam, cfg.val_res)
        w = encode_factors(gen, embed, f)
        out = render(gen, w, cam, cfg.val_res)
        vals.append(psnr_db(out.rgb.data, target))
    return float(np.mean(vals))


def pretrain_reconstruction(cfg: PretrainConfig,
                            bank: FeatureBank | None = None) -> PretrainResult:
    """Fit generator + encoder by image and feature loss on seeded batches."""
    bank = bank or default_bank()
    gen = GeneratorParams.init(cfg.seed)
    embed = FactorEmbed.create(cfg.seed)
    opt = AdamGroup(lr=cfg.lr)
    params = gen.arrays()
    curve: list[float] = []
    ghost_n = D_Z - _FACTOR_DIM

    step_index = 0
    for steps, res, batch in cfg.stages:
        pool = cfg.camera_pool(res)
        for _ in range(steps):
            rng = np.random.default_rng((cfg.seed, 7, step_index))
            pack = gen.pack(("mapping", "synthesis", "decoder", "background"))
            total = None
            for b in range(batch):
                f = sample_factors(int(rng.integers(0, 2 ** 31)))
                cam = pool[int(rng.integers(0, len(pool)))]
                target = _world_target(f, cam, res).astype(np.float32)
                z = embed.encode(f, ghost=rng.standard_normal(ghost_n))
                w = map_latent(gen, z.astype(np.float32), pack)
                out = render(gen, w, cam, res, pack=pack)
                diff = out.rgb - Tensor(target)
                loss = (diff * diff).mean()
                if cfg.perc_weight > 0.0:
                    loss = loss + perceptual_distance(out.rgb, target, bank=bank) * (cfg.perc_weight / res)
                total = loss if total is None else total + loss
            total = total * (1.0 / batch)
            loss_val = total.item()
            if not np.isfinite(loss_val):
                raise NumericalError(f"pretraining diverged at step {step_index}")
            curve.append(loss_val)
            total.backward()
            grads = {name: t.grad for name, t in pack.items() if t.grad is not None}
            opt.step(params, grads)
            step_index += 1

    result = PretrainResult(gen, embed, curve)
    result.val_psnr_db = validation_psnr(gen, embed, cfg) if step_index else float("nan")
    return result
