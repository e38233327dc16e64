"""
Volumes synthétiques Li | électrolyte | Li avec dendrites et vérité terrain exacte.

L'empilement suit l'axe y: électrodes pour y < t et y >= ny - t, électrolyte entre
les deux. Chaque dendrite est une marche aléatoire ramifiée partant d'un voxel
d'interface et rastérisée en sphères.
"""
import logging
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from config import settings
from models import PatchSample, Phantom, PhantomConfig, Plane, VolumeGrid
from services.dataset_service import DatasetService

logger = logging.getLogger(__name__)

GENERATOR = "numpy.PCG64"
# Espacement maximal entre deux centres de sphères le long d'un segment
STAMP_SPACING = 0.5

def electrolyte_region(cfg: PhantomConfig) -> np.ndarray:
    nz, ny, nx = cfg.dims
    t = cfg.electrode_thickness
    region = np.zeros(cfg.dims, dtype=bool)
    region[:, t:ny - t, :] = True
    return region

def threshold_baseline(volume: VolumeGrid, cfg: PhantomConfig) -> np.ndarray:
    """Seuillage classique à (mu_e + mu_d) / 2, restreint à l'électrolyte"""
    mu_e, _, mu_d = cfg.intensity
    return ((volume.data > (mu_e + mu_d) / 2) & electrolyte_region(cfg)).astype(np.uint8)

class PhantomService:
    def __init__(self):
        self.dataset_service = DatasetService()

    def _stamp(self, mask: np.ndarray, center: np.ndarray, radius: int, y_range: Tuple[int, int]) -> None:
        nz, ny, nx = mask.shape
        lo = np.floor(center - radius).astype(int)
        hi = np.ceil(center + radius).astype(int) + 1
        lo = np.maximum(lo, [0, y_range[0], 0])
        hi = np.minimum(hi, [nz, y_range[1], nx])
        if np.any(hi <= lo):
            return
        zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        inside = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2 <= radius * radius
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside

    def _grow(self, mask: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> None:
        nz, ny, nx = cfg.dims
        t = cfg.electrode_thickness
        y_range = (t, ny - t)
        top = rng.random() < 0.5
        root = np.array([
            rng.integers(0, nz),
            t if top else ny - t - 1,
            rng.integers(0, nx),
        ], dtype=np.float64)
        inward = 1.0 if top else -1.0
        radius = int(rng.integers(cfg.radius_range[0], cfg.radius_range[1] + 1))

        tips: List[Tuple[np.ndarray, np.ndarray, int]] = [(root, np.array([0.0, inward, 0.0]), 0)]
        branches = 0
        self._stamp(mask, root, radius, y_range)
        while tips:
            pos, direction, steps = tips.pop()
            while steps < cfg.max_steps:
                direction = direction + rng.normal(0, 0.35, size=3)
                direction[1] = inward * max(abs(direction[1]), 0.2)
                direction /= np.linalg.norm(direction)
                nxt = pos + cfg.step_len * direction
                if not (0 <= nxt[0] <= nz - 1 and y_range[0] <= nxt[1] <= y_range[1] - 1 and 0 <= nxt[2] <= nx - 1):
                    break
                n_samples = max(1, int(np.ceil(cfg.step_len / STAMP_SPACING)))
                for k in range(1, n_samples + 1):
                    self._stamp(mask, pos + (nxt - pos) * k / n_samples, radius, y_range)
                pos, steps = nxt, steps + 1
                if branches < cfg.max_branches and rng.random() < cfg.branch_prob:
                    branches += 1
                    tips.append((pos.copy(), direction + rng.normal(0, 0.6, size=3), steps))

    def generate_phantom(self, cfg: PhantomConfig) -> Phantom:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        nz, ny, nx = cfg.dims
        t = cfg.electrode_thickness
        mu_e, mu_li, mu_d = cfg.intensity

        mask = np.zeros(cfg.dims, dtype=bool)
        for _ in range(cfg.dendrite_count):
            self._grow(mask, cfg, rng)

        volume = np.full(cfg.dims, mu_e, dtype=np.float32)
        volume[:, :t, :] = mu_li
        volume[:, ny - t:, :] = mu_li
        volume[mask] = mu_d

        # Porosité: une fraction des voxels intérieurs prend l'intensité de l'électrolyte
        if cfg.porosity > 0 and mask.any():
            interior = ndimage.binary_erosion(mask)
            hollow = interior & (rng.random(cfg.dims) < cfg.porosity)
            volume[hollow] = mu_e

        if cfg.noise_sigma > 0:
            volume += rng.normal(0, cfg.noise_sigma, size=cfg.dims).astype(np.float32)
        np.clip(volume, 0, 1, out=volume)

        count = int(mask.sum())
        logger.info("🧪 Fantôme %s généré: %d dendrites, %d voxels marqués", cfg.dims, cfg.dendrite_count, count)
        return Phantom(
            volume=VolumeGrid(data=volume, voxel_size=settings.VOXEL_SIZE_UM, generator=GENERATOR),
            mask=VolumeGrid(data=mask.astype(np.uint8), voxel_size=settings.VOXEL_SIZE_UM, generator=GENERATOR),
            dendrite_voxels=count,
            config=cfg,
        )

    def phantom_to_patches(self, phantom: Phantom, plane: Plane = Plane.XY,
                           stride: int = settings.TRAIN_STRIDE) -> List[PatchSample]:
        return self.dataset_service.volume_to_patches(
            phantom.volume, phantom.mask, plane, settings.PATCH_SIZE, stride,
            volume_id=f"phantom-{phantom.config.seed}",
        )
