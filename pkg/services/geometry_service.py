"""
Prétraitement géométrique des volumes: inversion des niveaux de gris,
homographie à partir de quatre coins, rectification par plan et recadrage.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import settings
from models import CornerSet, Homography, Interpolation, Plane, VolumeGrid

logger = logging.getLogger(__name__)

# Conditionnement maximal accepté pour le système 8x8 normalisé
MAX_CONDITION = 1e12

def _normalizer(points: np.ndarray) -> np.ndarray:
    """Similitude qui centre les points et les ramène dans [-1, 1]"""
    center = points.mean(axis=0)
    spread = np.abs(points - center).max()
    scale = 1.0 / spread if spread > 0 else 1.0
    return np.array([[scale, 0, -scale * center[0]], [0, scale, -scale * center[1]], [0, 0, 1.0]])

def _apply(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    homog = np.hstack([points, np.ones((len(points), 1))]) @ t.T
    return homog[:, :2] / homog[:, 2:3]

def corner_rms_error(h: Homography, source: Sequence, target: Sequence) -> float:
    """Erreur quadratique moyenne (px) entre H(source) et target"""
    mapped = h.apply(np.asarray(source, dtype=np.float64))
    diff = mapped - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))

def normalize_intensity(data: np.ndarray) -> np.ndarray:
    """Ramène un volume dans [0,1] en float32"""
    if np.issubdtype(data.dtype, np.integer):
        return (data / np.iinfo(data.dtype).max).astype(np.float32)
    lo, hi = float(data.min()), float(data.max())
    if lo >= 0 and hi <= 1:
        return data.astype(np.float32, copy=False)
    if hi == lo:
        return np.zeros(data.shape, dtype=np.float32)
    return ((data - lo) / (hi - lo)).astype(np.float32)

class GeometryService:
    def invert_grayscale(self, v: VolumeGrid) -> VolumeGrid:
        data = v.data
        if np.issubdtype(data.dtype, np.integer):
            inverted = (np.iinfo(data.dtype).max - data).astype(data.dtype)
        else:
            inverted = (data.max() + data.min() - data).astype(data.dtype)
        return v.with_data(inverted)

    def estimate_homography(self, corners: CornerSet) -> Homography:
        """
        Transformation linéaire directe sur les 4 correspondances coin -> rectangle cible.

        Les points sont normalisés dans [-1,1] avant résolution du système 8x8
        (h22 = 1), puis la matrice est dénormalisée.
        """
        src = np.asarray(corners.source, dtype=np.float64)
        dst = np.asarray(corners.target, dtype=np.float64)
        t_src, t_dst = _normalizer(src), _normalizer(dst)
        ns, nd = _apply(t_src, src), _apply(t_dst, dst)

        a = np.zeros((8, 8))
        b = np.zeros(8)
        for i, ((x, y), (u, w)) in enumerate(zip(ns, nd)):
            a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
            a[2 * i + 1] = [0, 0, 0, x, y, 1, -w * x, -w * y]
            b[2 * i], b[2 * i + 1] = u, w

        cond = float(np.linalg.cond(a))
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise ValueError(f"Configuration de coins dégénérée (conditionnement {cond:.3e})")
        try:
            solution = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as e:
            raise ValueError(f"Système singulier pour les coins {corners.source}: {e}")

        hn = np.append(solution, 1.0).reshape(3, 3)
        h = np.linalg.inv(t_dst) @ hn @ t_src
        homography = Homography(h=h)
        logger.debug("Homographie estimée (plan %s, erreur %.2e px)", corners.plane.value,
                     corner_rms_error(homography, src, dst))
        return homography

    def warp_slice(self, image: np.ndarray, h: Homography, out_size: Tuple[int, int],
                   interpolation: Interpolation = Interpolation.BILINEAR) -> np.ndarray:
        """Échantillonnage inverse: pixel cible p <- source(H^-1 p), 0 hors de l'image"""
        width, height = out_size
        cols, rows = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
        src = h.inverse().apply(np.column_stack([cols.ravel(), rows.ravel()]))
        order = 1 if Interpolation(interpolation) == Interpolation.BILINEAR else 0
        source = image.astype(np.float64) if order == 1 else image
        warped = ndimage.map_coordinates(source, [src[:, 1], src[:, 0]], order=order, mode="constant", cval=0)
        return warped.reshape(height, width)

    def rectify_plane(self, v: VolumeGrid, plane: Plane, h: Homography, out_size: Tuple[int, int],
                      interpolation: Interpolation = Interpolation.BILINEAR) -> VolumeGrid:
        """
        Rectifie chaque coupe du plan choisi.

        xy: coupes data[z] (y, x) -> (nz, h, w)
        xz: coupes data[:, y, :] (z, x) -> (h, ny, w)
        yz: coupes data[:, :, x] (z, y) -> (h, w, nx)
        """
        width, height = out_size
        if width < 1 or height < 1:
            raise ValueError(f"Taille de sortie invalide: {out_size}")
        plane = Plane(plane)
        axis = {Plane.XY: 0, Plane.XZ: 1, Plane.YZ: 2}[plane]
        slices = np.moveaxis(v.data, axis, 0)
        bilinear = Interpolation(interpolation) == Interpolation.BILINEAR
        out_dtype = np.float32 if bilinear else v.data.dtype

        def work(i: int) -> np.ndarray:
            return self.warp_slice(slices[i], h, out_size, interpolation).astype(out_dtype)

        with ThreadPoolExecutor(max_workers=max(1, settings.NUM_THREADS)) as pool:
            warped = list(pool.map(work, range(slices.shape[0])))

        stacked = np.moveaxis(np.stack(warped, axis=0), 0, axis)
        logger.info("📐 Plan %s rectifié: %s -> %s", plane.value, v.dims, stacked.shape)
        return v.with_data(np.ascontiguousarray(stacked))

    def crop_roi(self, v: VolumeGrid, lo: Sequence[int], hi: Sequence[int]) -> VolumeGrid:
        lo, hi = tuple(int(a) for a in lo), tuple(int(b) for b in hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError(f"Bornes (z, y, x) attendues, reçu lo={lo}, hi={hi}")
        for axis, (a, b, n) in enumerate(zip(lo, hi, v.dims)):
            if not 0 <= a < b <= n:
                raise ValueError(f"Recadrage hors limites sur l'axe {'zyx'[axis]}: [{a}, {b}) pour une taille {n}")
        roi = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
        return v.with_data(roi)
