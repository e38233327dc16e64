"""
Jeux de patches: découpage des coupes, recollage, partition et augmentation.
"""
import logging
import math
from typing import Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy import ndimage

from config import settings
from models import AugmentConfig, PatchMeta, PatchSample, Plane, SplitSpec, VolumeGrid
from services.geometry_service import normalize_intensity
from utils.validators import validate_binary, validate_same_shape, validate_slice

logger = logging.getLogger(__name__)

T = TypeVar("T")
Tile = Union[PatchSample, Tuple[np.ndarray, PatchMeta]]

def patch_offsets(size: int, patch: int, stride: int) -> List[int]:
    """Décalages ligne par ligne; la dernière tuile est alignée sur le bord si nécessaire"""
    if size < patch:
        raise ValueError(f"Dimension {size} plus petite que le patch {patch}")
    if stride < 1:
        raise ValueError(f"Pas invalide: {stride}")
    offsets = list(range(0, size - patch + 1, stride))
    if offsets[-1] + patch < size:
        offsets.append(size - patch)
    return offsets

def plane_slices(data: np.ndarray, plane: Plane) -> Iterator[Tuple[int, np.ndarray]]:
    """Coupes 2D d'un volume (z, y, x) le long du plan demandé"""
    axis = {Plane.XY: 0, Plane.XZ: 1, Plane.YZ: 2}[Plane(plane)]
    for i in range(data.shape[axis]):
        yield i, np.take(data, i, axis=axis)

def sample_rng(seed: int, sample_id: int, epoch: int) -> np.random.Generator:
    """Générateur propre à un échantillon et une époque, indépendant de l'ordre de traitement"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, sample_id, epoch])))

def _resample(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(image, matrix, offset=offset, order=order, mode="reflect")

class DatasetService:
    def patchify(self, image: np.ndarray, mask: np.ndarray, patch: int = settings.PATCH_SIZE,
                 stride: int = settings.TRAIN_STRIDE, volume_id: str = "volume",
                 slice_index: int = 0) -> List[PatchSample]:
        validate_same_shape(image, mask, "coupes image/masque")
        h, w = validate_slice(image, patch)
        samples = []
        for y in patch_offsets(h, patch, stride):
            for x in patch_offsets(w, patch, stride):
                samples.append(PatchSample(
                    image=image[y:y + patch, x:x + patch].copy(),
                    mask=mask[y:y + patch, x:x + patch].copy(),
                    meta=PatchMeta(volume_id=volume_id, slice_index=slice_index, y=y, x=x),
                ))
        return samples

    def stitch(self, tiles: Sequence[Tile], slice_dims: Tuple[int, int],
               threshold: Optional[float] = None) -> np.ndarray:
        """
        Recolle des tuiles de prédiction sur une coupe.

        Les zones de recouvrement sont moyennées; la carte est binarisée (> threshold)
        seulement si un seuil est fourni.
        """
        h, w = slice_dims
        total = np.zeros((h, w), dtype=np.float64)
        count = np.zeros((h, w), dtype=np.int64)
        dtype = None
        for tile in tiles:
            values, meta = (tile.image, tile.meta) if isinstance(tile, PatchSample) else tile
            values = np.asarray(values)
            ph, pw = values.shape
            if meta.y + ph > h or meta.x + pw > w:
                raise ValueError(f"Tuile ({meta.y}, {meta.x}) de taille {ph}x{pw} hors de la coupe {h}x{w}")
            total[meta.y:meta.y + ph, meta.x:meta.x + pw] += values
            count[meta.y:meta.y + ph, meta.x:meta.x + pw] += 1
            dtype = values.dtype if dtype is None else np.result_type(dtype, values.dtype)

        missing = count == 0
        if missing.any():
            rows, cols = np.nonzero(missing)
            raise ValueError(
                f"Couverture incomplète: {int(missing.sum())} pixels manquants dans la zone "
                f"y=[{rows.min()}, {rows.max()}], x=[{cols.min()}, {cols.max()}]"
            )

        averaged = total / count
        if threshold is not None:
            return (averaged > threshold).astype(np.uint8)
        if dtype is not None and np.issubdtype(dtype, np.floating):
            return averaged.astype(dtype)
        return averaged

    def split_dataset(self, samples: Sequence[T], spec: SplitSpec) -> Tuple[List[T], List[T], List[T]]:
        """Mélange déterministe puis tailles plancher; le reste va d'abord à train"""
        n = len(samples)
        if n == 0:
            raise ValueError("Aucun échantillon à partitionner")
        sizes = [math.floor(n * f + 1e-9) for f in spec.fractions]
        remainder = n - sum(sizes)
        i = 0
        while remainder > 0:
            sizes[i % 3] += 1
            remainder -= 1
            i += 1
        order = np.random.Generator(np.random.PCG64(spec.seed)).permutation(n)
        shuffled = [samples[k] for k in order]
        train = shuffled[:sizes[0]]
        val = shuffled[sizes[0]:sizes[0] + sizes[1]]
        test = shuffled[sizes[0] + sizes[1]:]
        logger.debug("Partition %d -> %d/%d/%d", n, len(train), len(val), len(test))
        return train, val, test

    def augment(self, sample: PatchSample, cfg: AugmentConfig, draw: np.random.Generator) -> PatchSample:
        """
        Applique chaque transformation activée avec la probabilité cfg.probability.

        Image: interpolation bilinéaire, masque: plus proche voisin; bords en miroir.
        """
        image = sample.image.astype(np.float32, copy=True)
        mask = sample.mask.copy()
        n_rows, n_cols = image.shape
        center = np.array([(n_rows - 1) / 2, (n_cols - 1) / 2])

        def chance() -> bool:
            return draw.random() < cfg.probability

        def warp(matrix: np.ndarray, offset: np.ndarray) -> None:
            nonlocal image, mask
            image = _resample(image, matrix, offset, order=1)
            mask = _resample(mask, matrix, offset, order=0)

        if cfg.rotation and chance():
            angle = draw.uniform(0, 360)
            quarter = angle / 90
            if abs(quarter - round(quarter)) < 1e-9:
                k = int(round(quarter)) % 4
                cos, sin = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
            else:
                rad = math.radians(angle)
                cos, sin = math.cos(rad), math.sin(rad)
            matrix = np.array([[cos, sin], [-sin, cos]])
            warp(matrix, center - matrix @ center)

        if cfg.hflip and chance():
            image, mask = image[:, ::-1], mask[:, ::-1]
        if cfg.vflip and chance():
            image, mask = image[::-1, :], mask[::-1, :]

        if cfg.crop_frac > 0 and chance():
            # Recadrage d'au plus crop_frac du côté puis retour à la taille d'origine
            max_cut = int(cfg.crop_frac * min(n_rows, n_cols))
            cut = int(draw.integers(0, max_cut + 1))
            if cut:
                top, left = int(draw.integers(0, cut + 1)), int(draw.integers(0, cut + 1))
                scale = np.diag([(n_rows - cut - 1) / (n_rows - 1), (n_cols - cut - 1) / (n_cols - 1)])
                warp(scale, np.array([top, left], dtype=np.float64))

        if cfg.max_shift > 0 and chance():
            s = cfg.max_shift
            dy, dx = (int(v) for v in draw.integers(-s, s + 1, size=2))
            pad = ((s, s), (s, s))
            padded_img = np.pad(image, pad, mode="reflect")
            padded_mask = np.pad(mask, pad, mode="reflect")
            image = padded_img[s - dy:s - dy + n_rows, s - dx:s - dx + n_cols]
            mask = padded_mask[s - dy:s - dy + n_rows, s - dx:s - dx + n_cols]

        lo, hi = cfg.zoom_range
        if lo < 1 and chance():
            factor = draw.uniform(lo, hi)
            scale = np.diag([factor, factor])
            warp(scale, center - scale @ center)

        if cfg.brightness > 0 and chance():
            image = image + np.float32(draw.uniform(-cfg.brightness, cfg.brightness))
        if cfg.contrast > 0 and chance():
            image = image * np.float32(draw.uniform(1 - cfg.contrast, 1 + cfg.contrast))

        return PatchSample(
            image=np.ascontiguousarray(np.clip(image, 0, 1), dtype=np.float32),
            mask=np.ascontiguousarray(mask),
            meta=sample.meta,
        )

    def volume_to_patches(self, volume: VolumeGrid, mask: VolumeGrid, plane: Plane = Plane.XY,
                          patch: int = settings.PATCH_SIZE, stride: int = settings.TRAIN_STRIDE,
                          volume_id: str = "volume") -> List[PatchSample]:
        """Coupes du plan choisi, intensités ramenées dans [0,1], découpées en patches"""
        validate_same_shape(volume.data, mask.data, "volumes image/masque")
        labels = validate_binary(mask.data).astype(np.uint8)
        intensities = normalize_intensity(volume.data)
        samples: List[PatchSample] = []
        for (i, image), (_, labels_2d) in zip(plane_slices(intensities, plane), plane_slices(labels, plane)):
            samples.extend(self.patchify(image, labels_2d, patch, stride, volume_id, i))
        logger.info("🧩 %d patches extraits (plan %s, pas %d)", len(samples), Plane(plane).value, stride)
        return samples
