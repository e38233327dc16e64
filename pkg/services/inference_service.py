import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from config import settings
from models import DendriteReport, PatchMeta, PatchSample, Plane, VolumeGrid
from services.dataset_service import DatasetService, patch_offsets, plane_slices
from services.file_service import FileService
from services.geometry_service import normalize_intensity
from utils.metrics import mean_metrics
from utils.validators import validate_binary, validate_slice

logger = logging.getLogger(__name__)

class Predictor(Protocol):
    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        ...

class InferenceService:
    def __init__(self):
        self.dataset_service = DatasetService()
        self.file_service = FileService()

    def predict_patches(self, predictor: Predictor, samples: Sequence[PatchSample],
                        batch_size: int = settings.BATCH_SIZE) -> np.ndarray:
        """Probabilités [S,1,P,P] pour une liste de patches"""
        if not samples:
            raise ValueError("Aucun patch à prédire")
        outputs = []
        for start in range(0, len(samples), batch_size):
            batch = np.stack([s.image for s in samples[start:start + batch_size]])[:, None]
            outputs.append(np.asarray(predictor.predict_proba(batch)))
        return np.concatenate(outputs)

    def evaluate(self, predictor: Predictor, samples: Sequence[PatchSample],
                 threshold: float = settings.THRESHOLD) -> Tuple[float, float]:
        probs = self.predict_patches(predictor, samples)
        preds = (probs[:, 0] > threshold).astype(np.uint8)
        return mean_metrics((s.mask, p) for s, p in zip(samples, preds))

    def predict_slice(self, predictor: Predictor, image: np.ndarray, stride: int,
                      threshold: float = settings.THRESHOLD,
                      batch_size: int = settings.BATCH_SIZE) -> np.ndarray:
        patch = settings.PATCH_SIZE
        h, w = validate_slice(image, patch)
        metas = [PatchMeta(volume_id="slice", slice_index=0, y=y, x=x)
                 for y in patch_offsets(h, patch, stride) for x in patch_offsets(w, patch, stride)]
        tiles = np.stack([image[m.y:m.y + patch, m.x:m.x + patch] for m in metas])[:, None]
        probs = np.concatenate([
            np.asarray(predictor.predict_proba(tiles[i:i + batch_size]))
            for i in range(0, len(tiles), batch_size)
        ])
        return self.dataset_service.stitch(list(zip(probs[:, 0], metas)), (h, w), threshold)

    def predict_volume(self, predictor: Predictor, v: VolumeGrid, plane: Plane = Plane.XY,
                       stride: int = settings.INFER_STRIDE, threshold: float = settings.THRESHOLD,
                       export_dir: Optional[str] = None) -> VolumeGrid:
        """
        Prédiction coupe par coupe (patches recouvrants, moyenne, seuil) puis
        réassemblage du masque 3D. Les coupes sont traitées en parallèle.
        """
        plane = Plane(plane)
        axis = {Plane.XY: 0, Plane.XZ: 1, Plane.YZ: 2}[plane]
        slices = [s for _, s in plane_slices(normalize_intensity(v.data), plane)]

        def work(i: int) -> np.ndarray:
            return self.predict_slice(predictor, slices[i], stride, threshold)

        with ThreadPoolExecutor(max_workers=max(1, settings.NUM_THREADS)) as pool:
            masks: List[np.ndarray] = list(pool.map(work, range(len(slices))))

        if export_dir is not None:
            for i, m in enumerate(masks):
                self.file_service.write_pgm(Path(export_dir) / f"slice_{plane.value}_{i:04d}.pgm", m)
            logger.info("📁 %d coupes exportées dans %s", len(masks), export_dir)

        volume = np.ascontiguousarray(np.moveaxis(np.stack(masks), 0, axis), dtype=np.uint8)
        logger.info("🔍 Volume %s prédit (plan %s, pas %d): %d voxels positifs",
                    v.dims, plane.value, stride, int(volume.sum()))
        return v.with_data(volume)

    def quantify_dendrites(self, mask: VolumeGrid, region: Optional[np.ndarray] = None) -> DendriteReport:
        """Volume (µm³) et fraction volumique des dendrites dans la région (volume entier par défaut)"""
        labels = validate_binary(mask.data).astype(bool)
        count = int(labels.sum())
        if region is None:
            inside, region_size = count, labels.size
        else:
            region = np.asarray(region, dtype=bool)
            if region.shape != labels.shape:
                raise ValueError(f"Région {region.shape} incompatible avec le masque {labels.shape}")
            inside, region_size = int((labels & region).sum()), int(region.sum())
        if region_size == 0:
            raise ValueError("Région de référence vide")
        return DendriteReport(
            voxel_count=count,
            volume_um3=count * mask.voxel_size ** 3,
            volume_fraction=inside / region_size,
            voxel_size_um=mask.voxel_size,
        )
