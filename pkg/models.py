import math
from enum import Enum
from itertools import combinations
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import settings

class ModelName(str, Enum):
    UNET = "unet"
    YNET = "ynet"
    TNET = "tnet"

class LossName(str, Enum):
    BCE = "bce"
    BALANCED_BCE = "balanced_bce"
    TVERSKY = "tversky"
    FOCAL_TVERSKY = "focal_tversky"

class OptimizerName(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"

class Plane(str, Enum):
    XY = "xy"
    XZ = "xz"
    YZ = "yz"

class Interpolation(str, Enum):
    BILINEAR = "bilinear"
    NEAREST = "nearest"

class VoxelDtype(str, Enum):
    U8 = "u8"
    U16 = "u16"
    F32 = "f32"

# Correspondance code de fichier -> dtype numpy (little-endian)
VOXEL_DTYPES = {
    VoxelDtype.U8: np.dtype("<u1"),
    VoxelDtype.U16: np.dtype("<u2"),
    VoxelDtype.F32: np.dtype("<f4"),
}

def voxel_code(dtype: np.dtype) -> VoxelDtype:
    """Retourne le code de fichier d'un dtype numpy supporté"""
    for code, candidate in VOXEL_DTYPES.items():
        if np.dtype(dtype) == candidate:
            return code
    raise ValueError(f"Type de voxel non supporté: {dtype} (attendu u8, u16 ou f32)")

Point = Tuple[float, float]

# ---------------------------------------------------------------------------
# Autodiff
# ---------------------------------------------------------------------------

class GradCheckReport(BaseModel):
    passed: bool
    max_rel_error: float
    checked: int
    worst_index: Optional[Tuple[int, ...]] = None
    nan_index: Optional[Tuple[int, ...]] = None

class PositionalEncoding(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    num_tokens: int = Field(gt=0)
    embed_dim: int = Field(gt=0)
    table: np.ndarray  # [num_tokens, embed_dim], non entraînable

    @model_validator(mode="after")
    def validate_table(self):
        if self.table.shape != (self.num_tokens, self.embed_dim):
            raise ValueError(f"Table {self.table.shape} incompatible avec ({self.num_tokens}, {self.embed_dim})")
        return self

# ---------------------------------------------------------------------------
# Pertes et métriques
# ---------------------------------------------------------------------------

class LossParams(BaseModel):
    beta: Optional[float] = None  # None -> valeur par défaut propre à chaque perte
    gamma: float = Field(0.75, gt=0)

    @field_validator("beta")
    @classmethod
    def validate_beta(cls, v):
        if v is not None and not 0 < v < 1:
            raise ValueError(f"beta doit être dans (0,1), reçu {v}")
        return v

    def beta_for(self, loss: "LossName") -> float:
        """Beta effectif: 0.7 pour Tversky, 0.5 pour la BCE équilibrée"""
        if self.beta is not None:
            return self.beta
        return 0.5 if loss == LossName.BALANCED_BCE else 0.7

class ConfusionCounts(BaseModel):
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

class MetricsRow(BaseModel):
    model: str
    miou: float
    mdsc: float
    latency_ms: Optional[float] = None
    patch_resolution: str = f"{settings.PATCH_SIZE}x{settings.PATCH_SIZE}"

# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

class EnsembleSpec(BaseModel):
    weights: Dict[str, float]
    threshold: float = Field(settings.THRESHOLD, ge=0, le=1)

    @field_validator("weights")
    @classmethod
    def validate_weights(cls, v):
        if not v:
            raise ValueError("Au moins un modèle est requis dans l'ensemble")
        negatives = {k: w for k, w in v.items() if w < 0}
        if negatives:
            raise ValueError(f"Poids négatifs: {negatives}")
        total = sum(v.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Les poids doivent sommer à 1 (somme={total!r})")
        return v

class EnsembleScore(BaseModel):
    weights: Dict[str, float]
    miou: float
    mdsc: float

class EnsembleSearchResult(BaseModel):
    spec: EnsembleSpec
    best_miou: float
    scores: List[EnsembleScore]

# ---------------------------------------------------------------------------
# Volumes et géométrie
# ---------------------------------------------------------------------------

class VolumeHeader(BaseModel):
    dims: Tuple[int, int, int]
    dtype: VoxelDtype
    voxel_size_um: float = Field(gt=0)
    endianness: Literal["little"] = "little"
    axes: Tuple[str, str, str] = ("z", "y", "x")
    generator: Optional[str] = None

class VolumeGrid(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    voxel_size: float = Field(settings.VOXEL_SIZE_UM, gt=0)
    axes: Tuple[str, str, str] = ("z", "y", "x")
    generator: Optional[str] = None

    @field_validator("data")
    @classmethod
    def validate_data(cls, v):
        if v.ndim != 3:
            raise ValueError(f"Un volume doit être 3D (z, y, x), reçu {v.shape}")
        voxel_code(v.dtype)
        return v

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray) -> "VolumeGrid":
        """Nouveau volume avec les mêmes métadonnées"""
        return VolumeGrid(data=data, voxel_size=self.voxel_size, axes=self.axes, generator=self.generator)

    def header(self) -> VolumeHeader:
        return VolumeHeader(
            dims=self.dims,
            dtype=voxel_code(self.data.dtype),
            voxel_size_um=self.voxel_size,
            axes=self.axes,
            generator=self.generator,
        )

class Homography(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    h: np.ndarray

    @field_validator("h", mode="before")
    @classmethod
    def normalize(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (3, 3):
            raise ValueError(f"Une homographie est une matrice 3x3, reçu {v.shape}")
        if abs(v[2, 2]) < 1e-15:
            raise ValueError("h[2][2] nul: impossible de normaliser l'homographie")
        v = v / v[2, 2]
        det = float(np.linalg.det(v))
        if not abs(det) > 1e-12:
            raise ValueError(f"Homographie non inversible (det={det:.3e})")
        return v

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Applique H à des points (N, 2) en coordonnées (x, y)"""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        homog = np.hstack([pts, np.ones((pts.shape[0], 1))]) @ self.h.T
        return homog[:, :2] / homog[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(h=np.linalg.inv(self.h))

class CornerSet(BaseModel):
    plane: Plane = Plane.XY
    source: List[Point]  # haut-gauche, haut-droit, bas-droit, bas-gauche
    width: int = Field(gt=1)
    height: int = Field(gt=1)

    @field_validator("source")
    @classmethod
    def validate_source(cls, v):
        if len(v) != 4:
            raise ValueError(f"Quatre coins sont requis, reçu {len(v)}")
        pts = np.asarray(v, dtype=np.float64)
        scale = max(float(np.ptp(pts, axis=0).max()), 1.0)
        for a, b, c in combinations(range(4), 3):
            cross = (pts[b, 0] - pts[a, 0]) * (pts[c, 1] - pts[a, 1]) - (pts[b, 1] - pts[a, 1]) * (pts[c, 0] - pts[a, 0])
            if abs(cross) <= 1e-9 * scale * scale:
                raise ValueError(f"Coins dégénérés: les points {a}, {b}, {c} sont colinéaires")
        return v

    @property
    def target(self) -> List[Point]:
        w, h = self.width - 1, self.height - 1
        return [(0.0, 0.0), (float(w), 0.0), (float(w), float(h)), (0.0, float(h))]

# ---------------------------------------------------------------------------
# Jeu de données
# ---------------------------------------------------------------------------

class PatchMeta(BaseModel):
    volume_id: str
    slice_index: int = Field(ge=0)
    y: int = Field(ge=0)
    x: int = Field(ge=0)

class PatchSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray
    mask: np.ndarray
    meta: PatchMeta

    @model_validator(mode="after")
    def validate_arrays(self):
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ValueError(f"Image {self.image.shape} et masque {self.mask.shape} incompatibles")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError("Les valeurs de l'image doivent être dans [0,1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("Le masque doit être binaire {0,1}")
        return self

class SplitSpec(BaseModel):
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int

    @field_validator("fractions")
    @classmethod
    def validate_fractions(cls, v):
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"Fractions invalides {v}: positives et de somme 1")
        return v

class DatasetSplits(BaseModel):
    train: List[PatchSample]
    val: List[PatchSample]
    test: List[PatchSample]

class AugmentConfig(BaseModel):
    rotation: bool = True
    hflip: bool = True
    vflip: bool = True
    crop_frac: float = Field(0.02, ge=0, le=0.1)  # fraction du côté
    max_shift: int = Field(12, ge=0)
    zoom_range: Tuple[float, float] = (0.8, 1.0)
    brightness: float = Field(0.05, ge=0, le=0.5)
    contrast: float = Field(0.05, ge=0, le=0.5)
    probability: float = Field(0.5, ge=0, le=1)
    seed: int = 0

    @field_validator("zoom_range")
    @classmethod
    def validate_zoom(cls, v):
        lo, hi = v
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"zoom_range doit vérifier 0 < min <= max <= 1, reçu {v}")
        return v

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(rotation=False, hflip=False, vflip=False, crop_frac=0.0, max_shift=0,
                   zoom_range=(1.0, 1.0), brightness=0.0, contrast=0.0, seed=seed)

class PatchIndexEntry(BaseModel):
    id: int
    split: Literal["train", "val", "test"]
    meta: PatchMeta
    image_offset: int
    mask_offset: int

class PatchIndex(BaseModel):
    patch_size: int
    seed: Optional[int] = None
    entries: List[PatchIndexEntry]

# ---------------------------------------------------------------------------
# Fantômes
# ---------------------------------------------------------------------------

class PhantomConfig(BaseModel):
    dims: Tuple[int, int, int] = (16, 512, 512)
    electrode_thickness: int = Field(64, ge=1)  # le long de l'axe y
    dendrite_count: int = Field(12, ge=0)
    branch_prob: float = Field(0.08, ge=0, le=1)
    step_len: float = Field(2.0, gt=0)
    max_steps: int = Field(60, ge=1)
    max_branches: int = Field(6, ge=0)
    radius_range: Tuple[int, int] = (2, 4)
    intensity: Tuple[float, float, float] = (0.35, 0.15, 0.75)  # électrolyte, Li, dendrite
    porosity: float = Field(0.1, ge=0, lt=1)
    noise_sigma: float = Field(0.05, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_geometry(self):
        nz, ny, nx = self.dims
        if min(self.dims) < 1:
            raise ValueError(f"Dimensions invalides {self.dims}")
        if 2 * self.electrode_thickness >= ny:
            raise ValueError(f"2 x épaisseur d'électrode ({self.electrode_thickness}) doit être < ny ({ny})")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise ValueError(f"radius_range invalide {self.radius_range}")
        if len(set(self.intensity)) != 3 or not all(0 <= v <= 1 for v in self.intensity):
            raise ValueError(f"Intensités distinctes dans [0,1] requises, reçu {self.intensity}")
        return self

class Phantom(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    volume: VolumeGrid
    mask: VolumeGrid
    dendrite_voxels: int
    config: PhantomConfig

    @model_validator(mode="after")
    def validate_dims(self):
        if self.volume.dims != self.mask.dims:
            raise ValueError(f"Volume {self.volume.dims} et masque {self.mask.dims} incompatibles")
        return self

class DendriteReport(BaseModel):
    voxel_count: int
    volume_um3: float
    volume_fraction: float
    voxel_size_um: float

# ---------------------------------------------------------------------------
# Entraînement
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    model: ModelName = ModelName.TNET
    loss: LossName = LossName.BCE
    epochs: Optional[int] = Field(None, ge=1)  # None -> préréglage du modèle
    batch_size: int = Field(settings.BATCH_SIZE, ge=1)
    learning_rate: float = Field(settings.LEARNING_RATE, ge=0)
    optimizer: OptimizerName = OptimizerName.ADAM
    seed: int
    loss_params: LossParams = LossParams()
    precision: Literal["float32", "float64"] = settings.TRAIN_DTYPE
    augment: Optional[AugmentConfig] = None

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return {
            ModelName.UNET: settings.EPOCHS_UNET,
            ModelName.YNET: settings.EPOCHS_YNET,
            ModelName.TNET: settings.EPOCHS_TNET,
        }[self.model]

class TrainHistoryRow(BaseModel):
    epoch: int = Field(ge=1)
    train_loss: float
    val_loss: float
    train_dice: float
    val_dice: float
    wall_seconds: float

    @model_validator(mode="after")
    def validate_finite(self):
        values = (self.train_loss, self.val_loss, self.train_dice, self.val_dice, self.wall_seconds)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Valeurs non finies à l'époque {self.epoch}")
        return self

class TrainHistory(BaseModel):
    rows: List[TrainHistoryRow] = []

    @field_validator("rows")
    @classmethod
    def validate_order(cls, v):
        epochs = [r.epoch for r in v]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"Époques non strictement croissantes: {epochs}")
        return v

    def best_row(self) -> Optional[TrainHistoryRow]:
        """Première ligne atteignant le meilleur dice de validation"""
        best = None
        for row in self.rows:
            if best is None or row.val_dice > best.val_dice:
                best = row
        return best

class ArchitectureConfig(BaseModel):
    name: ModelName
    seed: int
    layout: Dict[str, Any] = {}

class CheckpointMeta(BaseModel):
    version: int
    architecture: ArchitectureConfig
    train_config: Optional[TrainConfig] = None
    history: Optional[TrainHistory] = None

# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

class BenchResult(BaseModel):
    model: str
    mean_latency_ms: float = Field(gt=0)
    std_latency_ms: float = Field(ge=0)
    samples: int = Field(ge=30)
    miou: Optional[float] = None
    mdsc: Optional[float] = None
    patch_resolution: str = f"{settings.PATCH_SIZE}x{settings.PATCH_SIZE}"
    threads: int = 1
    precision: str = settings.TRAIN_DTYPE
    protocol: str = ""
    environment: Dict[str, str] = {}

class EnsembleBenchResult(BaseModel):
    ensemble: BenchResult
    components: Dict[str, BenchResult]
    combination_ms: float
