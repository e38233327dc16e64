import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Type, TypeVar

import numpy as np
from pydantic import BaseModel

from models import (
    VOXEL_DTYPES, CheckpointMeta, PatchIndex, PatchIndexEntry, PatchSample, TrainConfig,
    TrainHistory, VolumeGrid, VolumeHeader,
)
from nn.architectures import SegmentationModel, build_model

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

CHECKPOINT_MAGIC = b"DSEG"
CHECKPOINT_VERSION = 1
SPLITS = ("train", "val", "test")
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_dice", "val_dice", "wall_seconds")

def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".raw") else path

class _Reader:
    """Lecture séquentielle avec détection de troncature"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise ValueError(
                f"Checkpoint tronqué à l'octet {self.offset}: {n} octets attendus, {len(self.payload) - self.offset} disponibles"
            )
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

class FileService:
    def ensure_directory(self, path) -> Path:
        """Crée le dossier s'il n'existe pas"""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def load_config(self, path, model: Type[M]) -> M:
        """Charge un document JSON validé par un modèle pydantic"""
        text = Path(path).read_text(encoding="utf-8")
        return model.model_validate_json(text)

    def write_json(self, path, document: BaseModel) -> Path:
        path = Path(path)
        self.ensure_directory(path.parent)
        path.write_text(document.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    # ------------------------------------------------------------------
    # Volumes: <stem>.json + <stem>.raw (little-endian, z puis y puis x)
    # ------------------------------------------------------------------

    def save_volume(self, v: VolumeGrid, path) -> Tuple[Path, Path]:
        stem = _stem(path)
        self.ensure_directory(stem.parent)
        header = v.header()
        header_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
        header_path.write_text(header.model_dump_json(indent=2) + "\n", encoding="utf-8")
        raw_path.write_bytes(np.ascontiguousarray(v.data, dtype=VOXEL_DTYPES[header.dtype]).tobytes())
        logger.info("📁 Volume %s écrit (%s, %s)", stem.name, header.dims, header.dtype.value)
        return header_path, raw_path

    def load_volume(self, path) -> VolumeGrid:
        stem = _stem(path)
        header = VolumeHeader.model_validate_json(stem.with_suffix(".json").read_text(encoding="utf-8"))
        dtype = VOXEL_DTYPES[header.dtype]
        raw = stem.with_suffix(".raw").read_bytes()
        expected = int(np.prod(header.dims)) * dtype.itemsize
        if len(raw) != expected:
            raise ValueError(f"Taille du volume {stem.name}: {len(raw)} octets, {expected} attendus pour {header.dims}")
        data = np.frombuffer(raw, dtype=dtype).reshape(header.dims).astype(dtype.newbyteorder("="))
        return VolumeGrid(data=data, voxel_size=header.voxel_size_um, axes=header.axes, generator=header.generator)

    # ------------------------------------------------------------------
    # Jeu de patches: index.json, images.bin (f32), masks.bin (u8)
    # ------------------------------------------------------------------

    def save_patch_dataset(self, directory, splits: Dict[str, List[PatchSample]], patch_size: int,
                           seed: Optional[int] = None) -> Path:
        directory = self.ensure_directory(directory)
        entries = []
        image_offset = mask_offset = 0
        with open(directory / "images.bin", "wb") as images, open(directory / "masks.bin", "wb") as masks:
            for split in SPLITS:
                for sample in splits.get(split, []):
                    if sample.image.shape != (patch_size, patch_size):
                        raise ValueError(f"Patch {sample.image.shape} incompatible avec la taille {patch_size}")
                    entries.append(PatchIndexEntry(id=len(entries), split=split, meta=sample.meta,
                                                   image_offset=image_offset, mask_offset=mask_offset))
                    image_offset += images.write(sample.image.astype("<f4").tobytes())
                    mask_offset += masks.write(sample.mask.astype(np.uint8).tobytes())
        index = PatchIndex(patch_size=patch_size, seed=seed, entries=entries)
        self.write_json(directory / "index.json", index)
        logger.info("📁 Jeu de données écrit: %d patches dans %s", len(entries), directory)
        return directory

    def load_patch_dataset(self, directory) -> Dict[str, List[PatchSample]]:
        directory = Path(directory)
        index = self.load_config(directory / "index.json", PatchIndex)
        p = index.patch_size
        images = np.fromfile(directory / "images.bin", dtype="<f4")
        masks = np.fromfile(directory / "masks.bin", dtype=np.uint8)
        splits: Dict[str, List[PatchSample]] = {name: [] for name in SPLITS}
        for entry in index.entries:
            start_i = entry.image_offset // 4
            start_m = entry.mask_offset
            if start_i + p * p > images.size or start_m + p * p > masks.size:
                raise ValueError(f"Patch {entry.id} hors des fichiers binaires (décalage {entry.image_offset})")
            splits[entry.split].append(PatchSample(
                image=images[start_i:start_i + p * p].reshape(p, p).astype(np.float32),
                mask=masks[start_m:start_m + p * p].reshape(p, p).copy(),
                meta=entry.meta,
            ))
        return splits

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def save_checkpoint(self, model: SegmentationModel, path, train_config: Optional[TrainConfig] = None,
                        history: Optional[TrainHistory] = None) -> Path:
        """
        Format: "DSEG", u32 version, u64 longueur + configuration JSON UTF-8,
        u32 nombre de tenseurs, puis par tenseur: u16 longueur + nom, u8 rang,
        u32 dims, charge utile float32 little-endian.
        """
        path = Path(path)
        self.ensure_directory(path.parent)
        meta = CheckpointMeta(version=CHECKPOINT_VERSION, architecture=model.describe(),
                              train_config=train_config, history=history)
        config = meta.model_dump_json().encode("utf-8")
        params = list(model.named_parameters())

        chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
                  struct.pack("<Q", len(config)), config, struct.pack("<I", len(params))]
        for name, p in params:
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)) + encoded)
            chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        path.write_bytes(b"".join(chunks))
        logger.info("💾 Checkpoint %s écrit (%d tenseurs)", path.name, len(params))
        return path

    def read_checkpoint(self, path) -> Tuple[CheckpointMeta, Dict[str, np.ndarray]]:
        reader = _Reader(Path(path).read_bytes())
        magic = reader.take(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"Signature de checkpoint invalide: {magic!r}")
        (version,) = reader.unpack("<I")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"Version de checkpoint non supportée: {version} (attendu {CHECKPOINT_VERSION})")
        (length,) = reader.unpack("<Q")
        meta = CheckpointMeta.model_validate_json(reader.take(length).decode("utf-8"))
        (count,) = reader.unpack("<I")
        state: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (rank,) = reader.unpack("<B")
            dims = reader.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if dims else 1
            state[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if reader.offset != len(reader.payload):
            raise ValueError(f"Octets inattendus après le dernier tenseur (octet {reader.offset})")
        return meta, state

    def load_checkpoint(self, path) -> Tuple[SegmentationModel, CheckpointMeta]:
        """Reconstruit le modèle en float32 (précision de la charge utile)"""
        meta, state = self.read_checkpoint(path)
        model = build_model(meta.architecture.name, meta.architecture.seed).to_dtype(np.float32)
        model.load_state_dict(state)
        logger.info("💾 Checkpoint %s chargé (%s)", Path(path).name, meta.architecture.name.value)
        return model, meta

    # ------------------------------------------------------------------
    # Exports texte et images
    # ------------------------------------------------------------------

    def write_pgm(self, path, mask: np.ndarray) -> Path:
        """Image binaire 8 bits P5, premier plan à 255"""
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ValueError(f"Image 2D attendue, reçu {mask.shape}")
        path = Path(path)
        self.ensure_directory(path.parent)
        h, w = mask.shape
        pixels = np.where(mask > 0, 255, 0).astype(np.uint8)
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
        return path

    def read_pgm(self, path) -> np.ndarray:
        payload = Path(path).read_bytes()
        parts = payload.split(b"\n", 3)
        if len(parts) < 4 or parts[0] != b"P5":
            raise ValueError(f"Fichier PGM P5 invalide: {path}")
        w, h = (int(v) for v in parts[1].split())
        return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)

    def write_history(self, history: TrainHistory, path) -> Path:
        lines = ["\t".join(HISTORY_COLUMNS)]
        for row in history.rows:
            lines.append("\t".join(str(getattr(row, col)) for col in HISTORY_COLUMNS))
        return self.write_text(path, "\n".join(lines) + "\n")

    def write_text(self, path, text: str) -> Path:
        path = Path(path)
        self.ensure_directory(path.parent)
        path.write_text(text, encoding="utf-8")
        return path

