from typing import Optional, Tuple

import numpy as np

def validate_binary(mask: np.ndarray, name: str = "masque") -> np.ndarray:
    """Vérifie qu'un tableau ne contient que 0 et 1"""
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        bad = np.unique(mask[~np.isin(mask, (0, 1))])[:5]
        raise ValueError(f"Le {name} doit être binaire {{0,1}}, valeurs trouvées: {bad.tolist()}")
    return mask

def validate_same_shape(a: np.ndarray, b: np.ndarray, what: str = "tableaux") -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"Formes incompatibles pour les {what}: {np.shape(a)} et {np.shape(b)}")

def validate_slice(grid: np.ndarray, patch: int) -> Tuple[int, int]:
    """Une coupe 2D doit contenir au moins un patch complet"""
    if np.ndim(grid) != 2:
        raise ValueError(f"Coupe 2D attendue, reçu {np.shape(grid)}")
    h, w = grid.shape
    if h < patch or w < patch:
        raise ValueError(f"Coupe {h}x{w} plus petite que le patch {patch}x{patch}")
    return h, w

def validate_seed(seed: Optional[int]) -> int:
    if seed is None:
        raise ValueError("Une graine explicite (--seed) est requise")
    if seed < 0:
        raise ValueError(f"Graine négative: {seed}")
    return int(seed)

def validate_bench_counts(reps: int, warmup: int) -> None:
    if reps < 30 or warmup < 5:
        raise ValueError(f"Protocole insuffisant: reps={reps} (min 30), warmup={warmup} (min 5)")

