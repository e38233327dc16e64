"""
Métriques d'évaluation: matrice de confusion binaire, IoU (Jaccard), DSC (Dice),
moyennes par patch et tableau de résultats.
"""
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models import ConfusionCounts, MetricsRow
from utils.validators import validate_binary, validate_same_shape

TABLE_COLUMNS = ("model", "mIoU", "mDSC", "latency_ms", "patch_resolution")

def confusion(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionCounts:
    validate_same_shape(y_true, y_pred, "masques")
    t = validate_binary(y_true, "masque de vérité").astype(bool)
    p = validate_binary(y_pred, "masque prédit").astype(bool)
    tp = int(np.count_nonzero(t & p))
    fp = int(np.count_nonzero(~t & p))
    fn = int(np.count_nonzero(t & ~p))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=t.size - tp - fp - fn)

def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom

def dsc(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom

def mean_metrics(samples: Iterable[Tuple[np.ndarray, np.ndarray]]) -> Tuple[float, float]:
    """(mIoU, mDSC): moyenne arithmétique des scores par échantillon"""
    ious, dscs = [], []
    for truth, pred in samples:
        c = confusion(truth, pred)
        ious.append(iou(c))
        dscs.append(dsc(c))
    if not ious:
        raise ValueError("Aucun échantillon à évaluer")
    return float(np.mean(ious)), float(np.mean(dscs))

def format_metrics_table(rows: Sequence[MetricsRow]) -> str:
    lines = ["\t".join(TABLE_COLUMNS)]
    for row in rows:
        latency = "" if row.latency_ms is None else f"{row.latency_ms:.2f}"
        lines.append(f"{row.model}\t{row.miou:.4f}\t{row.mdsc:.4f}\t{latency}\t{row.patch_resolution}")
    return "\n".join(lines) + "\n"

def comparison_summary(rows: Sequence[MetricsRow], reference: Optional[str] = None) -> List[str]:
    """
    Gains relatifs de mIoU/mDSC par rapport au modèle de référence, et rapport de
    latence par rapport au modèle le plus rapide.
    """
    if not rows:
        return []
    by_name = {r.model: r for r in rows}
    ref = by_name.get(reference) if reference else rows[0]
    if ref is None:
        raise ValueError(f"Modèle de référence inconnu: {reference}")
    timed = [r for r in rows if r.latency_ms]
    fastest = min(timed, key=lambda r: r.latency_ms) if timed else None

    lines = []
    for r in rows:
        gain_iou = (r.miou - ref.miou) / ref.miou * 100 if ref.miou else 0.0
        gain_dsc = (r.mdsc - ref.mdsc) / ref.mdsc * 100 if ref.mdsc else 0.0
        line = f"{r.model}: mIoU {gain_iou:+.2f}% / mDSC {gain_dsc:+.2f}% vs {ref.model}"
        if fastest is not None and r.latency_ms:
            line += f", latence x{r.latency_ms / fastest.latency_ms:.2f} vs {fastest.model}"
        lines.append(line)
    return lines
