import logging
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from models import EnsembleScore, EnsembleSearchResult, EnsembleSpec
from utils.metrics import mean_metrics

logger = logging.getLogger(__name__)

def _check_maps(prob_maps: Mapping[str, np.ndarray], spec: EnsembleSpec) -> List[str]:
    names = sorted(prob_maps)
    if set(names) != set(spec.weights):
        raise ValueError(f"Modèles {names} et poids {sorted(spec.weights)} ne correspondent pas")
    shapes = {name: np.shape(prob_maps[name]) for name in names}
    if len(set(shapes.values())) != 1:
        raise ValueError(f"Cartes de probabilité de formes différentes: {shapes}")
    return names

def combine_probabilities(prob_maps: Mapping[str, np.ndarray], spec: EnsembleSpec) -> np.ndarray:
    """Combinaison convexe pixel par pixel, dans l'ordre alphabétique des modèles"""
    names = _check_maps(prob_maps, spec)
    first = np.asarray(prob_maps[names[0]])
    combined = np.zeros(first.shape, dtype=np.result_type(first.dtype, np.float32))
    for name in names:
        combined += spec.weights[name] * np.asarray(prob_maps[name])
    return combined

def enet_predict(prob_maps: Mapping[str, np.ndarray], spec: EnsembleSpec) -> np.ndarray:
    """Masque binaire: 1 si la probabilité combinée est strictement supérieure au seuil"""
    return (combine_probabilities(prob_maps, spec) > spec.threshold).astype(np.uint8)

def weight_grid(names: Sequence[str], grid_step: float = 0.1) -> Iterator[Dict[str, float]]:
    """Points du simplexe au pas grid_step, en ordre lexicographique croissant"""
    if not names:
        raise ValueError("Grille vide: aucun modèle")
    if not 0 < grid_step <= 1:
        raise ValueError(f"Pas de grille invalide: {grid_step}")
    steps = round(1 / grid_step)
    if abs(steps * grid_step - 1) > 1e-9:
        raise ValueError(f"Le pas {grid_step} ne divise pas 1")
    names = sorted(names)

    def compositions(total: int, parts: int) -> Iterator[Tuple[int, ...]]:
        if parts == 1:
            yield (total,)
            return
        for first in range(total + 1):
            for rest in compositions(total - first, parts - 1):
                yield (first,) + rest

    for combo in compositions(steps, len(names)):
        yield {name: k / steps for name, k in zip(names, combo)}

class EnsembleModel:
    """E-Net: prédicteur qui combine les probabilités de ses composants"""

    def __init__(self, models: Mapping[str, object], spec: EnsembleSpec):
        if set(models) != set(spec.weights):
            raise ValueError(f"Modèles {sorted(models)} et poids {sorted(spec.weights)} ne correspondent pas")
        self.models = dict(models)
        self.spec = spec
        self.name = "enet"

    def predict_components(self, batch: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: self.models[name].predict_proba(batch) for name in sorted(self.models)}

    def combine(self, prob_maps: Mapping[str, np.ndarray]) -> np.ndarray:
        return combine_probabilities(prob_maps, self.spec)

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        return self.combine(self.predict_components(batch))

class EnsembleService:
    def search_weights(self, prob_maps: Mapping[str, np.ndarray], truths: np.ndarray,
                       grid_step: float = 0.1, threshold: float = 0.5) -> EnsembleSearchResult:
        """
        Recherche exhaustive des poids maximisant le mIoU de validation.

        prob_maps associe à chaque modèle ses probabilités [S,1,H,W] (ou [S,H,W]) sur
        les S échantillons; truths contient les masques [S,H,W]. En cas d'égalité, le
        premier point de grille (ordre lexicographique) est conservé.
        """
        if not prob_maps:
            raise ValueError("Grille vide: aucun modèle")
        truths = np.asarray(truths)
        if truths.shape[0] == 0:
            raise ValueError("Jeu de validation vide")
        maps = {name: np.asarray(p).reshape(truths.shape) for name, p in prob_maps.items()}

        scores: List[EnsembleScore] = []
        best = None
        for weights in weight_grid(list(maps), grid_step):
            spec = EnsembleSpec(weights=weights, threshold=threshold)
            preds = enet_predict(maps, spec)
            miou, mdsc = mean_metrics(zip(truths, preds))
            score = EnsembleScore(weights=weights, miou=miou, mdsc=mdsc)
            scores.append(score)
            if best is None or score.miou > best.miou:
                best = score

        logger.info("🔍 Meilleur ensemble %s (mIoU %.4f sur %d points)", best.weights, best.miou, len(scores))
        return EnsembleSearchResult(
            spec=EnsembleSpec(weights=best.weights, threshold=threshold),
            best_miou=best.miou,
            scores=scores,
        )

def ensemble_weight_search(prob_maps: Mapping[str, np.ndarray], truths: np.ndarray,
                           grid_step: float = 0.1, threshold: float = 0.5) -> EnsembleSearchResult:
    return EnsembleService().search_weights(prob_maps, truths, grid_step, threshold)
