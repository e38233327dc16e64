"""
Mesure de latence par patch (protocole fixe: un patch par passe, warmup exclu).
"""
import logging
import os
import platform
import time
from typing import Dict, Optional, Sequence

import numpy as np

from config import settings
from models import BenchResult, EnsembleBenchResult
from services.ensemble_service import EnsembleModel
from utils.metrics import mean_metrics
from utils.validators import validate_bench_counts

logger = logging.getLogger(__name__)

def environment() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "omp_threads": os.environ.get("OMP_NUM_THREADS", "non défini"),
        "workers": str(settings.NUM_THREADS),
    }

def _protocol(warmup: int, reps: int) -> str:
    return f"1 patch/passe, {reps} mesures après {warmup} passes de chauffe exclues, perf_counter"

def _as_batch(patches) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[:, None]
    if patches.ndim != 4 or len(patches) == 0:
        raise ValueError(f"Patches [S,1,P,P] attendus, reçu {patches.shape}")
    return patches

def _precision(predictor) -> str:
    dtype = getattr(predictor, "dtype", None)
    return str(dtype) if dtype is not None else settings.TRAIN_DTYPE

class BenchService:
    def _quality(self, predictor, patches: np.ndarray, truths, threshold: float):
        if truths is None:
            return None, None
        probs = np.concatenate([predictor.predict_proba(patches[i:i + 1]) for i in range(len(patches))])
        preds = (probs[:, 0] > threshold).astype(np.uint8)
        return mean_metrics(zip(np.asarray(truths).reshape(preds.shape), preds))

    def bench_latency(self, predictor, patches, warmup: int = settings.BENCH_WARMUP,
                      reps: int = settings.BENCH_REPS, name: Optional[str] = None,
                      truths: Optional[Sequence[np.ndarray]] = None,
                      threshold: float = settings.THRESHOLD) -> BenchResult:
        validate_bench_counts(reps, warmup)
        batch = _as_batch(patches)
        for i in range(warmup):
            predictor.predict_proba(batch[i % len(batch)][None])

        timings = []
        for i in range(reps):
            patch = batch[i % len(batch)][None]
            started = time.perf_counter()
            predictor.predict_proba(patch)
            timings.append((time.perf_counter() - started) * 1000)

        miou, mdsc = self._quality(predictor, batch, truths, threshold)
        label = name or str(getattr(predictor, "name", "model"))
        label = getattr(label, "value", label)
        result = BenchResult(
            model=label,
            mean_latency_ms=float(np.mean(timings)),
            std_latency_ms=float(np.std(timings)),
            samples=reps,
            miou=miou,
            mdsc=mdsc,
            patch_resolution=f"{batch.shape[-2]}x{batch.shape[-1]}",
            threads=settings.NUM_THREADS,
            precision=_precision(predictor),
            protocol=_protocol(warmup, reps),
            environment=environment(),
        )
        logger.info("⏱️ %s: %.2f ± %.2f ms par patch", label, result.mean_latency_ms, result.std_latency_ms)
        return result

    def bench_combination(self, ensemble: EnsembleModel, patches, warmup: int = settings.BENCH_WARMUP,
                          reps: int = settings.BENCH_REPS) -> float:
        """Coût moyen (ms) de la seule combinaison, sur des cartes déjà calculées"""
        validate_bench_counts(reps, warmup)
        batch = _as_batch(patches)
        maps = [ensemble.predict_components(batch[i:i + 1]) for i in range(len(batch))]
        for i in range(warmup):
            ensemble.combine(maps[i % len(maps)])
        timings = []
        for i in range(reps):
            started = time.perf_counter()
            ensemble.combine(maps[i % len(maps)])
            timings.append((time.perf_counter() - started) * 1000)
        return float(np.mean(timings))

    def bench_ensemble(self, ensemble: EnsembleModel, patches, warmup: int = settings.BENCH_WARMUP,
                       reps: int = settings.BENCH_REPS, truths: Optional[Sequence[np.ndarray]] = None,
                       threshold: Optional[float] = None) -> EnsembleBenchResult:
        """
        Latence de l'E-Net et sa décomposition, chaque terme mesuré dans sa propre
        série: composants seuls, combinaison seule, puis l'E-Net complet.
        """
        threshold = ensemble.spec.threshold if threshold is None else threshold
        components = {
            name: self.bench_latency(ensemble.models[name], patches, warmup, reps, name, truths, threshold)
            for name in sorted(ensemble.models)
        }
        combination_ms = self.bench_combination(ensemble, patches, warmup, reps)
        total = self.bench_latency(ensemble, patches, warmup, reps, ensemble.name, truths, threshold)

        bench = EnsembleBenchResult(ensemble=total, components=components, combination_ms=combination_ms)
        logger.info("⏱️ E-Net: %.2f ms (composants %s, combinaison %.3f ms)", total.mean_latency_ms,
                    {n: round(r.mean_latency_ms, 2) for n, r in components.items()}, combination_ms)
        return bench
