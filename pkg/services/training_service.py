import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import settings
from models import DatasetSplits, PatchSample, TrainConfig, TrainHistory, TrainHistoryRow
from nn.architectures import SegmentationModel
from nn.losses import compute_loss
from nn.optim import build_optimizer
from nn.tensor import Tape, Tensor, backward, no_grad
from services.dataset_service import DatasetService, sample_rng
from utils.metrics import confusion, dsc

logger = logging.getLogger(__name__)

def stack_batch(samples: Sequence[PatchSample], dtype) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])[:, None].astype(dtype)
    masks = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return images, masks

def batch_dice(probs: np.ndarray, masks: np.ndarray, threshold: float = settings.THRESHOLD) -> List[float]:
    """DSC par patch des prédictions seuillées"""
    preds = (probs > threshold).astype(np.uint8)
    return [dsc(confusion(m.reshape(m.shape[-2:]).astype(np.uint8), p.reshape(p.shape[-2:])))
            for m, p in zip(masks, preds)]

class TrainingService:
    def __init__(self):
        self.dataset_service = DatasetService()

    def _augmented(self, samples: List[PatchSample], order: np.ndarray, cfg: TrainConfig,
                   epoch: int) -> List[PatchSample]:
        if cfg.augment is None:
            return [samples[i] for i in order]

        def work(i: int) -> PatchSample:
            return self.dataset_service.augment(samples[i], cfg.augment, sample_rng(cfg.seed, int(i), epoch))

        # L'ordre des résultats suit `order`, quel que soit le nombre de workers
        with ThreadPoolExecutor(max_workers=max(1, settings.NUM_THREADS)) as pool:
            return list(pool.map(work, order))

    def _evaluate(self, model: SegmentationModel, samples: List[PatchSample], cfg: TrainConfig,
                  dtype) -> Tuple[float, float]:
        losses, dices = [], []
        with no_grad():
            for start in range(0, len(samples), cfg.batch_size):
                images, masks = stack_batch(samples[start:start + cfg.batch_size], dtype)
                yhat = model(Tensor(images))
                loss = compute_loss(cfg.loss, masks, yhat, cfg.loss_params)
                losses.append(loss.item() * len(images))
                dices.extend(batch_dice(yhat.data, masks))
        return sum(losses) / len(samples), float(np.mean(dices))

    def train(self, model: SegmentationModel, data: DatasetSplits,
              cfg: TrainConfig) -> Tuple[SegmentationModel, TrainHistory]:
        """
        Descente de gradient par mini-lots sur data.train, suivi sur data.val.

        Le modèle rendu porte les paramètres de l'époque au meilleur dice de
        validation (première occurrence en cas d'égalité).
        """
        if not data.train or not data.val:
            raise ValueError(f"Jeux d'entraînement ({len(data.train)}) et de validation ({len(data.val)}) requis")

        dtype = np.dtype(cfg.precision)
        model.to_dtype(dtype)
        optimizer = build_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate)
        epochs = cfg.resolved_epochs()
        rows: List[TrainHistoryRow] = []
        best_dice, best_state = -math.inf, None

        logger.info("🏋️ Entraînement %s: %d époques, %d/%d patches, perte %s, optimiseur %s",
                    model.name.value, epochs, len(data.train), len(data.val), cfg.loss.value, cfg.optimizer.value)

        progress = tqdm(range(1, epochs + 1), desc=f"{model.name.value}", disable=not settings.SHOW_PROGRESS)
        for epoch in progress:
            started = time.perf_counter()
            order = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, epoch]))).permutation(len(data.train))
            batch_samples = self._augmented(data.train, order, cfg, epoch)

            losses, dices = [], []
            for b, start in enumerate(range(0, len(batch_samples), cfg.batch_size)):
                images, masks = stack_batch(batch_samples[start:start + cfg.batch_size], dtype)
                dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, epoch, b, 1])))
                with Tape() as tape:
                    yhat = model(Tensor(images), training=True, rng=dropout_rng)
                    loss = compute_loss(cfg.loss, masks, yhat, cfg.loss_params)
                value = loss.item()
                if not math.isfinite(value):
                    raise RuntimeError(f"Perte non finie ({value}) à l'époque {epoch}, lot {b}")
                optimizer.zero_grad()
                backward(loss, tape, model.parameters())
                optimizer.step()
                losses.append(value * len(images))
                dices.extend(batch_dice(yhat.data, masks))

            train_loss = sum(losses) / len(batch_samples)
            val_loss, val_dice = self._evaluate(model, data.val, cfg, dtype)
            row = TrainHistoryRow(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                                  train_dice=float(np.mean(dices)), val_dice=val_dice,
                                  wall_seconds=time.perf_counter() - started)
            rows.append(row)
            if val_dice > best_dice:
                best_dice = val_dice
                best_state = {name: p.copy() for name, p in model.state_dict().items()}

            progress.set_postfix(loss=f"{train_loss:.4f}", val_dice=f"{val_dice:.4f}")
            logger.info("🏋️ Époque %d/%d: perte %.4f, dice %.4f, val perte %.4f, val dice %.4f",
                        epoch, epochs, train_loss, row.train_dice, val_loss, val_dice)

        model.load_state_dict(best_state)
        history = TrainHistory(rows=rows)
        logger.info("✅ Meilleur dice de validation %.4f (époque %d)", best_dice, history.best_row().epoch)
        return model, history

    def fit_steps(self, model: SegmentationModel, samples: List[PatchSample], cfg: TrainConfig,
                  steps: int) -> List[float]:
        """Optimise sur un lot fixe pendant `steps` itérations; rend les dice d'entraînement"""
        dtype = np.dtype(cfg.precision)
        model.to_dtype(dtype)
        optimizer = build_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate)
        images, masks = stack_batch(samples, dtype)
        dices = []
        for step in range(steps):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, step])))
            with Tape() as tape:
                yhat = model(Tensor(images), training=True, rng=rng)
                loss = compute_loss(cfg.loss, masks, yhat, cfg.loss_params)
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"Perte non finie à l'itération {step}")
            optimizer.zero_grad()
            backward(loss, tape, model.parameters())
            optimizer.step()
            dices.append(float(np.mean(batch_dice(yhat.data, masks))))
        return dices
