"""
Point d'entrée en ligne de commande: prétraitement, fantômes, jeux de patches,
entraînement, prédiction, évaluation, ensemble et benchmark.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config import settings

# Avant l'import de numpy: nombre de threads BLAS
os.environ.setdefault("OMP_NUM_THREADS", str(settings.NUM_THREADS))

import numpy as np

from models import (
    CornerSet, DatasetSplits, EnsembleSpec, Interpolation, MetricsRow, ModelName, PhantomConfig, Plane,
    SplitSpec, TrainConfig,
)
from nn.architectures import build_model
from services.bench_service import BenchService
from services.dataset_service import DatasetService
from services.ensemble_service import EnsembleModel, EnsembleService
from services.file_service import FileService
from services.geometry_service import GeometryService
from services.inference_service import InferenceService
from services.phantom_service import PhantomService, electrolyte_region
from services.training_service import TrainingService
from utils.metrics import comparison_summary, format_metrics_table
from utils.validators import validate_seed

logger = logging.getLogger("dendriteseg")

file_service = FileService()
geometry_service = GeometryService()
dataset_service = DatasetService()
phantom_service = PhantomService()
training_service = TrainingService()
inference_service = InferenceService()
ensemble_service = EnsembleService()
bench_service = BenchService()

# ---------------------------------------------------------------------------
# Aides
# ---------------------------------------------------------------------------

def load_models(checkpoints: Sequence[str]) -> Dict[str, object]:
    models = {}
    for path in checkpoints or []:
        model, meta = file_service.load_checkpoint(path)
        name = meta.architecture.name.value
        if name in models:
            raise ValueError(f"Deux checkpoints pour le modèle {name}")
        models[name] = model
    if not models:
        raise ValueError("Au moins un --checkpoint est requis")
    return models

def load_ensemble(models: Dict[str, object], path: Optional[str]) -> Optional[EnsembleModel]:
    if path is None:
        return None
    spec = file_service.load_config(path, EnsembleSpec)
    missing = sorted(set(spec.weights) - set(models))
    if missing:
        raise ValueError(f"Checkpoints manquants pour l'ensemble: {missing}")
    return EnsembleModel({name: models[name] for name in spec.weights}, spec)

def emit(text: str, out: Optional[str]) -> None:
    sys.stdout.write(text)
    if out:
        file_service.write_text(out, text)

# ---------------------------------------------------------------------------
# Sous-commandes
# ---------------------------------------------------------------------------

def cmd_invert(args) -> None:
    v = file_service.load_volume(args.input)
    file_service.save_volume(geometry_service.invert_grayscale(v), args.out)

def cmd_crop(args) -> None:
    v = file_service.load_volume(args.input)
    file_service.save_volume(geometry_service.crop_roi(v, args.lo, args.hi), args.out)

def cmd_rectify(args) -> None:
    v = file_service.load_volume(args.input)
    corners = file_service.load_config(args.corners, CornerSet)
    h = geometry_service.estimate_homography(corners)
    rectified = geometry_service.rectify_plane(v, corners.plane, h, (corners.width, corners.height),
                                               Interpolation(args.interpolation))
    file_service.save_volume(rectified, args.out)

def cmd_phantom(args) -> None:
    cfg = file_service.load_config(args.config, PhantomConfig) if args.config else PhantomConfig(seed=args.seed)
    cfg = cfg.model_copy(update={"seed": validate_seed(args.seed)})
    phantom = phantom_service.generate_phantom(cfg)
    out = file_service.ensure_directory(args.out)
    file_service.save_volume(phantom.volume, out / "volume")
    file_service.save_volume(phantom.mask, out / "mask")
    file_service.write_json(out / "phantom.json", cfg)
    report = inference_service.quantify_dendrites(phantom.mask, electrolyte_region(cfg))
    emit(report.model_dump_json() + "\n", None)

def cmd_patchify(args) -> None:
    seed = validate_seed(args.seed)
    volume = file_service.load_volume(args.input)
    mask = file_service.load_volume(args.mask)
    samples = dataset_service.volume_to_patches(volume, mask, Plane(args.plane), settings.PATCH_SIZE,
                                                args.stride or settings.TRAIN_STRIDE,
                                                volume_id=Path(args.input).stem)
    train, val, test = dataset_service.split_dataset(samples, SplitSpec(seed=seed))
    file_service.save_patch_dataset(args.out, {"train": train, "val": val, "test": test},
                                    settings.PATCH_SIZE, seed)
    emit(f"train\t{len(train)}\nval\t{len(val)}\ntest\t{len(test)}\n", None)

def cmd_train(args) -> None:
    seed = validate_seed(args.seed)
    cfg = file_service.load_config(args.config, TrainConfig) if args.config else TrainConfig(seed=seed)
    updates = {"seed": seed}
    if args.model:
        updates["model"] = ModelName(args.model)
    if args.epochs:
        updates["epochs"] = args.epochs
    cfg = TrainConfig.model_validate({**cfg.model_dump(), **updates})

    splits = file_service.load_patch_dataset(args.input)
    data = DatasetSplits(train=splits["train"], val=splits["val"], test=splits["test"])
    model = build_model(cfg.model, seed)
    model, history = training_service.train(model, data, cfg)
    out = Path(args.out)
    file_service.save_checkpoint(model, out, cfg, history)
    file_service.write_history(history, out.with_suffix(".history.tsv"))
    best = history.best_row()
    emit(f"best_epoch\t{best.epoch}\nval_dice\t{best.val_dice:.4f}\n", None)

def cmd_predict(args) -> None:
    models = load_models(args.checkpoint)
    ensemble = load_ensemble(models, args.ensemble)
    if ensemble is None and len(models) > 1:
        raise ValueError("Plusieurs checkpoints sans --ensemble: prédiction ambiguë")
    predictor = ensemble or next(iter(models.values()))
    threshold = args.threshold if args.threshold is not None else (
        ensemble.spec.threshold if ensemble else settings.THRESHOLD)
    v = file_service.load_volume(args.input)
    mask = inference_service.predict_volume(predictor, v, Plane(args.plane), args.stride or settings.INFER_STRIDE,
                                            threshold, args.export_slices)
    file_service.save_volume(mask, args.out)
    emit(inference_service.quantify_dendrites(mask).model_dump_json() + "\n", None)

def cmd_evaluate(args) -> None:
    models = load_models(args.checkpoint)
    ensemble = load_ensemble(models, args.ensemble)
    samples = file_service.load_patch_dataset(args.input)[args.split]
    if not samples:
        raise ValueError(f"Partition {args.split} vide")
    predictors = dict(models)
    if ensemble is not None:
        predictors["enet"] = ensemble

    rows: List[MetricsRow] = []
    for name, predictor in predictors.items():
        threshold = args.threshold if args.threshold is not None else settings.THRESHOLD
        if name == "enet" and args.threshold is None:
            threshold = ensemble.spec.threshold
        miou, mdsc = inference_service.evaluate(predictor, samples, threshold)
        latency = None
        if args.reps:
            patches = np.stack([s.image for s in samples])
            latency = bench_service.bench_latency(predictor, patches, args.warmup, args.reps, name).mean_latency_ms
        rows.append(MetricsRow(model=name, miou=miou, mdsc=mdsc, latency_ms=latency))
    for line in comparison_summary(rows):
        logger.info("📊 %s", line)
    emit(format_metrics_table(rows), args.out)

def cmd_ensemble_search(args) -> None:
    models = load_models(args.checkpoint)
    samples = file_service.load_patch_dataset(args.input)[args.split]
    if not samples:
        raise ValueError(f"Partition {args.split} vide")
    prob_maps = {name: inference_service.predict_patches(m, samples) for name, m in models.items()}
    truths = np.stack([s.mask for s in samples])
    threshold = args.threshold if args.threshold is not None else settings.THRESHOLD
    result = ensemble_service.search_weights(prob_maps, truths, args.grid_step, threshold)
    if args.out:
        file_service.write_json(args.out, result.spec)
    emit(result.spec.model_dump_json() + "\n", None)

def cmd_bench(args) -> None:
    models = load_models(args.checkpoint)
    ensemble = load_ensemble(models, args.ensemble)
    samples = file_service.load_patch_dataset(args.input)[args.split]
    if not samples:
        raise ValueError(f"Partition {args.split} vide")
    patches = np.stack([s.image for s in samples])
    truths = np.stack([s.mask for s in samples])

    results = [bench_service.bench_latency(m, patches, args.warmup, args.reps, name, truths)
               for name, m in models.items()]
    if ensemble is not None:
        results.append(bench_service.bench_ensemble(ensemble, patches, args.warmup, args.reps, truths).ensemble)
    rows = [MetricsRow(model=r.model, miou=r.miou, mdsc=r.mdsc, latency_ms=r.mean_latency_ms,
                       patch_resolution=r.patch_resolution) for r in results]
    for line in comparison_summary(rows):
        logger.info("📊 %s", line)
    emit(format_metrics_table(rows), args.out)

# ---------------------------------------------------------------------------
# Analyse des arguments
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dendriteseg", description=f"{settings.APP_NAME} v{settings.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("invert", cmd_invert, "Inverse les niveaux de gris d'un volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("crop", cmd_crop, "Recadre un volume sur [lo, hi)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lo", type=int, nargs=3, required=True, metavar=("Z", "Y", "X"))
    p.add_argument("--hi", type=int, nargs=3, required=True, metavar=("Z", "Y", "X"))

    p = add("rectify", cmd_rectify, "Rectifie un plan à partir de quatre coins")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--corners", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--interpolation", choices=[i.value for i in Interpolation], default="bilinear")

    p = add("phantom", cmd_phantom, "Génère un volume synthétique et son masque")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = add("patchify", cmd_patchify, "Découpe un volume et son masque en jeu de patches")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--plane", choices=[v.value for v in Plane], default="xy")
    p.add_argument("--stride", type=int)

    p = add("train", cmd_train, "Entraîne un modèle sur un jeu de patches")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--model", choices=[m.value for m in ModelName])
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)

    for name, handler, help_text in (
        ("predict", cmd_predict, "Prédit le masque d'un volume"),
        ("evaluate", cmd_evaluate, "Évalue des checkpoints (tableau mIoU / mDSC)"),
        ("ensemble-search", cmd_ensemble_search, "Cherche les poids de l'E-Net"),
        ("bench", cmd_bench, "Mesure la latence par patch"),
    ):
        p = add(name, handler, help_text)
        p.add_argument("--checkpoint", action="append", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out")
        p.add_argument("--threshold", type=float)
        if name == "predict":
            p.add_argument("--plane", choices=[v.value for v in Plane], default="xy")
            p.add_argument("--stride", type=int)
            p.add_argument("--export-slices")
        else:
            p.add_argument("--split", choices=["train", "val", "test"],
                           default="val" if name == "ensemble-search" else "test")
        if name in ("predict", "evaluate", "bench"):
            p.add_argument("--ensemble")
        if name == "ensemble-search":
            p.add_argument("--grid-step", type=float, default=0.1)
        if name in ("evaluate", "bench"):
            p.add_argument("--reps", type=int, default=settings.BENCH_REPS if name == "bench" else 0)
            p.add_argument("--warmup", type=int, default=settings.BENCH_WARMUP)
    return parser

def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logger.debug("🚀 %s v%s: %s", settings.APP_NAME, settings.VERSION, args.command)
    try:
        args.handler(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        if settings.DEBUG:
            logger.exception("❌ Échec de %s", args.command)
        return 1
    return 0

if __name__ == "__main__":
    sys.exit(main())
