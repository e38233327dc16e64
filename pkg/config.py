from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    # Application
    APP_NAME: str = "DendriteSeg"
    VERSION: str = "1.0.0"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"
    SHOW_PROGRESS: bool = True

    # Numérique
    DEFAULT_DTYPE: str = "float64"  # tests et grad checks
    TRAIN_DTYPE: str = "float32"
    PROB_EPS: float = 1e-7
    LAYER_NORM_EPS: float = 1e-5

    # Patches
    PATCH_SIZE: int = 128
    TRAIN_STRIDE: int = 128
    INFER_STRIDE: int = 64
    THRESHOLD: float = 0.5

    # Tomographie
    VOXEL_SIZE_UM: float = 1.33

    # Modèles
    DROPOUT_RATE: float = 0.1
    EMBED_DIM: int = 64
    NUM_HEADS: int = 4
    MLP_RATIO: int = 4
    SUB_PATCH: int = 16

    # Entraînement
    LEARNING_RATE: float = 1e-3
    ADAM_BETA1: float = 0.9
    ADAM_BETA2: float = 0.999
    ADAM_EPS: float = 1e-8
    SGD_MOMENTUM: float = 0.9
    BATCH_SIZE: int = 8
    EPOCHS_UNET: int = 450
    EPOCHS_YNET: int = 130
    EPOCHS_TNET: int = 300

    # Benchmark
    BENCH_WARMUP: int = 5
    BENCH_REPS: int = 30

    # Parallélisme (inférence par coupe, augmentation)
    NUM_THREADS: int = 1

    class Config:
        env_file = ".env"

settings = Settings()
