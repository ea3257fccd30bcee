import os
from pathlib import Path
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file
load_dotenv(BASE_DIR / '.env')
SECRET_KEY = os.environ.get("SECRET_KEY", "dev-secret-change-me")
DEBUG = os.environ.get("DEBUG", "1") == "1"
ALLOWED_HOSTS = os.environ.get("ALLOWED_HOSTS", "localhost,127.0.0.1").split(",")

INSTALLED_APPS = [
    "django.contrib.auth","django.contrib.contenttypes",
    "rest_framework","estimator",
]
# Pipeline commands keep no database state; sqlite satisfies Django's checks
DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}
LANGUAGE_CODE = "en-us"; TIME_ZONE = "UTC"; USE_I18N = True; USE_TZ = True
DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Pipeline Configuration (paths, seed, worker cap, backbone width)
PIPELINE_CONFIG = {
    "seed": int(os.environ.get("AGE_SEED", "0")),
    "threads": int(os.environ.get("AGE_THREADS", "1")),
    "dataset_root": os.environ.get("AGE_DATASET_ROOT", "data"),
    "output_dir": os.environ.get("AGE_OUTPUT_DIR", "runs/default"),
    "backbone_weights": os.environ.get("AGE_BACKBONE_WEIGHTS", ""),
    "detector_weights": os.environ.get("MTCNN_WEIGHTS", ""),
    "width_divisor": int(os.environ.get("AGE_WIDTH_DIVISOR", "1")),
}

# Face Detector Configuration
DETECTOR_CONFIG = {
    "min_face": float(os.environ.get("MTCNN_MIN_FACE", "20")),
    "pyramid_factor": float(os.environ.get("MTCNN_PYRAMID_FACTOR", "0.709")),
    "pnet_threshold": float(os.environ.get("MTCNN_PNET_THRESHOLD", "0.6")),
    "rnet_threshold": float(os.environ.get("MTCNN_RNET_THRESHOLD", "0.7")),
    "onet_threshold": float(os.environ.get("MTCNN_ONET_THRESHOLD", "0.7")),
    "chip_size": int(os.environ.get("MTCNN_CHIP_SIZE", "256")),
    "detect_on_predict": os.environ.get("AGE_DETECT_ON_PREDICT", "false").lower() == "true",
}

# Training Configuration
TRAIN_CONFIG = {
    "split_ratio": float(os.environ.get("AGE_SPLIT_RATIO", "0.8")),
    "epochs": int(os.environ.get("AGE_EPOCHS", "50")),
    "batch_size": int(os.environ.get("AGE_BATCH_SIZE", "64")),
    "learning_rate": float(os.environ.get("AGE_LEARNING_RATE", "0.001")),
    "beta1": float(os.environ.get("AGE_BETA1", "0.9")),
    "beta2": float(os.environ.get("AGE_BETA2", "0.999")),
    "epsilon": float(os.environ.get("AGE_EPSILON", "1e-08")),
    "dropout_rate": float(os.environ.get("AGE_DROPOUT_RATE", "0.3")),
    "checkpoint_every": int(os.environ.get("AGE_CHECKPOINT_EVERY", "0")),
}

# Augmentation Configuration
AUGMENT_CONFIG = {
    "rotation_degrees": float(os.environ.get("AGE_ROTATION_DEGREES", "10")),
    "flip_probability": float(os.environ.get("AGE_FLIP_PROBABILITY", "0.5")),
}

# Preprocessing Configuration (per-channel means subtracted before the backbone)
PREPROCESS_CONFIG = {
    "mean_r": float(os.environ.get("AGE_MEAN_R", "131.1")),
    "mean_g": float(os.environ.get("AGE_MEAN_G", "103.9")),
    "mean_b": float(os.environ.get("AGE_MEAN_B", "91.6")),
}

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "simple": {"format": "{levelname} {name}: {message}", "style": "{"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "simple"},
    },
    "loggers": {
        "estimator": {
            "handlers": ["console"],
            "level": os.environ.get("LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}
