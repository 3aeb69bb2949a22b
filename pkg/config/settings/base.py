from pathlib import Path

from decouple import config

BASE_DIR = Path(__file__).resolve().parent.parent.parent


# Only used by Django internals; nothing here is served.
SECRET_KEY = config("SECRET_KEY", default="decotr-desk-local-only")

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "django.contrib.auth",
    "rest_framework",
    "main.apps.MainConfig",
    "tensor_core.apps.TensorCoreConfig",
    "geometry.apps.GeometryConfig",
    "attention.apps.AttentionConfig",
    "completion.apps.CompletionConfig",
    "training.apps.TrainingConfig",
    "metrics.apps.MetricsConfig",
    "utils",
]

# The pipeline keeps everything on disk (PFM/PPM/DTNS files); no database.
DATABASES = {}

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True
DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

REST_FRAMEWORK = {
    "DEFAULT_RENDERER_CLASSES": ("metrics.renderers.ReportJSONRenderer",),
    "COMPACT_JSON": False,
    "STRICT_JSON": True,
}

PRESETS_DIR = BASE_DIR / "config" / "presets"

# Optimizer (Adam, no weight decay)
ADAM_LR = config("ADAM_LR", default=5e-4, cast=float)
ADAM_BETA1 = config("ADAM_BETA1", default=0.9, cast=float)
ADAM_BETA2 = config("ADAM_BETA2", default=0.999, cast=float)
ADAM_EPS = config("ADAM_EPS", default=1e-8, cast=float)

# Weight of the masked l1 term on the initial S2D-TR depth; 0 trains on the final map only
AUX_LOSS_WEIGHT = config("AUX_LOSS_WEIGHT", default=0.5, cast=float)

DEFAULT_SPARSE_SAMPLES = config("DEFAULT_SPARSE_SAMPLES", default=500, cast=int)
DEPTH_FLOOR = 1e-3
DEFAULT_MAX_DEPTH = config("DEFAULT_MAX_DEPTH", default=10.0, cast=float)
CHECKPOINT_EVERY = config("CHECKPOINT_EVERY", default=500, cast=int)

GRADCHECK_EPS = 1e-6
GRADCHECK_OP_TOLERANCE = 1e-5
GRADCHECK_PIPELINE_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-12

RUN_SLOW_TESTS = config("RUN_SLOW_TESTS", default=False, cast=bool)

LOG_FILE = config("LOG_FILE", default="decotr.log")

# Logging configuration
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s %(message)s"},
    },
    "handlers": {
        "file": {
            "level": "INFO",
            "class": "logging.FileHandler",
            "filename": LOG_FILE,
            "formatter": "plain",
        },
        "console": {
            "level": "WARNING",
            "class": "logging.StreamHandler",
            "formatter": "plain",
        },
    },
    "loggers": {
        name: {
            "handlers": ["file", "console"],
            "level": "INFO",
            "propagate": False,
        }
        for name in (
            "main",
            "tensor_core",
            "geometry",
            "attention",
            "completion",
            "training",
            "metrics",
        )
    },
}
