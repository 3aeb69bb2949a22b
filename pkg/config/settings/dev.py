from .base import *

DEBUG = True

LOGGING["handlers"]["console"]["level"] = config("CONSOLE_LOG_LEVEL", default="INFO")
for logger_config in LOGGING["loggers"].values():
    logger_config["level"] = config("LOG_LEVEL", default="DEBUG")
