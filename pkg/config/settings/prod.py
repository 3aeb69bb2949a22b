from .base import *

DEBUG = False

# Long unattended runs: file log only, console limited to problems.
LOG_FILE = config("LOG_FILE", default=str(BASE_DIR / "runs" / "decotr.log"))
Path(LOG_FILE).parent.mkdir(parents=True, exist_ok=True)
LOGGING["handlers"]["file"]["filename"] = LOG_FILE
LOGGING["handlers"]["console"]["level"] = "ERROR"
