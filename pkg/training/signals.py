import logging

from django.dispatch import Signal, receiver

logger = logging.getLogger(__name__)

PROGRESS_LOG_EVERY = 100

# Sent after every optimizer step with step, total and loss keyword arguments.
step_finished = Signal()


@receiver(step_finished)
def log_training_progress(sender, step, loss, total=None, **kwargs):
    if (step + 1) % PROGRESS_LOG_EVERY == 0:
        logger.info(f"[TRAIN] progress step={step + 1}/{total} loss={loss:.6f}")
