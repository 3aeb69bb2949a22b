import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from django.conf import settings

from completion.checkpoints import Checkpoint, save_checkpoint
from completion.network import DeCoTR, ModelConfig
from geometry.sampling import sample_sparse_depth
from main.exceptions import ContractError, InputError, NumericalError
from tensor_core.tensor import Tape

from .losses import masked_l1_loss
from .optim import AdamState, adam_step
from .signals import step_finished

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("step", "loss", "loss_initial", "loss_final")


def _setting(name, fallback):
    return lambda: getattr(settings, name, fallback)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = field(default_factory=_setting("ADAM_LR", 5e-4))
    beta1: float = field(default_factory=_setting("ADAM_BETA1", 0.9))
    beta2: float = field(default_factory=_setting("ADAM_BETA2", 0.999))
    eps: float = field(default_factory=_setting("ADAM_EPS", 1e-8))
    aux_weight: float = field(default_factory=_setting("AUX_LOSS_WEIGHT", 0.5))
    sparse_samples: int = field(default_factory=_setting("DEFAULT_SPARSE_SAMPLES", 500))
    checkpoint_every: int = field(default_factory=_setting("CHECKPOINT_EVERY", 500))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossRecord:
    step: int
    loss: float
    loss_initial: float
    loss_final: float

    def as_row(self):
        return [self.step, repr(self.loss), repr(self.loss_initial), repr(self.loss_final)]


@dataclass
class TrainingResult:
    model: DeCoTR
    state: AdamState
    step: int
    records: list = field(default_factory=list)
    checkpoint: Path = None
    loss_log: Path = None

    @property
    def final_loss(self):
        return self.records[-1].loss if self.records else None


def training_loss(model: DeCoTR, scene, sparse, aux_weight):
    """Masked ℓ1 on the final depth plus ``aux_weight`` times the same on the initial depth."""
    out = model(scene.image, sparse, scene.intrinsics)
    loss_final = masked_l1_loss(out.final_depth, scene.depth)
    loss_initial = masked_l1_loss(out.initial_depth, scene.depth)
    return loss_final + aux_weight * loss_initial, loss_initial, loss_final


def smoothed(values, window=50) -> np.ndarray:
    """Trailing moving average; shorter series are averaged over what exists."""
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, values.size))
    return np.convolve(values, np.ones(window) / window, mode="valid")


class TrainingService:
    """
    Single-threaded training loop. The randomness of step ``t`` comes only from
    ``(seed, t)``, so a run resumed from a checkpoint at step ``t`` repeats the
    uninterrupted run from there on.
    """

    def __init__(self, model: DeCoTR, training: TrainingConfig, scenes, seed=0, state=None, start_step=0):
        if not scenes:
            raise ContractError("training needs at least one scene")
        self.model = model
        self.training = training
        self.scenes = list(scenes)
        self.seed = seed
        self.state = state or AdamState.zeros(model.parameters())
        self.step = start_step

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, scenes, training=None, seed=None):
        if training is None:
            training = TrainingConfig(**checkpoint.training)
        state = AdamState(
            checkpoint.moments.get("m", {}), checkpoint.moments.get("v", {}), checkpoint.adam_step
        )
        return cls(
            checkpoint.model,
            training,
            scenes,
            seed=checkpoint.model.seed if seed is None else seed,
            state=state,
            start_step=checkpoint.step,
        )

    def sample(self, step):
        rng = np.random.default_rng([self.seed, step])
        index = int(rng.integers(len(self.scenes)))
        scene = self.scenes[index]
        sparse = sample_sparse_depth(scene.depth, self.training.sparse_samples, [self.seed, step, 1])
        return index, scene, sparse

    def train_step(self) -> LossRecord:
        step = self.step
        index, scene, sparse = self.sample(step)
        params = self.model.parameters()
        with Tape() as tape:
            loss, loss_initial, loss_final = training_loss(
                self.model, scene, sparse, self.training.aux_weight
            )
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at step {step} on scene {index} "
                    f"(initial={loss_initial.item()}, final={loss_final.item()})"
                )
            grads = tape.backward(loss)

        new_params, self.state = adam_step(
            params,
            {name: grads[p] for name, p in params.items()},
            self.state,
            self.training.lr,
            self.training.beta1,
            self.training.beta2,
            self.training.eps,
        )
        self.model = self.model.bind(new_params)
        self.step += 1
        logger.debug(f"[TRAIN] step={step} scene={index} loss={value:.6f}")
        return LossRecord(step, value, loss_initial.item(), loss_final.item())

    def save(self, path) -> Path:
        return save_checkpoint(
            path,
            self.model,
            step=self.step,
            training=self.training.to_dict(),
            moments={"m": self.state.m, "v": self.state.v},
            adam_step=self.state.t,
        )

    def run(self, steps, out_dir=None) -> TrainingResult:
        if steps < 0:
            raise ContractError(f"step count must be >= 0, got {steps}")
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise InputError(exc.strerror or str(exc), out_dir)

        logger.info(
            f"[TRAIN] start step={self.step} steps={steps} scenes={len(self.scenes)} "
            f"params={self.model.parameter_count()} seed={self.seed}"
        )
        records = []
        every = self.training.checkpoint_every
        for _ in range(steps):
            record = self.train_step()
            records.append(record)
            step_finished.send(sender=self.__class__, step=record.step, total=steps, loss=record.loss)
            if out_dir is not None and every and self.step % every == 0:
                self.save(out_dir / "checkpoints" / f"step_{self.step:06d}")

        result = TrainingResult(self.model, self.state, self.step, records)
        if out_dir is not None:
            result.loss_log = write_loss_log(out_dir / "loss.csv", records)
            result.checkpoint = self.save(out_dir / "checkpoint")
        logger.info(f"[TRAIN] done step={self.step} final_loss={result.final_loss}")
        return result


def write_loss_log(path, records) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(LOSS_LOG_HEADER)
            writer.writerows(record.as_row() for record in records)
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    return path


def read_loss_log(path) -> list[LossRecord]:
    path = Path(path)
    try:
        with path.open(newline="") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    try:
        return [
            LossRecord(int(row["step"]), float(row["loss"]), float(row["loss_initial"]), float(row["loss_final"]))
            for row in rows
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed loss log: {exc}", path)


def train(model_cfg: ModelConfig, training: TrainingConfig, scenes, steps, seed=0, out_dir=None) -> TrainingResult:
    model = DeCoTR(model_cfg, seed=seed)
    return TrainingService(model, training, scenes, seed=seed).run(steps, out_dir)
