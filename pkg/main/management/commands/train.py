import logging
import sys

from tqdm import tqdm

from completion.checkpoints import load_checkpoint
from completion.network import DeCoTR
from main.management.base import PipelineCommand
from main.manifest import RunManifest
from training.scenes import load_scene_dir
from training.serializers import load_run_config, resolve_config_path
from training.services import TrainingService
from training.signals import step_finished
from utils.utils import ensure_output_dir

logger = logging.getLogger(__name__)


class Command(PipelineCommand):
    help = "Train DeCoTR on a scene directory; writes a checkpoint, a CSV loss log and a manifest."

    def add_arguments(self, parser):
        parser.add_argument("--config", default="toy", help="Run config JSON or preset name (toy, tiny).")
        parser.add_argument("--data-dir", required=True)
        parser.add_argument("--steps", type=int, default=2000)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True)
        parser.add_argument("--resume", help="Checkpoint directory to continue from.")

    def run(self, **options):
        config_path = resolve_config_path(options["config"])
        model_cfg, training = load_run_config(config_path)
        out_dir = ensure_output_dir(options["out"])
        inputs = [config_path, options["data_dir"]] + ([options["resume"]] if options["resume"] else [])
        manifest = RunManifest.start(
            "train", options, inputs=inputs, seed=options["seed"], config_path=config_path
        )
        scenes = load_scene_dir(options["data_dir"])

        if options["resume"]:
            checkpoint = load_checkpoint(options["resume"])
            if checkpoint.model.cfg != model_cfg:
                logger.warning(f"[TRAIN] resuming with the checkpoint's model config, not {config_path}")
            service = TrainingService.from_checkpoint(checkpoint, scenes, training=training, seed=options["seed"])
        else:
            model = DeCoTR(model_cfg, seed=options["seed"])
            service = TrainingService(model, training, scenes, seed=options["seed"])

        bar = tqdm(total=options["steps"], desc="train", disable=options["verbosity"] < 1, file=sys.stderr)

        def on_step(sender, step, loss, **kwargs):
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}")

        step_finished.connect(on_step, weak=False)
        try:
            result = service.run(options["steps"], out_dir)
        finally:
            step_finished.disconnect(on_step)
            bar.close()

        manifest.finish([result.checkpoint, result.loss_log]).write(out_dir)
        final = "n/a" if result.final_loss is None else f"{result.final_loss:.6f}"
        self.stdout.write(f"steps={result.step} checkpoint={result.checkpoint}")
        self.stdout.write(self.style.SUCCESS(f"final_loss={final}"))
