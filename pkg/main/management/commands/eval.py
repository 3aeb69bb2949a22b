from pathlib import Path

from django.conf import settings

from completion.checkpoints import load_checkpoint
from geometry.sampling import sample_sparse_depth
from main.exceptions import ConfigError
from main.management.base import PipelineCommand
from main.manifest import RunManifest
from metrics.evaluation import evaluate, evaluate_many
from metrics.renderers import report_to_json, reports_to_csv
from training.scenes import load_scene_dir
from utils.utils import ensure_output_dir


class Command(PipelineCommand):
    help = "Evaluate a checkpoint on a scene directory; prints JSON metrics and writes a CSV."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint")
        parser.add_argument("--data-dir", required=True)
        parser.add_argument("--sparse-n", type=int, default=settings.DEFAULT_SPARSE_SAMPLES)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument(
            "--max-depth",
            type=float,
            default=settings.DEFAULT_MAX_DEPTH,
            help="Ground-truth cap in meters (10 for indoor scenes, 80 for driving).",
        )
        parser.add_argument("--csv", default="metrics.csv", help="Where to write the per-scene CSV.")
        parser.add_argument(
            "--oracle", action="store_true", help="Evaluate ground truth against itself (no checkpoint)."
        )

    def run(self, **options):
        if not options["oracle"] and not options["checkpoint"]:
            raise ConfigError("--checkpoint is required unless --oracle is given")
        inputs = [options["data_dir"]] + ([options["checkpoint"]] if options["checkpoint"] else [])
        manifest = RunManifest.start("eval", options, inputs=inputs, seed=options["seed"])
        scenes = load_scene_dir(options["data_dir"])
        model = None if options["oracle"] else load_checkpoint(options["checkpoint"]).model

        labelled, pairs = [], []
        for index, scene in enumerate(scenes):
            if model is None:
                pred = scene.depth
            else:
                sparse = sample_sparse_depth(scene.depth, options["sparse_n"], [options["seed"], index])
                pred = model(scene.image, sparse, scene.intrinsics).final_depth
            labelled.append((str(scene.seed), evaluate(pred, scene.depth, options["max_depth"])))
            pairs.append((pred, scene.depth))
        aggregate = evaluate_many(pairs, options["max_depth"])

        csv_path = Path(options["csv"])
        ensure_output_dir(csv_path.parent)
        csv_path.write_text(reports_to_csv(labelled + [("aggregate", aggregate)]))
        manifest.finish([csv_path]).write(csv_path.with_name(f"{csv_path.stem}.manifest.json"))

        self.stdout.write(
            report_to_json(
                {
                    "max_depth": options["max_depth"],
                    "scenes": dict(labelled),
                    "aggregate": aggregate,
                }
            ),
            ending="",
        )
