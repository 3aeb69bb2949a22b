import csv

import numpy as np

from main.exceptions import ContractError, InputError
from main.management.base import PipelineCommand
from main.manifest import RunManifest
from training.scenes import load_scene_dir
from training.serializers import load_run_config, resolve_config_path
from training.services import train
from utils.utils import ensure_output_dir

# name -> ModelConfig overrides on top of the run config
VARIANTS = {
    "s2d": {"attention_2d": False, "attention_3d": False},
    "s2d_tr": {"attention_2d": True, "attention_3d": False},
    "s2d_3d_tr": {"attention_2d": False, "attention_3d": True},
    "decotr_no_normalization": {"attention_2d": True, "attention_3d": True, "normalize_points": False},
    "decotr": {"attention_2d": True, "attention_3d": True},
    "decotr_global": {"attention_2d": True, "attention_3d": True, "global_attention": True},
}
TAIL = 50


def tail_mean(values, window=TAIL) -> float:
    return float(np.mean(values[-window:]))


class Command(PipelineCommand):
    help = "Train every ablation variant on the same scenes and seed; writes variant,final_loss,initial_loss."

    def add_arguments(self, parser):
        parser.add_argument("--config", default="toy")
        parser.add_argument("--data-dir", required=True)
        parser.add_argument("--steps", type=int, default=500)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True)
        parser.add_argument("--variant", action="append", choices=list(VARIANTS), help="Run only this variant.")

    def run(self, **options):
        if options["steps"] < 1:
            raise ContractError("ablation needs at least one training step")
        config_path = resolve_config_path(options["config"])
        model_cfg, training = load_run_config(config_path)
        out_dir = ensure_output_dir(options["out"])
        manifest = RunManifest.start(
            "ablate", options, inputs=[config_path, options["data_dir"]], seed=options["seed"], config_path=config_path
        )
        scenes = load_scene_dir(options["data_dir"])

        rows = []
        for name, overrides in VARIANTS.items():
            if options["variant"] and name not in options["variant"]:
                continue
            result = train(
                model_cfg.replace(**overrides), training, scenes, options["steps"], options["seed"], out_dir / name
            )
            final = tail_mean([r.loss_final for r in result.records])
            initial = tail_mean([r.loss_initial for r in result.records])
            rows.append((name, final, initial))
            self.stdout.write(f"{name:<26} final_loss={final:.6f} initial_loss={initial:.6f}")

        csv_path = out_dir / "ablation.csv"
        try:
            with csv_path.open("w", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(["variant", "final_loss", "initial_loss"])
                writer.writerows([name, repr(final), repr(initial)] for name, final, initial in rows)
        except OSError as exc:
            raise InputError(exc.strerror or str(exc), csv_path)
        manifest.finish([csv_path]).write(out_dir)
        self.stdout.write(self.style.SUCCESS(f"wrote {csv_path}"))
