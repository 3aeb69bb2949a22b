import argparse
import logging

from main.exceptions import NumericalError
from main.management.base import PipelineCommand
from main.manifest import RunManifest
from main.verification import check_names, run_checks
from training.serializers import load_run_config, resolve_config_path

logger = logging.getLogger(__name__)


class Command(PipelineCommand):
    help = "Run the gradient-check and oracle-equivalence suite; exits 2 on any failure."

    def add_arguments(self, parser):
        parser.add_argument("--config", default="tiny", help="Run config JSON or preset name.")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--only", action="append", choices=check_names(), help="Run only this check.")
        parser.add_argument("--manifest", help="Write the run manifest here instead of the log.")
        # mutation hook: scale the backward rule of an operation kind
        parser.add_argument("--corrupt", action="append", default=[], help=argparse.SUPPRESS)

    def run(self, **options):
        config_path = resolve_config_path(options["config"])
        model_cfg, _ = load_run_config(config_path)
        manifest = RunManifest.start(
            "gradcheck", options, inputs=[config_path], seed=options["seed"], config_path=config_path
        )

        results = run_checks(model_cfg, seed=options["seed"], corrupt=options["corrupt"], only=options["only"])
        for result in results:
            style = self.style.SUCCESS if result.passed else self.style.ERROR
            self.stdout.write(style(result.line()))

        failed = [r.name for r in results if not r.passed]
        manifest.finish(status="failed" if failed else "ok")
        if options["manifest"]:
            manifest.write(options["manifest"])
        else:
            logger.info(
                f"[GRADCHECK] status={manifest.status} checks={len(results)} "
                f"config={config_path} input_hash={manifest.input_hash}"
            )
            logger.debug(f"[GRADCHECK] manifest {manifest.to_json()}")
        if failed:
            raise NumericalError(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        self.stdout.write(self.style.SUCCESS(f"all {len(results)} checks passed"))
