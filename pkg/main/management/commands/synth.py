from main.management.base import PipelineCommand
from main.manifest import RunManifest
from training.scenes import make_scene_set, write_scene
from utils.utils import ensure_output_dir


class Command(PipelineCommand):
    help = "Render synthetic RGB-D scenes as PFM depth, PPM image and intrinsics JSON triples."

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--count", type=int, default=8)
        parser.add_argument("--height", type=int, default=32)
        parser.add_argument("--width", type=int, default=40)
        parser.add_argument("--out-dir", required=True)

    def run(self, **options):
        out_dir = ensure_output_dir(options["out_dir"])
        manifest = RunManifest.start("synth", options, seed=options["seed"])
        scenes = make_scene_set(options["seed"], options["count"], options["height"], options["width"])

        outputs = []
        for index, scene in enumerate(scenes):
            outputs.extend(write_scene(out_dir, index, scene).values())
        manifest.finish(outputs).write(out_dir)

        self.stdout.write(
            self.style.SUCCESS(
                f"wrote {len(scenes)} scenes ({options['height']}x{options['width']}) to {out_dir}"
            )
        )
