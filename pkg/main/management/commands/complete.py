from completion.checkpoints import load_checkpoint
from geometry.camera import SparseDepth
from geometry.io import read_depth, read_intrinsics, read_ppm, write_pfm
from main.exceptions import InputError
from main.management.base import PipelineCommand
from main.manifest import RunManifest
from utils.utils import ensure_output_dir, validate_input_file


class Command(PipelineCommand):
    help = "Complete one sparse depth map from an RGB image; writes final and initial depth PFMs."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--image", required=True, help="P6 PPM image.")
        parser.add_argument("--sparse", required=True, help="Sparse depth as PFM or 16-bit PGM.")
        parser.add_argument("--intrinsics", required=True, help="Intrinsics JSON.")
        parser.add_argument("--out", required=True, help="Output directory.")

    def run(self, **options):
        image_path = validate_input_file(options["image"], {".ppm"})
        sparse_path = validate_input_file(options["sparse"], {".pfm", ".pgm"})
        intrinsics_path = validate_input_file(options["intrinsics"], {".json"})
        manifest = RunManifest.start(
            "complete", options, inputs=[options["checkpoint"], image_path, sparse_path, intrinsics_path]
        )

        image = read_ppm(image_path)
        sparse = read_depth(sparse_path, cls=SparseDepth)
        if image.shape[1:] != sparse.shape:
            raise InputError(f"image is {image.shape[1:]} but sparse depth is {sparse.shape}", sparse_path)
        intr = read_intrinsics(intrinsics_path)
        model = load_checkpoint(options["checkpoint"]).model

        out = model(image, sparse, intr)
        out_dir = ensure_output_dir(options["out"])
        final_path, initial_path = out_dir / "final_depth.pfm", out_dir / "initial_depth.pfm"
        write_pfm(final_path, out.final_depth.data)
        write_pfm(initial_path, out.initial_depth.data)
        manifest.finish([final_path, initial_path]).write(out_dir)

        self.stdout.write(
            self.style.SUCCESS(
                f"completed {sparse.height}x{sparse.width} from {sparse.valid_count} points -> {final_path}"
            )
        )
