import csv
import json
import math
import tempfile
from contextlib import redirect_stderr
from io import StringIO
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from geometry.io import read_pfm, write_pfm, write_pgm16
from geometry.sampling import sample_sparse_depth
from main.exceptions import ConfigError, InputError, NumericalError, command_error_for
from main.management.commands.train import Command as TrainCommand
from main.manifest import blob_hash, inputs_hash
from training.losses import masked_l1_loss
from training.scenes import load_scene_dir, make_scene_set


def run(*args, **options):
    out = StringIO()
    call_command(*args, stdout=out, stderr=StringIO(), verbosity=0, **options)
    return out.getvalue()


def tree_bytes(root):
    root = Path(root)
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.scenes = self.root / "scenes"
        run("synth", seed=0, count=2, height=16, width=20, out_dir=str(self.scenes))

    def tearDown(self):
        self.tmp.cleanup()

    def train(self, name, steps, *extra):
        out = self.root / name
        stdout = run(
            "train",
            "--config", "tiny",
            "--data-dir", str(self.scenes),
            "--steps", str(steps),
            "--seed", "3",
            "--out", str(out),
            *extra,
        )
        return out, stdout


class ExitCodeTests(SimpleTestCase):
    def test_translation(self):
        self.assertEqual(command_error_for(InputError("missing", "/x")).returncode, 1)
        self.assertEqual(command_error_for(ConfigError("bad")).returncode, 1)
        self.assertEqual(command_error_for(NumericalError("nan")).returncode, 2)
        self.assertEqual(command_error_for(FileNotFoundError(2, "No such file", "/y")).returncode, 1)
        self.assertIn("/x", str(command_error_for(InputError("missing", "/x"))))

    def test_missing_required_flag_is_an_input_error(self):
        with self.assertRaises(CommandError) as ctx:
            run("train", "--config", "tiny", "--out", "unused")
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn("--data-dir", str(ctx.exception))

    def test_bad_flag_from_the_shell_exits_1(self):
        command = TrainCommand(stdout=StringIO(), stderr=StringIO())
        command._called_from_command_line = True
        parser = command.create_parser("manage.py", "train")
        for argv in (["--config", "tiny", "--out", "x"], ["--data-dir", "d", "--out", "x", "--steps", "many"]):
            with self.subTest(argv=argv), redirect_stderr(StringIO()), self.assertRaises(SystemExit) as ctx:
                parser.parse_args(argv)
            self.assertEqual(ctx.exception.code, 1)


class ManifestTests(SimpleTestCase):
    def test_blob_hash_matches_git(self):
        self.assertEqual(blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391")
        self.assertEqual(blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a")

    def test_inputs_hash_follows_content(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "a.txt"
            path.write_text("one")
            first = inputs_hash([tmp])
            self.assertEqual(inputs_hash([tmp]), first)
            path.write_text("two")
            self.assertNotEqual(inputs_hash([tmp]), first)


class SynthCommandTests(CommandTestCase):
    def test_writes_named_triples(self):
        names = sorted(p.name for p in self.scenes.iterdir())
        self.assertEqual(
            names,
            [
                "manifest.json",
                "scene_0000_depth.pfm",
                "scene_0000_image.ppm",
                "scene_0000_intrinsics.json",
                "scene_0001_depth.pfm",
                "scene_0001_image.ppm",
                "scene_0001_intrinsics.json",
            ],
        )

    def test_rerun_is_byte_identical(self):
        again = self.root / "again"
        run("synth", seed=0, count=2, height=16, width=20, out_dir=str(again))
        self.assertEqual(tree_bytes(again), tree_bytes(self.scenes))

    def test_depth_parses_back(self):
        expected = make_scene_set(0, 2, 16, 20)
        for index, scene in enumerate(expected):
            values = read_pfm(self.scenes / f"scene_{index:04d}_depth.pfm")
            np.testing.assert_array_equal(values, scene.depth.values.astype(np.float32))


class TrainCommandTests(CommandTestCase):
    def test_success_output(self):
        out, stdout = self.train("run", 2)
        self.assertIn("final_loss=", stdout)
        self.assertTrue((out / "checkpoint" / "config.json").exists())
        self.assertEqual(len((out / "loss.csv").read_text().splitlines()), 3)
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["command"], "train")
        self.assertEqual(manifest["seed"], 3)
        self.assertEqual(manifest["status"], "ok")

    def test_zero_steps(self):
        out, stdout = self.train("zero", 0)
        self.assertIn("final_loss=n/a", stdout)
        state = json.loads((out / "checkpoint" / "state.json").read_text())
        self.assertEqual(state["step"], 0)

    def test_identical_runs_are_byte_identical(self):
        first, _ = self.train("first", 2)
        second, _ = self.train("second", 2)
        self.assertEqual(tree_bytes(first), tree_bytes(second))

    def test_resume_continues_the_loss_log(self):
        full, _ = self.train("full", 4)
        half, _ = self.train("half", 2)
        resumed, _ = self.train("resumed", 2, "--resume", str(half / "checkpoint"))
        full_rows = (full / "loss.csv").read_text().splitlines()
        resumed_rows = (resumed / "loss.csv").read_text().splitlines()
        self.assertEqual(resumed_rows[1:], full_rows[3:])

    def test_missing_data(self):
        with self.assertRaises(CommandError) as ctx:
            run("train", "--config", "tiny", "--data-dir", str(self.root / "nope"), "--out", str(self.root / "o"))
        self.assertEqual(ctx.exception.returncode, 1)

    def test_bad_config(self):
        config = self.root / "bad.json"
        config.write_text(json.dumps({"heads": 3}))
        with self.assertRaises(CommandError) as ctx:
            run("train", "--config", str(config), "--data-dir", str(self.scenes), "--out", str(self.root / "o"))
        self.assertEqual(ctx.exception.returncode, 1)


class EvalCommandTests(CommandTestCase):
    def test_oracle_mode(self):
        csv_path = self.root / "oracle.csv"
        payload = json.loads(
            run("eval", "--oracle", "--data-dir", str(self.scenes), "--csv", str(csv_path))
        )
        self.assertEqual(payload["aggregate"]["rmse"], 0.0)
        self.assertEqual(payload["aggregate"]["delta1"], 100.0)
        self.assertEqual(sorted(payload["scenes"]), ["scene_0000", "scene_0001"])
        lines = csv_path.read_text().splitlines()
        self.assertEqual(lines[0].split(",")[0], "scene")
        self.assertTrue(lines[-1].startswith("aggregate,"))
        self.assertTrue((self.root / "oracle.manifest.json").exists())

    def test_checkpoint_is_deterministic_and_pooled(self):
        out, _ = self.train("model", 1)
        args = ["--checkpoint", str(out / "checkpoint"), "--data-dir", str(self.scenes), "--sparse-n", "20"]
        first = run("eval", *args, "--csv", str(self.root / "a.csv"))
        second = run("eval", *args, "--csv", str(self.root / "b.csv"))
        self.assertEqual(first, second)
        payload = json.loads(first)
        scenes = payload["scenes"].values()
        count = sum(s["valid_count"] for s in scenes)
        pooled = math.sqrt(sum(s["rmse"] ** 2 * s["valid_count"] for s in scenes) / count)
        self.assertAlmostEqual(payload["aggregate"]["rmse"], pooled, delta=1e-5 * pooled)
        self.assertEqual(payload["aggregate"]["valid_count"], count)

    def test_checkpoint_required(self):
        with self.assertRaises(CommandError) as ctx:
            run("eval", "--data-dir", str(self.scenes), "--csv", str(self.root / "x.csv"))
        self.assertEqual(ctx.exception.returncode, 1)


class CompleteCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.model, _ = self.train("model", 1)

    def complete(self, sparse):
        out = self.root / "completed"
        run(
            "complete",
            "--checkpoint", str(self.model / "checkpoint"),
            "--image", str(self.scenes / "scene_0000_image.ppm"),
            "--sparse", str(sparse),
            "--intrinsics", str(self.scenes / "scene_0000_intrinsics.json"),
            "--out", str(out),
        )
        return out

    def test_outputs_match_the_image(self):
        out = self.complete(self.scenes / "scene_0000_depth.pfm")
        for name in ("final_depth.pfm", "initial_depth.pfm"):
            depth = read_pfm(out / name)
            self.assertEqual(depth.shape, (16, 20))
            self.assertGreaterEqual(depth.min(), np.float32(1e-3))
        self.assertTrue((out / "manifest.json").exists())

    def test_pgm_sparse_input(self):
        sparse = np.zeros((16, 20))
        sparse[::3, ::4] = 2.5
        path = self.root / "sparse.pgm"
        write_pgm16(path, sparse)
        out = self.complete(path)
        self.assertEqual(read_pfm(out / "final_depth.pfm").shape, (16, 20))

    def test_misaligned_inputs(self):
        path = self.root / "small.pgm"
        write_pgm16(path, np.ones((8, 10)))
        with self.assertRaises(CommandError) as ctx:
            self.complete(path)
        self.assertEqual(ctx.exception.returncode, 1)


class GradcheckCommandTests(SimpleTestCase):
    def test_one_line_per_check(self):
        stdout = run("gradcheck", "--only", "grad:matmul", "--only", "oracle:knn")
        lines = stdout.splitlines()
        self.assertTrue(lines[0].startswith("grad:matmul"))
        self.assertTrue(lines[1].startswith("oracle:knn"))
        self.assertIn("all 2 checks passed", stdout)

    def test_corrupted_backward_rule_is_caught(self):
        with self.assertRaises(CommandError) as ctx:
            run("gradcheck", "--only", "grad:matmul", "--corrupt", "matmul")
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn("grad:matmul", str(ctx.exception))

    def test_manifest_summary_is_logged_at_info_only(self):
        with self.assertLogs("main.management.commands.gradcheck", level="DEBUG") as logs:
            run("gradcheck", "--only", "oracle:knn")
        info = [r.getMessage() for r in logs.records if r.levelname == "INFO"]
        debug = [r.getMessage() for r in logs.records if r.levelname == "DEBUG"]
        self.assertEqual(len(info), 1)
        self.assertIn("status=ok", info[0])
        self.assertIn("input_hash=", info[0])
        self.assertNotIn("{", info[0])
        self.assertTrue(any('"command": "gradcheck"' in message for message in debug))

    def test_full_suite_passes(self):
        with tempfile.TemporaryDirectory() as tmp:
            stdout = run("gradcheck", "--manifest", str(Path(tmp) / "gradcheck.json"))
            self.assertEqual(json.loads((Path(tmp) / "gradcheck.json").read_text())["status"], "ok")
        self.assertIn("grad:end_to_end_loss", stdout)
        self.assertNotIn("FAIL", stdout)


class AblateCommandTests(CommandTestCase):
    def test_writes_one_row_per_variant(self):
        out = self.root / "ablation"
        run(
            "ablate",
            "--config", "tiny",
            "--data-dir", str(self.scenes),
            "--steps", "1",
            "--out", str(out),
            "--variant", "s2d",
            "--variant", "decotr",
        )
        lines = (out / "ablation.csv").read_text().splitlines()
        self.assertEqual(lines[0], "variant,final_loss,initial_loss")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["s2d", "decotr"])
        s2d = lines[1].split(",")
        self.assertEqual(s2d[1], s2d[2])


@skipUnless(settings.RUN_SLOW_TESTS, "long training runs; set RUN_SLOW_TESTS=True")
class AblationDirectionTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        scenes = cls.root / "scenes"
        run("synth", seed=0, count=8, height=32, width=40, out_dir=str(scenes))
        cls.out = cls.root / "ablation"
        run(
            "ablate",
            "--config", "toy",
            "--data-dir", str(scenes),
            "--steps", "2000",
            "--out", str(cls.out),
            "--variant", "s2d",
            "--variant", "s2d_tr",
            "--variant", "decotr",
        )
        with (cls.out / "ablation.csv").open() as handle:
            cls.rows = {row["variant"]: float(row["final_loss"]) for row in csv.DictReader(handle)}

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_each_stage_lowers_the_final_loss(self):
        self.assertLessEqual(self.rows["s2d_tr"], 0.98 * self.rows["s2d"], self.rows)
        self.assertLessEqual(self.rows["decotr"], 0.98 * self.rows["s2d_tr"], self.rows)

    def test_denser_sparse_input_is_no_worse(self):
        held = self.root / "held"
        run("synth", seed=1, count=1, height=32, width=40, out_dir=str(held))
        scene = load_scene_dir(held)[0]
        errors = {}
        for n in (50, 2000):
            sparse_path = self.root / f"sparse_{n}.pfm"
            write_pfm(sparse_path, sample_sparse_depth(scene.depth, n, [1, n]))
            out = self.root / f"completed_{n}"
            run(
                "complete",
                "--checkpoint", str(self.out / "decotr" / "checkpoint"),
                "--image", str(held / "scene_0000_image.ppm"),
                "--sparse", str(sparse_path),
                "--intrinsics", str(held / "scene_0000_intrinsics.json"),
                "--out", str(out),
            )
            errors[n] = masked_l1_loss(read_pfm(out / "final_depth.pfm"), scene.depth).item()
        self.assertLessEqual(errors[2000], errors[50], errors)
