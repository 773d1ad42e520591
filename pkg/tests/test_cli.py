import glob
import json
import os
import tempfile
import unittest

import numpy as np
import torch
from typer.testing import CliRunner

from scenetree.artifacts import level_model_dir
from scenetree.cli import app
from scenetree.diffusion.unet import Denoiser, DenoiserConfig
from scenetree.geometry.tudf import load_grid
from scenetree.latent_tree.codec import LevelCodec, LevelCodecConfig

CONFIGS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
TINY = os.path.join(CONFIGS_DIR, "tiny.yaml")


class TestCli(unittest.TestCase):
    def setUp(self):
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def invoke(self, *args):
        return self.runner.invoke(app, list(args))

    def make_scenes(self, name, seed, count=2):
        out_dir = os.path.join(self.root, name)
        result = self.invoke("make-scenes", "--config", TINY, "--count", str(count), "--seed", str(seed), "--out-dir", out_dir)
        self.assertEqual(result.exit_code, 0, result.output)
        return out_dir

    def test_scenes_to_grids_to_meshes(self):
        scenes_dir = self.make_scenes("scenes", seed=0)
        self.assertEqual(len(glob.glob(os.path.join(scenes_dir, "*.obj"))), 2)
        with open(os.path.join(scenes_dir, "manifest.json")) as f:
            manifest = json.load(f)
        self.assertEqual(manifest["subcommand"], "make-scenes")
        self.assertEqual(manifest["seeds"], {"seed": 0})
        self.assertTrue(os.path.exists(os.path.join(scenes_dir, "config.yaml")))

        grids_dir = os.path.join(self.root, "grids")
        result = self.invoke("voxelize", "--config", TINY, "--in", scenes_dir, "--out", grids_dir)
        self.assertEqual(result.exit_code, 0, result.output)
        grid_paths = sorted(glob.glob(os.path.join(grids_dir, "*.tudf")))
        self.assertEqual(len(grid_paths), 2)
        grid = load_grid(grid_paths[0])
        self.assertAlmostEqual(grid.voxel_size, 0.1)
        self.assertAlmostEqual(grid.truncation, 0.3)
        for d in grid.dims:
            self.assertEqual(d % 4, 0)
            self.assertGreaterEqual(d, 32)

        mesh_path = os.path.join(self.root, "scene.obj")
        result = self.invoke("extract-mesh", "--config", TINY, "--grid", grid_paths[0], "--out", mesh_path)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertGreater(os.path.getsize(mesh_path), 0)

    def test_evaluate_and_novelty(self):
        generated = self.make_scenes("generated", seed=0)
        reference = self.make_scenes("reference", seed=10)
        report_path = os.path.join(self.root, "report.json")
        result = self.invoke(
            "evaluate", "--config", TINY, "--generated-dir", generated, "--reference-dir", reference,
            "--out", report_path, "--points", "64", "--distances", "cd", "--fid", "12.5",
        )
        self.assertEqual(result.exit_code, 0, result.output)
        with open(report_path) as f:
            report = json.load(f)
        self.assertEqual((report["num_generated"], report["num_reference"]), (2, 2))
        self.assertGreater(report["mmd_cd"], 0.0)
        self.assertIsNone(report["mmd_emd"])
        self.assertEqual(report["fid"], 12.5)

        novelty_path = os.path.join(self.root, "novelty.json")
        query = sorted(glob.glob(os.path.join(generated, "*.obj")))[0]
        result = self.invoke(
            "novelty", "--config", TINY, "--query", query, "--training-dir", reference,
            "--out", novelty_path, "--points", "64", "--top-k", "2",
        )
        self.assertEqual(result.exit_code, 0, result.output)
        with open(novelty_path) as f:
            matches = json.load(f)["matches"]
        self.assertEqual(len(matches), 2)
        self.assertLessEqual(matches[0]["chamfer"], matches[1]["chamfer"])

    def save_initialized_models(self):
        """Untrained but non-trivial models matching the tiny ladder (8-16-32, factors 2, 2)"""
        models_dir, codecs_dir = os.path.join(self.root, "diffusion"), os.path.join(self.root, "codecs")
        for level, patch_size in ((1, 8), (2, 16)):
            torch.manual_seed(level)
            denoiser = Denoiser(
                DenoiserConfig(
                    level=level, latent_channels=4, base_channels=4, channel_mults=(1, 2), norm_groups=2,
                    num_timesteps=100, patch_size=patch_size,
                )
            )
            torch.nn.init.normal_(denoiser.conv_out.weight, std=0.05)
            denoiser.save_pretrained(level_model_dir(models_dir, level))
            codec = LevelCodec(
                LevelCodecConfig(level=level, factor=2, latent_channels=4, hidden_channels=8, truncation=0.3, tile_size=8)
            )
            codec.save_pretrained(level_model_dir(codecs_dir, level))
        return models_dir, codecs_dir

    def test_generate_is_reproducible_for_a_seed(self):
        models_dir, codecs_dir = self.save_initialized_models()

        def generate(name, seed):
            out = os.path.join(self.root, name)
            result = self.invoke(
                "generate", "--config", TINY, "--models", models_dir, "--codecs", codecs_dir,
                "--extent-x", "4.8", "--extent-y", "4.8", "--steps", "4", "--seed", str(seed), "--out", out,
            )
            self.assertEqual(result.exit_code, 0, result.output)
            with open(out, "rb") as f:
                return f.read()

        first, second = generate("a.tudf", 3), generate("b.tudf", 3)
        self.assertEqual(first, second)
        self.assertNotEqual(first, generate("c.tudf", 4))
        grid = load_grid(os.path.join(self.root, "a.tudf"))
        self.assertEqual(grid.dims, (48, 48, 32))
        self.assertGreaterEqual(float(grid.values.min()), 0.0)
        self.assertLessEqual(float(grid.values.max()), np.float32(0.3))

    def test_missing_models_name_the_training_command(self):

        result = self.invoke(
            "generate", "--config", TINY, "--models", os.path.join(self.root, "none"),
            "--codecs", os.path.join(self.root, "none"), "--extent-x", "3", "--extent-y", "3",
            "--out", os.path.join(self.root, "scene.tudf"),
        )
        self.assertEqual(result.exit_code, 1)
        self.assertIn("train-diffusion", result.output)

        result = self.invoke(
            "encode", "--config", TINY, "--scene", os.path.join(self.root, "scene.tudf"),
            "--codecs", os.path.join(self.root, "none"), "--out", os.path.join(self.root, "scene.ltree"),
        )
        self.assertEqual(result.exit_code, 1)
        self.assertIn("train-codecs", result.output)

    def test_missing_grids_name_voxelize(self):
        result = self.invoke("train-codecs", "--config", TINY, "--data-dir", self.root, "--out", os.path.join(self.root, "codecs"))
        self.assertEqual(result.exit_code, 1)
        self.assertIn("voxelize", result.output)

    def test_invalid_config_lists_violations(self):
        result = self.invoke("make-scenes", "--set", "ladder.resolutions=[16, 30, 128]", "--out-dir", self.root)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("error: invalid config", result.output)
        self.assertIn("resolutions", result.output)


if __name__ == "__main__":
    unittest.main()
