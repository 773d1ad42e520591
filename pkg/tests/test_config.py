import os
import tempfile
import unittest

import yaml

from scenetree.config import RunConfig, config_hash, dump_config, validate_config
from scenetree.errors import ConfigError


class TestConfig(unittest.TestCase):
    def setUp(self):
        self.configs_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

    def test_shipped_configs_validate(self):
        cfg = validate_config(os.path.join(self.configs_dir, "default.yaml"))
        self.assertEqual(cfg.num_levels, 3)
        self.assertEqual(cfg.ladder.factors, [2, 4])
        self.assertEqual(cfg.geometry.iso_level, cfg.geometry.voxel_size)
        self.assertAlmostEqual(cfg.level_voxel_size(3), cfg.geometry.voxel_size)
        self.assertAlmostEqual(cfg.level_voxel_size(1), cfg.geometry.voxel_size * 8)

        tiny = validate_config(os.path.join(self.configs_dir, "tiny.yaml"))
        self.assertEqual(tiny.ladder.resolutions, [8, 16, 32])
        self.assertTrue(os.path.isabs(tiny.paths.codecs_dir))

    def test_defaults_without_a_file(self):
        cfg = validate_config()
        self.assertEqual(cfg.ladder.resolutions, [16, 32, 128])
        self.assertEqual(cfg.diffusion.sampler, "ddim")

    def test_overrides(self):
        cfg = validate_config(overrides=["seed=7", "diffusion.sampler=ddpm", "synthesis.overlap=0.25"])
        self.assertEqual(cfg.seed, 7)
        self.assertEqual(cfg.diffusion.sampler, "ddpm")
        self.assertEqual(cfg.synthesis.overlap, 0.25)

    def test_all_violations_are_reported(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(overrides=["ladder.resolutions=[16, 30, 128]", "diffusion.sampling_steps=5000"])
        violations = ctx.exception.violations
        self.assertTrue(any("resolutions[1]" in v for v in violations), violations)
        self.assertTrue(any("sampling_steps" in v for v in violations), violations)

    def test_schema_errors(self):
        for overrides in (["codec.bogus=1"], ["synthesis.overlap=1.5"], ["diffusion.sampler=euler"], ["seed"]):
            with self.assertRaises(ConfigError, msg=str(overrides)):
                validate_config(overrides=overrides)

    def test_iso_level_must_be_inside_the_truncation(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(overrides=["geometry.iso_level=0.5"])
        self.assertIn("iso_level", str(ctx.exception))

    def test_overlap_must_leave_shared_voxels(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(overrides=["synthesis.overlap=0.01"])
        self.assertTrue(any(v.startswith("synthesis.overlap") for v in ctx.exception.violations), ctx.exception.violations)

    def test_paths_must_be_creatable(self):
        with tempfile.TemporaryDirectory() as tmp:
            blocker = os.path.join(tmp, "blocker")
            with open(blocker, "w") as f:
                f.write("x")
            cfg = validate_config(overrides=[f"paths.output_dir={os.path.join(tmp, 'new', 'deeper')}"])
            self.assertEqual(cfg.paths.output_dir, os.path.join(tmp, "new", "deeper"))
            with self.assertRaises(ConfigError) as ctx:
                validate_config(
                    overrides=[f"paths.grids_dir={blocker}", f"paths.output_dir={os.path.join(blocker, 'out')}"]
                )
            violations = ctx.exception.violations
            self.assertTrue(any(v.startswith("paths.grids_dir") for v in violations), violations)
            self.assertTrue(any(v.startswith("paths.output_dir") for v in violations), violations)

    def test_unreadable_files(self):

        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                validate_config(os.path.join(tmp, "missing.yaml"))
            path = os.path.join(tmp, "list.yaml")
            with open(path, "w") as f:
                f.write("- 1\n- 2\n")
            with self.assertRaises(ConfigError):
                validate_config(path)

    def test_hash_and_dump(self):
        cfg = validate_config()
        self.assertEqual(config_hash(cfg), config_hash(validate_config()))
        self.assertNotEqual(config_hash(cfg), config_hash(validate_config(overrides=["seed=1"])))
        reloaded = RunConfig.model_validate(yaml.safe_load(dump_config(cfg)))
        self.assertEqual(config_hash(reloaded), config_hash(cfg))


if __name__ == "__main__":
    unittest.main()
