import json
import os
import tempfile
import unittest

import numpy as np
import torch

from scenetree.diffusion.sampling import denoise_step, reverse_update, sample_patch
from scenetree.diffusion.schedule import NoiseSchedule
from scenetree.diffusion.unet import Denoiser, DenoiserConfig
from scenetree.errors import ScheduleError, ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid
from scenetree.latent_tree.codec import LatentGrid, LevelCodec, LevelCodecConfig
from scenetree.latent_tree.tree import build_tree, reconstruct
from scenetree.scene_synth.canvas import SceneCanvas, feather_weights
from scenetree.scene_synth.journal import LevelRecord, PlacementRecord, SynthesisJournal
from scenetree.scene_synth.pipeline import (
    GridFrame,
    SynthesisOptions,
    check_models,
    complete_scene,
    fuse_step,
    fused_sample,
    generate_coarse,
    generate_scene,
    inpaint_patch,
    refine_level,
    scene_extent_voxels,
)
from scenetree.scene_synth.planning import PatchSchedule, axis_offsets, overlap_stride, plan_patches, waves

TRUNCATION = 0.1


def make_denoiser(level=1, patch_size=4, seed=0) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(
        DenoiserConfig(
            level=level,
            latent_channels=2,
            base_channels=4,
            channel_mults=(1, 2),
            num_res_blocks=1,
            norm_groups=2,
            num_timesteps=5,
            patch_size=patch_size,
        )
    )
    # a non-zero head so the prediction depends on the input
    torch.nn.init.normal_(model.conv_out.weight, std=0.05)
    return model.eval()


def make_codec(level=1, seed=0, blocks=1) -> LevelCodec:
    torch.manual_seed(seed)
    return LevelCodec(
        LevelCodecConfig(
            level=level, factor=2, latent_channels=2, hidden_channels=4, num_res_blocks=blocks,
            truncation=TRUNCATION, tile_size=4,
        )
    ).eval()


def three_level_models():
    """16-voxel root patches from 4-voxel level-1 patches"""
    denoisers = [make_denoiser(level=1, patch_size=4, seed=1), make_denoiser(level=2, patch_size=8, seed=2)]
    codecs = [make_codec(level=1, seed=3), make_codec(level=2, seed=4)]
    return denoisers, codecs


class ConstantNoise(torch.nn.Module):
    def __init__(self, value=0.0, conditional=False):
        super().__init__()
        self.value = value
        self.conditional = conditional
        self.anchor = torch.nn.Parameter(torch.zeros(()))

    def forward(self, noisy_latent, timestep, condition=None):
        return torch.full_like(noisy_latent, self.value)


class RecordingNoise(torch.nn.Module):
    """Level-2 stub predicting, per crop, a constant taken from its geometry condition;
    every call's inputs and outputs are kept"""

    def __init__(self, num_timesteps=8, patch_size=8):
        super().__init__()
        self.config = DenoiserConfig(level=2, latent_channels=2, num_timesteps=num_timesteps, patch_size=patch_size)
        self.anchor = torch.nn.Parameter(torch.zeros(()))
        self.calls = []

    @property
    def conditional(self):
        return True

    def forward(self, noisy_latent, timestep, condition=None):
        level = 20.0 * condition.mean(dim=(1, 2, 3, 4)) + 0.01 * timestep.to(noisy_latent.dtype)
        eps = torch.ones_like(noisy_latent) * level.view(-1, 1, 1, 1, 1)
        self.calls.append((int(timestep[0]), noisy_latent.clone(), eps.clone()))
        return eps



class TestPlanning(unittest.TestCase):
    def test_axis_offsets(self):
        self.assertEqual(axis_offsets(32, 16, 0.5), [0, 8, 16])
        self.assertEqual(axis_offsets(20, 16, 0.5), [0, 4])
        self.assertEqual(axis_offsets(16, 16, 0.5), [0])
        with self.assertRaises(ScheduleError):
            axis_offsets(8, 16, 0.5)

    def test_three_by_three_waves(self):
        plan = plan_patches((32, 32, 16), 16)
        self.assertEqual(len(plan), 9)
        self.assertEqual(plan.num_waves, 3)
        cells = [p.cell for p in plan.placements]
        self.assertEqual(
            cells, [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (2, 1), (0, 2), (1, 2), (2, 2)]
        )
        self.assertEqual([len(group) for group in waves(plan).values()], [1, 3, 5])
        self.assertEqual(plan.placements[1].offset, (8, 0, 0))

    def test_masks_record_previous_coverage(self):
        plan = plan_patches((24, 20, 8), 8, overlap=0.25, start=(1, 1))
        covered = np.zeros(plan.extent, dtype=bool)
        for placement, mask in zip(plan.placements, plan.masks):
            np.testing.assert_array_equal(mask, covered[placement.slices()])
            covered[placement.slices()] = True
        self.assertFalse(plan.masks[0].any())
        self.assertTrue(covered.all())
        self.assertTrue((plan.coverage_count() >= 1).all())

    def test_invalid_plans(self):
        with self.assertRaises(ScheduleError):
            plan_patches((8, 8, 8), 16)
        with self.assertRaises(ScheduleError):
            plan_patches((32, 32, 32), 16)
        with self.assertRaises(ScheduleError):
            plan_patches((32, 32, 16), 16, overlap=1.0)
        with self.assertRaises(ScheduleError):
            plan_patches((32, 32, 16), 16, start=(5, 0))

    def test_tiny_overlap_that_rounds_to_no_sharing_is_rejected(self):
        with self.assertRaises(ScheduleError):
            plan_patches((32, 32, 16), 16, overlap=0.01)
        with self.assertRaises(ScheduleError):
            axis_offsets(32, 4, 0.1)
        self.assertEqual(overlap_stride(16, 0.05), 15)
        plan = plan_patches((32, 32, 16), 16, overlap=0.05)
        self.assertTrue(all(mask.any() for mask in plan.masks[1:]))

    def test_scene_extent_voxels(self):

        self.assertEqual(scene_extent_voxels(1.0, 0.1, 4, 16), 16)
        self.assertEqual(scene_extent_voxels(2.05, 0.1, 4, 16), 24)


class TestSceneCanvas(unittest.TestCase):
    def setUp(self):
        self.plan = plan_patches((6, 4, 4), 4, overlap=0.5)

    def test_fusion_averages_overlaps(self):
        canvas = SceneCanvas(1, self.plan.extent)
        canvas.begin_fusion()
        a, b = self.plan.placements
        canvas.accumulate(a, torch.full((1, 4, 4, 4), 1.0))
        canvas.accumulate(b, torch.full((1, 4, 4, 4), 4.0))
        fused = canvas.fuse()
        self.assertTrue(torch.all(fused[:, :2] == 1.0))
        self.assertTrue(torch.all(fused[:, 2:4] == 2.5))
        self.assertTrue(torch.all(fused[:, 4:] == 4.0))

    def test_fusion_is_order_invariant(self):
        plan = plan_patches((12, 12, 4), 4, overlap=0.5)
        generator = torch.Generator().manual_seed(0)
        predictions = [
            torch.randint(-50, 50, (2, 4, 4, 4), generator=generator).float() / 8 for _ in plan.placements
        ]
        results = []
        for order in (range(len(plan)), reversed(range(len(plan)))):
            canvas = SceneCanvas(2, plan.extent, feathered=True)
            canvas.begin_fusion()
            for index in order:
                canvas.accumulate(plan.placements[index], predictions[index])
            results.append(canvas.fuse())
        torch.testing.assert_close(results[0], results[1], rtol=0, atol=0)

    def test_uncovered_voxel_is_an_error(self):
        canvas = SceneCanvas(1, self.plan.extent)
        canvas.begin_fusion()
        canvas.accumulate(self.plan.placements[0], torch.zeros(1, 4, 4, 4))
        with self.assertRaises(ScheduleError):
            canvas.fuse()

    def test_feather_weights(self):
        weights = feather_weights((4, 6, 2))
        self.assertEqual(tuple(weights.shape), (4, 6, 2))
        self.assertEqual(float(weights[0, 0, 0]), 1.0)
        self.assertEqual(float(weights.max()), float(weights[1, 2, 0]))
        self.assertTrue(torch.all(weights > 0))

    def test_seed_and_write(self):
        canvas = SceneCanvas(2, (6, 4, 4))
        known = torch.zeros(4, 4, 4, dtype=torch.bool)
        known[:2] = True
        canvas.seed(torch.ones(2, 4, 4, 4), known)
        self.assertEqual(int(canvas.known.sum()), 32)
        self.assertTrue(torch.all(canvas.values[:, :2, :, :] == 1.0))
        self.assertTrue(torch.all(canvas.values[:, 2:, :, :] == 0.0))
        canvas.write(self.plan.placements[1], torch.full((2, 4, 4, 4), 3.0))
        self.assertTrue(torch.all(canvas.known[2:]))
        with self.assertRaises(ShapeMismatchError):
            canvas.write(self.plan.placements[0], torch.zeros(2, 4, 4, 2))


class TestInpainting(unittest.TestCase):
    def setUp(self):
        self.denoiser = make_denoiser()
        self.schedule = NoiseSchedule.create("cosine", 5)
        self.plan = plan_patches((4, 4, 4), 4)
        self.placement = self.plan.placements[0]

    def test_fully_known_patch_is_returned_unchanged(self):
        canvas = SceneCanvas(3, (4, 4, 4))
        content = torch.randn(3, 4, 4, 4)
        canvas.write(self.placement, content)
        out = inpaint_patch(self.denoiser, self.schedule, canvas, self.placement, canvas.known_crop(self.placement))
        torch.testing.assert_close(out, content, rtol=0, atol=0)

    def test_empty_mask_matches_unconditional_sampling(self):
        canvas = SceneCanvas(3, (4, 4, 4))
        mask = torch.zeros(4, 4, 4, dtype=torch.bool)
        for sampler in ("ddpm", "ddim"):
            a = inpaint_patch(
                self.denoiser, self.schedule, canvas, self.placement, mask,
                sampler=sampler, generator=torch.Generator().manual_seed(5),
            )
            b = sample_patch(
                self.denoiser, self.schedule, (1, 3, 4, 4, 4),
                sampler=sampler, generator=torch.Generator().manual_seed(5),
            )
            torch.testing.assert_close(a, b[0], rtol=0, atol=0)

    def test_known_region_is_preserved(self):
        canvas = SceneCanvas(3, (4, 4, 4))
        known = torch.zeros(4, 4, 4, dtype=torch.bool)
        known[:, :2] = True
        content = torch.randn(3, 4, 4, 4)
        canvas.seed(content, known)
        out = inpaint_patch(
            self.denoiser, self.schedule, canvas, self.placement, known,
            sampler="ddpm", generator=torch.Generator().manual_seed(0),
        )
        torch.testing.assert_close(out[:, known], content[:, known], rtol=0, atol=0)
        self.assertFalse(torch.allclose(out[:, ~known], torch.zeros(()), atol=1e-3))

    def test_mask_must_be_on_the_canvas(self):
        canvas = SceneCanvas(3, (4, 4, 4))
        with self.assertRaises(ScheduleError):
            inpaint_patch(self.denoiser, self.schedule, canvas, self.placement, torch.ones(4, 4, 4, dtype=torch.bool))


class TestFusedRefinement(unittest.TestCase):
    def setUp(self):
        self.denoiser = make_denoiser(level=2)
        self.schedule = NoiseSchedule.create("cosine", 5)

    def test_single_placement_equals_plain_step(self):
        plan = plan_patches((4, 4, 4), 4)
        z, c = torch.randn(2, 4, 4, 4), torch.randn(1, 4, 4, 4)
        fused = fuse_step(self.denoiser, self.schedule, z, c, plan, 4, 2, "ddim")
        direct = denoise_step(self.denoiser, self.schedule, z[None], 4, c[None], "ddim", prev_t=2)
        torch.testing.assert_close(fused, direct[0], rtol=0, atol=0)

    def test_single_placement_fused_sample_equals_sample_patch(self):
        plan = plan_patches((4, 4, 4), 4)
        c = torch.randn(1, 4, 4, 4)
        options = SynthesisOptions(sampler="ddpm")
        fused = fused_sample(self.denoiser, self.schedule, plan, 2, c, options, torch.Generator().manual_seed(2))
        single = sample_patch(self.denoiser, self.schedule, (1, 2, 4, 4, 4), c[None], "ddpm", torch.Generator().manual_seed(2))
        torch.testing.assert_close(fused, single[0], rtol=0, atol=1e-6)

    def test_pointwise_denoiser_fuses_exactly(self):
        stub = ConstantNoise(0.3)
        plan = plan_patches((12, 12, 4), 4)
        z, noise = torch.randn(2, 12, 12, 4), torch.randn(2, 12, 12, 4)
        fused = fuse_step(stub, self.schedule, z, None, plan, 3, 2, "ddpm", noise=noise, max_batch=4)
        whole = denoise_step(stub, self.schedule, z[None], 3, None, "ddpm", prev_t=2, noise=noise[None])
        torch.testing.assert_close(fused, whole[0], rtol=0, atol=1e-6)

    def test_placement_order_does_not_matter(self):
        plan = plan_patches((12, 12, 4), 4)
        reordered = PatchSchedule(
            extent=plan.extent,
            patch_size=plan.patch_size,
            overlap=plan.overlap,
            placements=list(reversed(plan.placements)),
            masks=list(reversed(plan.masks)),
        )
        z, c = torch.randn(2, 12, 12, 4), torch.randn(1, 12, 12, 4)
        a = fuse_step(self.denoiser, self.schedule, z, c, plan, 5, 4, "ddim", max_batch=3)
        b = fuse_step(self.denoiser, self.schedule, z, c, reordered, 5, 4, "ddim", max_batch=5)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


    def test_refinement_averages_overlapping_updates_at_every_step(self):
        stub = RecordingNoise()
        rng = np.random.default_rng(3)
        geometry = TUDFGrid(
            rng.uniform(0, TRUNCATION, size=(8, 8, 4)).astype(np.float32), 0.4, (0.0, 0.0, 0.0), TRUNCATION
        )
        latent = LatentGrid(rng.standard_normal((2, 8, 8, 4)).astype(np.float32), level=1)
        options = SynthesisOptions(sampler="ddim", max_batch=16)
        _, refined = refine_level(
            stub, make_codec(level=1), make_codec(level=2), geometry, latent, torch.Generator().manual_seed(0), options
        )

        plan = plan_patches((16, 16, 8), 8, overlap=0.5)
        self.assertEqual(len(plan), 9)
        self.assertEqual(plan.num_waves, 3)
        count = torch.from_numpy(plan.coverage_count()).float()
        schedule = NoiseSchedule.create(stub.config.schedule_family, 8)
        steps = schedule.sampling_timesteps(8)
        self.assertEqual(len(stub.calls), len(steps))

        def assemble(crops):
            canvas = torch.zeros(2, 16, 16, 8)
            for placement, crop in zip(plan.placements, crops):
                canvas[(slice(None),) + placement.slices()] = crop
            for placement, crop in zip(plan.placements, crops):
                torch.testing.assert_close(canvas[(slice(None),) + placement.slices()], crop, rtol=0, atol=0)
            return canvas

        offsets = [p.offset for p in plan.placements]
        a, b = offsets.index((0, 0, 0)), offsets.index((4, 0, 0))
        for k, (t, prev_t) in enumerate(steps):
            timestep, crops, eps = stub.calls[k]
            self.assertEqual(timestep, t)
            self.assertEqual(crops.shape[0], 9)
            self.assertFalse(torch.allclose(eps[a], eps[b]))
            updates = reverse_update(schedule, crops, eps, t, prev_t, "ddim")
            expected = torch.zeros(2, 16, 16, 8)
            for placement, update in zip(plan.placements, updates):
                expected[(slice(None),) + placement.slices()] += update
            expected /= count
            actual = assemble(stub.calls[k + 1][1]) if k + 1 < len(steps) else torch.from_numpy(refined.values)
            torch.testing.assert_close(actual, expected, rtol=1e-4, atol=1e-5, msg=f"step {t}")
            # voxels (4:8, 0:4) are covered by exactly placements a and b
            self.assertTrue(bool((count[4:8, 0:4] == 2).all()))
            torch.testing.assert_close(
                actual[:, 4:8, 0:4], (updates[a][:, 4:8, 0:4] + updates[b][:, 0:4, 0:4]) / 2, rtol=1e-4, atol=1e-5
            )


class TestPipeline(unittest.TestCase):

    def setUp(self):
        self.denoisers, self.codecs = three_level_models()
        self.options = SynthesisOptions(sampler="ddpm", max_batch=4)

    def generate(self, seed=0, **kwargs):
        return generate_scene(
            self.denoisers, self.codecs, (32, 32), torch.Generator().manual_seed(seed),
            voxel_size=0.1, options=self.options, **kwargs,
        )

    def test_generate_dims_and_range(self):
        journal = SynthesisJournal()
        grid = self.generate(journal=journal)
        self.assertEqual(grid.dims, (32, 32, 16))
        self.assertAlmostEqual(grid.voxel_size, 0.1)
        self.assertGreaterEqual(float(grid.values.min()), 0.0)
        self.assertLessEqual(float(grid.values.max()), np.float32(TRUNCATION))

        placements = [r for r in journal.records if isinstance(r, PlacementRecord)]
        levels = [r for r in journal.records if isinstance(r, LevelRecord)]
        self.assertEqual(len(placements), 9)
        self.assertEqual([(r.level, r.mode) for r in levels], [(1, "inpaint"), (2, "parallel")])

    def test_same_seed_same_scene(self):
        a, b = self.generate(seed=4), self.generate(seed=4)
        np.testing.assert_array_equal(a.values, b.values)
        c = self.generate(seed=5)
        self.assertFalse(np.array_equal(a.values, c.values))

    def test_sequential_refinement(self):
        self.options.refine_mode = "sequential"
        grid = self.generate()
        self.assertEqual(grid.dims, (32, 32, 16))
        self.options.refine_mode = "bogus"
        with self.assertRaises(ScheduleError):
            self.generate()

    def test_resume_reproduces_the_scene(self):
        with tempfile.TemporaryDirectory() as tmp:
            journal_path = os.path.join(tmp, "scene.journal.jsonl")
            first = self.generate(seed=9, work_dir=tmp, journal=SynthesisJournal(journal_path))
            with open(journal_path) as f:
                self.assertEqual(json.loads(f.readline())["kind"], "placement")

            os.remove(os.path.join(tmp, "stage-level2.pt"))
            resumed = self.generate(seed=9, work_dir=tmp, resume=True)
            np.testing.assert_array_equal(first.values, resumed.values)

            again = self.generate(seed=123, work_dir=tmp, resume=True)
            np.testing.assert_array_equal(first.values, again.values)

    def test_extent_must_divide_the_cumulative_factor(self):
        with self.assertRaises(ShapeMismatchError):
            generate_scene(self.denoisers, self.codecs, (30, 32), torch.Generator().manual_seed(0))

    def test_model_checks(self):
        check_models(self.denoisers, self.codecs)
        with self.assertRaises(ShapeMismatchError):
            check_models(self.denoisers, self.codecs[:1])
        with self.assertRaises(ShapeMismatchError):
            check_models([self.denoisers[0], make_denoiser(level=2, patch_size=4)], self.codecs)
        cascaded = LevelCodec(LevelCodecConfig(level=2, factor=2, latent_channels=2, hidden_channels=4, factorized=False))
        with self.assertRaises(ShapeMismatchError):
            check_models(self.denoisers, [self.codecs[0], cascaded])

    def test_seeded_coarse_canvas_keeps_known_content(self):
        canvas = SceneCanvas(3, (8, 8, 4))
        known = torch.zeros(8, 8, 4, dtype=torch.bool)
        known[:4] = True
        content = torch.randn(3, 8, 8, 4)
        canvas.seed(content, known)
        frame = GridFrame(0.1, (0.0, 0.0, 0.0), TRUNCATION)
        generate_coarse(
            self.denoisers[0], self.codecs[0], (8, 8), frame, [2, 2],
            torch.Generator().manual_seed(0), self.options, canvas=canvas,
        )
        torch.testing.assert_close(canvas.values[:, known], content[:, known], rtol=0, atol=0)
        self.assertTrue(canvas.known.all())


class TestCompletion(unittest.TestCase):
    def setUp(self):
        self.denoisers, self.codecs = three_level_models()
        values = np.random.default_rng(0).uniform(0, TRUNCATION, size=(16, 32, 16)).astype(np.float32)
        self.partial = TUDFGrid(values, 0.1, (0.0, 0.0, 0.0), TRUNCATION)
        self.options = SynthesisOptions(sampler="ddim", max_batch=4)

    def test_completes_to_the_target_extent(self):
        mask = np.ones(self.partial.dims, dtype=bool)
        for pin in (False, True):
            self.options.pin_known_levels = pin
            grid = complete_scene(
                self.denoisers, self.codecs, self.partial, mask, (32, 32),
                torch.Generator().manual_seed(0), self.options,
            )
            self.assertEqual(grid.dims, (32, 32, 16))

    def test_fully_known_scene_is_reconstructed(self):
        mask = np.ones(self.partial.dims, dtype=bool)
        grid = complete_scene(self.denoisers, self.codecs, self.partial, mask)
        expected = reconstruct(self.codecs, build_tree(self.codecs, self.partial))
        np.testing.assert_array_equal(grid.values, expected.values)

    def test_invalid_inputs(self):
        with self.assertRaises(ScheduleError):
            complete_scene(self.denoisers, self.codecs, self.partial, np.zeros(self.partial.dims, dtype=bool))
        with self.assertRaises(ShapeMismatchError):
            complete_scene(self.denoisers, self.codecs, self.partial, np.ones((16, 32, 8), dtype=bool))
        with self.assertRaises(ShapeMismatchError):
            complete_scene(
                self.denoisers, self.codecs, self.partial, np.ones(self.partial.dims, dtype=bool), (8, 32)
            )


class TestPartialCompletion(unittest.TestCase):
    """Half of a 32x32 root grid is known; codecs without residual blocks keep the decoder
    reach short enough that the first root voxels depend on known content only."""

    def setUp(self):
        self.denoisers = [make_denoiser(level=1, patch_size=4, seed=1), make_denoiser(level=2, patch_size=8, seed=2)]
        self.codecs = [make_codec(level=1, seed=3, blocks=0), make_codec(level=2, seed=4, blocks=0)]
        values = np.random.default_rng(1).uniform(0, TRUNCATION, size=(32, 32, 16)).astype(np.float32)
        self.partial = TUDFGrid(values, 0.1, (0.0, 0.0, 0.0), TRUNCATION)
        self.mask = np.zeros(self.partial.dims, dtype=bool)
        self.mask[:16] = True
        self.options = SynthesisOptions(sampler="ddim", max_batch=4, pin_known_levels=True)

    def complete(self, seed):
        return complete_scene(
            self.denoisers, self.codecs, self.partial, self.mask,
            generator=torch.Generator().manual_seed(seed), options=self.options,
        )

    def test_known_half_follows_the_encoded_partial(self):
        expected = reconstruct(self.codecs, build_tree(self.codecs, self.partial))
        for mode in ("parallel", "sequential"):
            self.options.refine_mode = mode
            grid = self.complete(seed=0)
            self.assertEqual(grid.dims, self.partial.dims)
            np.testing.assert_allclose(grid.values[:4], expected.values[:4], rtol=0, atol=1e-5, err_msg=mode)

    def test_unknown_half_depends_on_the_seed(self):
        a, b = self.complete(seed=0), self.complete(seed=1)
        self.assertFalse(np.allclose(a.values[16:], b.values[16:]))
        np.testing.assert_allclose(a.values[:4], b.values[:4], rtol=0, atol=1e-6)

    def test_pinned_latents_survive_refinement(self):
        rng = np.random.default_rng(2)
        geometry = TUDFGrid(
            rng.uniform(0, TRUNCATION, size=(8, 8, 4)).astype(np.float32), 0.4, (0.0, 0.0, 0.0), TRUNCATION
        )
        latent = LatentGrid(rng.standard_normal((2, 8, 8, 4)).astype(np.float32), level=1)
        values = rng.standard_normal((2, 16, 16, 8)).astype(np.float32)
        mask = np.zeros((16, 16, 8), dtype=bool)
        mask[:8] = True
        mask[12:, 12:] = True
        for mode in ("parallel", "sequential"):
            self.options.refine_mode = mode
            fine, refined = refine_level(
                self.denoisers[1], self.codecs[0], self.codecs[1], geometry, latent,
                torch.Generator().manual_seed(0), self.options, known=(values, mask),
            )
            self.assertEqual(fine.dims, (16, 16, 8))
            np.testing.assert_allclose(refined.values[:, mask], values[:, mask], rtol=0, atol=1e-6, err_msg=mode)
            self.assertFalse(np.allclose(refined.values[:, ~mask], 0.0), mode)



if __name__ == "__main__":
    unittest.main()
