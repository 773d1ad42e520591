import os
import tempfile
import unittest

import numpy as np
import torch
import torch.nn.functional as F

from scenetree.errors import SerializationError, ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid
from scenetree.latent_tree.codec import LatentGrid, LevelCodec, LevelCodecConfig, decode_level, encode_level
from scenetree.latent_tree.tree import (
    build_tree,
    encode_scene,
    evaluate_reconstruction,
    load_tree,
    reconstruct,
    save_tree,
)

TRUNCATION = 0.1


def parameter_gradient_pairs(model: torch.nn.Module, loss_fn, per_tensor=2, eps=1e-6):
    """(name, autograd, central difference) for a few coordinates of every parameter"""
    model.zero_grad()
    loss_fn().backward()
    picker = torch.Generator().manual_seed(0)
    pairs = []
    for name, param in model.named_parameters():
        flat, grad = param.detach().view(-1), param.grad.view(-1)
        for idx in torch.randperm(flat.numel(), generator=picker)[:per_tensor].tolist():
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + eps
                up = loss_fn().item()
                flat[idx] = original - eps
                down = loss_fn().item()
                flat[idx] = original
            pairs.append((name, grad[idx].item(), (up - down) / (2 * eps)))
    return pairs



def tiny_codec(level=1, factor=2, tile_size=2, factorized=True, seed=0) -> LevelCodec:
    torch.manual_seed(seed)
    config = LevelCodecConfig(
        level=level,
        factor=factor,
        latent_channels=2,
        hidden_channels=4,
        truncation=TRUNCATION,
        factorized=factorized,
        tile_size=tile_size,
    )
    return LevelCodec(config).eval()


def random_scene(dims, seed=0, voxel_size=0.05) -> TUDFGrid:
    values = np.random.default_rng(seed).uniform(0, TRUNCATION, size=dims).astype(np.float32)
    return TUDFGrid(values, voxel_size, (0.0, 0.0, 0.0), TRUNCATION)


class TestLevelCodec(unittest.TestCase):
    def test_pooled_geometry_is_window_mean(self):
        codec = tiny_codec()
        patch = torch.rand(2, 1, 4, 6, 8) * TRUNCATION
        coarse, latent = codec.encode(patch)
        expected = patch.double().reshape(2, 1, 2, 2, 3, 2, 4, 2).mean(dim=(3, 5, 7)).float()
        torch.testing.assert_close(coarse, expected, rtol=0, atol=1e-8)
        self.assertEqual(tuple(latent.shape), (2, 2, 2, 3, 4))

    def test_pooling_is_within_one_ulp_of_the_exact_mean(self):
        rng = np.random.default_rng(0)
        for factor in (2, 4):
            codec = tiny_codec(factor=factor)
            values = rng.uniform(0, TRUNCATION, size=(1000, 1, 8, 8, 8)).astype(np.float32)
            pooled = codec.pool(torch.from_numpy(values)).numpy()
            self.assertEqual(pooled.dtype, np.float32)
            n = 8 // factor
            exact = values.astype(np.float64).reshape(1000, 1, n, factor, n, factor, n, factor).mean(axis=(3, 5, 7))
            ulp = np.spacing(exact.astype(np.float32))
            self.assertTrue(np.all(np.abs(pooled.astype(np.float64) - exact) <= ulp), factor)


    def test_rejects_non_divisible_patch(self):
        codec = tiny_codec()
        with self.assertRaises(ShapeMismatchError):
            codec.encode(torch.zeros(1, 1, 4, 4, 5))
        with self.assertRaises(ShapeMismatchError):
            codec.encode(torch.zeros(1, 2, 4, 4, 4))

    def test_decode_stays_in_truncation_range(self):
        codec = tiny_codec()
        with torch.no_grad():
            out = codec.decode(torch.rand(1, 1, 2, 2, 2) * TRUNCATION, torch.randn(1, 2, 2, 2, 2) * 10)
        self.assertGreaterEqual(float(out.min()), 0.0)
        self.assertLessEqual(float(out.max()), TRUNCATION + 1e-7)

    def test_zero_hidden_decoder_upsamples_geometry(self):
        codec = tiny_codec()
        with torch.no_grad():
            codec.decoder[-1].weight.zero_()
            codec.decoder[-1].bias.zero_()
            coarse = torch.rand(1, 1, 2, 3, 2) * TRUNCATION
            out = codec.decode(coarse, torch.randn(1, 2, 2, 3, 2))
        torch.testing.assert_close(out, F.interpolate(coarse, scale_factor=2, mode="nearest"))

    def test_forward_loss_is_mse(self):
        codec = tiny_codec()
        patch = torch.rand(1, 1, 4, 4, 4) * TRUNCATION
        with torch.no_grad():
            output = codec(patch)
            raw = codec._decode_raw(output.coarse, output.latent)
        torch.testing.assert_close(output.loss, F.mse_loss(raw, patch))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        codec = LevelCodec(
            LevelCodecConfig(level=1, factor=2, latent_channels=1, hidden_channels=2, truncation=TRUNCATION)
        ).double()
        patch = (torch.rand(1, 1, 2, 2, 2, dtype=torch.float64) * TRUNCATION).requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(lambda p: codec(p).loss, (patch,), eps=1e-6, atol=1e-5))

    def test_parameter_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        codec = LevelCodec(
            LevelCodecConfig(level=1, factor=2, latent_channels=2, hidden_channels=4, truncation=TRUNCATION)
        ).double()
        patch = torch.rand(1, 1, 8, 8, 8, dtype=torch.float64) * TRUNCATION
        for name, analytic, numeric in parameter_gradient_pairs(codec, lambda: codec(patch).loss):
            self.assertLess(abs(analytic - numeric), 1e-7 + 1e-4 * abs(numeric), name)

    def test_cascaded_variant_carries_geometry_in_the_latent(self):

        codec = tiny_codec(factorized=False)
        self.assertEqual(codec.config.code_channels, 3)
        _, latent = codec.encode(torch.rand(1, 1, 4, 4, 4) * TRUNCATION)
        self.assertEqual(latent.shape[1], 3)
        with self.assertRaises(ShapeMismatchError):
            codec.decode(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 2, 2, 2, 2))

    def test_standardization_survives_save_pretrained(self):
        codec = tiny_codec()
        codec.set_standardization([0.5, -0.5], [2.0, 3.0], 0.05, 0.02)
        with tempfile.TemporaryDirectory() as tmp:
            codec.save_pretrained(tmp)
            loaded = LevelCodec.from_pretrained(tmp)
        torch.testing.assert_close(loaded.latent_mean, torch.tensor([0.5, -0.5]))
        torch.testing.assert_close(loaded.latent_std, torch.tensor([2.0, 3.0]))
        latent = torch.randn(1, 2, 2, 2, 2)
        torch.testing.assert_close(loaded.destandardize_latent(loaded.standardize_latent(latent)), latent)

    def test_level_helpers(self):
        codec = tiny_codec()
        scene = random_scene((4, 4, 6))
        coarse, latent = encode_level(codec, scene)
        self.assertEqual(coarse.dims, (2, 2, 3))
        self.assertAlmostEqual(coarse.voxel_size, 0.1)
        self.assertEqual(latent.dims, (2, 2, 3))
        fine = decode_level(codec, coarse, latent)
        self.assertEqual(fine.dims, scene.dims)
        self.assertAlmostEqual(fine.voxel_size, 0.05)
        with self.assertRaises(ShapeMismatchError):
            decode_level(codec, coarse, LatentGrid(np.zeros((2, 2, 2, 2)), level=1))


class TestEncodeScene(unittest.TestCase):
    def test_tiling_does_not_change_the_result(self):
        scene = random_scene((16, 12, 8), seed=1)
        tiled = tiny_codec(tile_size=2)
        whole = tiny_codec(tile_size=64)
        coarse_a, latent_a = encode_scene(tiled, scene)
        coarse_b, latent_b = encode_scene(whole, scene)
        np.testing.assert_array_equal(coarse_a.values, coarse_b.values)
        np.testing.assert_allclose(latent_a.values, latent_b.values, rtol=0, atol=1e-5)

    def test_matches_single_pass_encoder(self):
        scene = random_scene((8, 8, 8), seed=2)
        codec = tiny_codec(tile_size=1)
        _, latent = encode_scene(codec, scene)
        with torch.no_grad():
            _, direct = codec.encode(torch.from_numpy(scene.values)[None, None])
        np.testing.assert_allclose(latent.values, direct[0].numpy(), rtol=0, atol=1e-5)

    def test_rejects_non_divisible_scene(self):
        with self.assertRaises(ShapeMismatchError):
            encode_scene(tiny_codec(), random_scene((5, 4, 4)))


class TestLatentTree(unittest.TestCase):
    def setUp(self):
        self.codecs = [tiny_codec(level=1, seed=1), tiny_codec(level=2, seed=2)]
        self.scene = random_scene((10, 8, 8), seed=3)

    def test_build_and_reconstruct(self):
        tree = build_tree(self.codecs, self.scene)
        self.assertEqual(tree.num_levels, 3)
        self.assertEqual(tree.root_dims, (12, 8, 8))
        self.assertEqual(tree.original_dims, (10, 8, 8))
        self.assertEqual(tree.level_dims(1), (3, 2, 2))
        self.assertEqual(tree.levels[1].latent.dims, (6, 4, 4))
        self.assertAlmostEqual(tree.levels[0].geometry.voxel_size, 0.2)

        recon = reconstruct(self.codecs, tree)
        self.assertEqual(recon.dims, self.scene.dims)
        self.assertGreaterEqual(float(recon.values.min()), 0.0)
        self.assertLessEqual(float(recon.values.max()), np.float32(TRUNCATION))
        self.assertEqual(reconstruct(self.codecs, tree, crop=False).dims, (12, 8, 8))

    def test_coarsest_geometry_is_pooled_scene(self):
        tree = build_tree(self.codecs, random_scene((8, 8, 8), seed=4))
        scene = random_scene((8, 8, 8), seed=4)
        expected = scene.values.astype(np.float64).reshape(2, 4, 2, 4, 2, 4).mean(axis=(1, 3, 5))
        np.testing.assert_allclose(tree.levels[0].geometry.values, expected, rtol=0, atol=1e-6)

    def test_codecs_must_be_ordered_by_level(self):
        with self.assertRaises(ShapeMismatchError):
            build_tree(list(reversed(self.codecs)), self.scene)

    def test_tree_container(self):
        tree = build_tree(self.codecs, self.scene)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "scene.ltree")
            save_tree(tree, path)
            loaded = load_tree(path)
            self.assertEqual(loaded.factors, tree.factors)
            self.assertEqual(loaded.original_dims, tree.original_dims)
            for a, b in zip(loaded.levels, tree.levels):
                np.testing.assert_array_equal(a.geometry.values, b.geometry.values)
                np.testing.assert_array_equal(a.latent.values, b.latent.values)

            with open(path, "rb") as f:
                raw = f.read()
            with open(path, "wb") as f:
                f.write(raw[:-8])
            with self.assertRaises(SerializationError):
                load_tree(path)

    def test_tree_format_is_identified_by_magic_not_suffix(self):
        tree = build_tree(self.codecs, self.scene)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "scene.bin")
            save_tree(tree, path)
            self.assertEqual(load_tree(path).num_levels, tree.num_levels)
            with open(path, "rb") as f:
                raw = f.read()
            self.assertEqual(raw[:4], b"LTRE")
            with open(path, "wb") as f:
                f.write(b"LPAT" + raw[4:])
            with self.assertRaises(SerializationError):
                load_tree(path)

    def test_reconstruction_error(self):
        error = evaluate_reconstruction(self.codecs[0], [random_scene((6, 4, 4), seed=5)])
        self.assertTrue(np.isfinite(error))
        self.assertGreaterEqual(error, 0.0)


if __name__ == "__main__":
    unittest.main()
