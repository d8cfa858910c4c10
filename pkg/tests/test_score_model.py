#!/usr/bin/env python3
"""
Tests for the score network, projected denoising score matching, training
and checkpoints.
"""
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

# Add parent directory to path to import package modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sms_diffusion.diffusion import SelfConsistencyProjection, VESchedule
from sms_diffusion.score_model import (
    ScoreNet,
    build_dataset,
    dsm_loss,
    from_channels,
    load_checkpoint,
    make_score_fn,
    project_channels,
    save_checkpoint,
    score_tensor,
    smoothed,
    to_channels,
    train,
)
from utils import (
    ArtifactError,
    InvalidArgumentError,
    PhantomSpec,
    ProjectionConfig,
    ScoreNetConfig,
    TrainConfig,
    TrainingError,
)
from tests.oracles import filtered_operator, identity_operator, random_complex

SMALL_NET = ScoreNetConfig(width=8, n_hidden=2, embed_dim=8, dtype="float64")


class TestChannels(unittest.TestCase):
    """Complex images to real channels and back."""

    def test_layout(self):
        x = random_complex(np.random.default_rng(0), (2, 3, 2, 4, 5))
        u = to_channels(x, torch.float64)
        self.assertEqual(tuple(u.shape), (2, 12, 4, 5))
        np.testing.assert_array_equal(u[:, :6].numpy(), x.reshape(2, 6, 4, 5).real)
        np.testing.assert_array_equal(from_channels(u, (3, 2, 4, 5)), x)

    def test_projection_gradient(self):
        u = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        out = project_channels(u, lambda z: 0.5 * z, (1, 2, 3, 3))
        out.sum().backward()
        np.testing.assert_allclose(out.detach().numpy(), 0.5 * u.detach().numpy())
        np.testing.assert_allclose(u.grad.numpy(), 0.5)


class TestScoreNet(unittest.TestCase):
    """Network shapes and the zero-initialised output layer."""

    def setUp(self):
        torch.manual_seed(0)
        self.net = ScoreNet(2, 2, SMALL_NET)
        self.schedule = VESchedule()

    def test_starts_at_zero_score(self):
        score = make_score_fn(self.net, self.schedule)
        x = random_complex(np.random.default_rng(1), (2, 2, 8, 8))
        out = score(x, 0.5)
        self.assertEqual(out.shape, x.shape)
        self.assertEqual(np.abs(out).max(), 0.0)

    def test_batched_score(self):
        score = make_score_fn(self.net, self.schedule)
        x = random_complex(np.random.default_rng(1), (3, 2, 2, 8, 8))
        self.assertEqual(score(x, 0.2).shape, x.shape)

    def test_channel_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            self.net(torch.zeros(1, 6, 8, 8, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
        with self.assertRaises(InvalidArgumentError):
            make_score_fn(self.net, self.schedule)(np.zeros((1, 3, 8, 8), dtype=complex), 0.5)


    def test_seeded_build_is_reproducible(self):
        state = torch.random.get_rng_state()
        first = ScoreNet(1, 2, SMALL_NET, seed=3)
        second = ScoreNet(1, 2, SMALL_NET, seed=3)
        other = ScoreNet(1, 2, SMALL_NET, seed=4)
        self.assertTrue(torch.equal(torch.random.get_rng_state(), state))
        for a, b in zip(first.parameters(), second.parameters()):
            self.assertTrue(torch.equal(a, b))
        self.assertFalse(torch.equal(first.convs[0].weight, other.convs[0].weight))


class TestLossGradients(unittest.TestCase):
    """The DSM loss through T against finite differences and the unprojected loss."""

    def setUp(self):
        self.schedule = VESchedule(sigma_min=0.01, sigma_max=2.0)
        self.net = ScoreNet(2, 2, SMALL_NET, seed=11)
        with torch.no_grad():
            self.net.out.weight.normal_(std=0.1, generator=torch.Generator().manual_seed(12))
        self.data = random_complex(np.random.default_rng(13), (2, 2, 2, 6, 6))

    def _loss(self, projector):
        return dsm_loss(self.net, self.data, self.schedule, projector, np.random.default_rng(14)).loss

    def test_parameter_gradient_matches_finite_differences(self):
        projector = SelfConsistencyProjection(filtered_operator((6, 6)), ProjectionConfig(mu=0.3))
        self.assertEqual(projector.method, "direct")
        params = list(self.net.parameters())
        generator = torch.Generator().manual_seed(15)
        direction = [torch.randn(p.shape, dtype=p.dtype, generator=generator) for p in params]

        self.net.zero_grad()
        self._loss(projector).backward()
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, direction))

        h = 1e-6
        with torch.no_grad():
            for p, d in zip(params, direction):
                p.add_(h * d)
            upper = float(self._loss(projector))
            for p, d in zip(params, direction):
                p.sub_(2 * h * d)
            lower = float(self._loss(projector))
            for p, d in zip(params, direction):
                p.add_(h * d)
        numeric = (upper - lower) / (2 * h)
        self.assertLess(abs(numeric - analytic), 1e-5 * abs(analytic))

    def test_identity_projection_gives_plain_dsm(self):
        projector = SelfConsistencyProjection(identity_operator((6, 6)))
        data = random_complex(np.random.default_rng(16), (3, 1, 2, 6, 6))
        net = ScoreNet(1, 2, SMALL_NET, seed=17)
        with torch.no_grad():
            net.out.weight.normal_(std=0.1, generator=torch.Generator().manual_seed(18))
        output = dsm_loss(net, data, self.schedule, projector, np.random.default_rng(19))

        sigmas = np.array([self.schedule.sigma(t) for t in output.t])
        np.testing.assert_allclose(output.x_t, data + sigmas[:, None, None, None, None] * output.z, atol=1e-12)
        sigma = torch.as_tensor(sigmas, dtype=torch.float64)
        with torch.no_grad():
            score = score_tensor(net, to_channels(output.x_t, torch.float64), torch.as_tensor(output.t), sigma)
            plain = (sigma[:, None, None, None] * score + to_channels(output.z, torch.float64)).pow(2).sum(dim=(1, 2, 3))
        np.testing.assert_allclose(output.per_sample.detach().numpy(), plain.numpy(), rtol=1e-10, atol=0)


class TestTrainingProgress(unittest.TestCase):
    """Adam on pure-noise data: the network learns to predict -z."""

    def setUp(self):
        self.schedule = VESchedule(sigma_min=0.5, sigma_max=1.0)
        self.projector = SelfConsistencyProjection(identity_operator((8, 8)))
        self.data = np.zeros((4, 1, 2, 8, 8), dtype=complex)
        self.cfg = TrainConfig(steps=400, batch_size=4, learning_rate=1e-2, seed=21)

    def _train(self):
        net = ScoreNet(1, 2, SMALL_NET, seed=22)
        return train(net, self.data, self.schedule, self.projector, self.cfg)

    def test_loss_drops(self):
        curve = smoothed(self._train().losses, window=20)
        self.assertLessEqual(curve[-1], 0.7 * curve[0])

    def test_same_seed_same_curve(self):
        self.assertEqual(self._train().losses, self._train().losses)



class TestDenoisingScoreMatching(unittest.TestCase):
    """Projected DSM loss and the Adam loop."""

    def setUp(self):
        torch.manual_seed(0)
        self.schedule = VESchedule(sigma_min=0.01, sigma_max=2.0)
        self.projector = SelfConsistencyProjection(identity_operator((8, 8)))
        self.data = random_complex(np.random.default_rng(2), (4, 1, 2, 8, 8))
        self.temp_dir = tempfile.TemporaryDirectory()
        self.dir = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_zero_network_loss_is_noise_energy(self):
        net = ScoreNet(1, 2, SMALL_NET)
        output = dsm_loss(net, self.data, self.schedule, self.projector, np.random.default_rng(3))
        expected = np.sum(np.abs(output.z) ** 2, axis=(1, 2, 3, 4))
        np.testing.assert_allclose(output.per_sample.detach().numpy(), expected, rtol=1e-10)
        self.assertTrue(np.all((output.t >= 1e-3) & (output.t <= 1.0)))

    def test_gradients_reach_the_network(self):
        net = ScoreNet(1, 2, SMALL_NET)
        output = dsm_loss(net, self.data, self.schedule, self.projector, np.random.default_rng(3))
        output.loss.backward()
        self.assertGreater(float(net.out.weight.grad.abs().sum()), 0.0)

    def test_training_loop(self):
        net = ScoreNet(1, 2, SMALL_NET)
        cfg = TrainConfig(steps=5, batch_size=2, learning_rate=1e-3, seed=4, checkpoint_every=5)
        result = train(net, self.data, self.schedule, self.projector, cfg, self.dir / "score.ct4f")
        self.assertEqual(len(result.losses), 5)
        self.assertTrue(np.all(np.isfinite(result.losses)))
        self.assertTrue((self.dir / "score.ct4f").exists())
        self.assertEqual(smoothed(result.losses, window=2).shape, (4,))

    def test_non_finite_loss_writes_checkpoint(self):
        net = ScoreNet(1, 2, SMALL_NET)
        cfg = TrainConfig(steps=3, batch_size=2, seed=4)
        with self.assertRaises(TrainingError):
            train(net, self.data, self.schedule, lambda z: np.full_like(z, np.nan), cfg, self.dir / "bad.ct4f")
        self.assertTrue((self.dir / "bad.ct4f").exists())
        self.assertTrue((self.dir / "bad.json").exists())

    def test_rejects_bad_dataset(self):
        net = ScoreNet(1, 2, SMALL_NET)
        with self.assertRaises(InvalidArgumentError):
            train(net, self.data[0], self.schedule, self.projector, TrainConfig(steps=1))


class TestCheckpoint(unittest.TestCase):
    """Parameter payload plus architecture sidecar."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.dir = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_reloaded_network_matches(self):
        torch.manual_seed(5)
        net = ScoreNet(2, 2, SMALL_NET)
        torch.nn.init.normal_(net.out.weight, std=0.1)
        save_checkpoint(net, self.dir / "net.ct4f", {"step": 7})
        loaded, meta = load_checkpoint(self.dir / "net.ct4f")
        self.assertEqual(meta["step"], 7)
        self.assertEqual(meta["architecture"], net.architecture())

        schedule = VESchedule()
        x = random_complex(np.random.default_rng(6), (2, 2, 8, 8))
        np.testing.assert_array_equal(make_score_fn(net, schedule)(x, 0.3), make_score_fn(loaded, schedule)(x, 0.3))

    def test_layout_mismatch(self):
        net = ScoreNet(1, 2, SMALL_NET)
        save_checkpoint(net, self.dir / "net.ct4f")
        other = ScoreNet(1, 2, ScoreNetConfig(width=4, n_hidden=2, embed_dim=8, dtype="float64"))
        save_checkpoint(other, self.dir / "other.ct4f")
        # architecture from one file, parameters from the other
        (self.dir / "other.json").write_bytes((self.dir / "net.json").read_bytes())
        with self.assertRaises(ArtifactError):
            load_checkpoint(self.dir / "other.ct4f")


class TestDataset(unittest.TestCase):
    """Training images from phantoms."""

    def test_shape_and_shared_coils(self):
        spec = PhantomSpec(n_slice=2, n_coil=3, grid=(16, 16), seed=8)
        data = build_dataset(spec, 3)
        self.assertEqual(data.shape, (3, 2, 3, 16, 16))
        # same maps: coil ratios agree wherever both phantoms are non-zero
        both = (np.abs(data[0, 0, 0]) > 1e-6) & (np.abs(data[1, 0, 0]) > 1e-6)
        ratio_a = data[0, 0, 1][both] / data[0, 0, 0][both]
        ratio_b = data[1, 0, 1][both] / data[1, 0, 0][both]
        np.testing.assert_allclose(ratio_a, ratio_b, atol=1e-8)
        with self.assertRaises(InvalidArgumentError):
            build_dataset(spec, 0)


if __name__ == "__main__":
    unittest.main()
