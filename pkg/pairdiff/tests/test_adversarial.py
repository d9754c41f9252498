import math

import torch
from django.test import SimpleTestCase
from torch.nn import functional as F

from pairdiff.adversarial import (
    Discriminator, DiscriminatorSchedule, combine_generator_loss, discriminator_loss, discriminator_step,
    generator_adversarial_loss, sample_timesteps, t_max,
)


def constant_discriminator(bias):
    torch.manual_seed(0)
    disc = Discriminator(in_channels=4, input_size=8, base_channels=8)
    with torch.no_grad():
        disc.head.weight.zero_()
        disc.head.bias.fill_(bias)
    return disc


class TimestepRampTest(SimpleTestCase):
    def setUp(self):
        self.sched = DiscriminatorSchedule(T=1000, sigma=20, alpha_epochs=10, i0=20)

    def test_ramp_values(self):
        self.assertEqual(t_max(0, self.sched), 20)
        self.assertEqual(t_max(5, self.sched), 30)
        self.assertEqual(t_max(10, self.sched), 40)
        self.assertEqual(t_max(495, self.sched), 1000)

    def test_worked_example(self):
        sched = DiscriminatorSchedule(T=1000, sigma=10, alpha_epochs=5, i0=50)
        self.assertEqual(t_max(100, sched), 250)

    def test_ramp_is_monotone_and_capped(self):
        values = [t_max(s, self.sched) for s in range(0, 600)]
        self.assertTrue(all(a <= b for a, b in zip(values, values[1:])))
        self.assertEqual(max(values), 1000)

    def test_ramp_disabled_gives_T(self):
        sched = DiscriminatorSchedule(T=500, ramp=False)
        self.assertEqual(t_max(0, sched), 500)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            t_max(-1, self.sched)
        with self.assertRaises(ValueError):
            DiscriminatorSchedule(sigma=0)
        with self.assertRaises(ValueError):
            DiscriminatorSchedule(i0=0)


class TimestepSamplingTest(SimpleTestCase):
    def test_priority_half_comes_from_top_quarter(self):
        sched = DiscriminatorSchedule(T=1000, i0=20, priority_until_epoch=10)
        rng = torch.Generator().manual_seed(0)
        for _ in range(20):
            t = sample_timesteps(9, 0, sched, rng)
            self.assertTrue(((t >= 1) & (t <= 20)).all())
            self.assertGreaterEqual(int((t >= 15).sum()), 5)

    def test_priority_frequency(self):
        sched = DiscriminatorSchedule(T=1000, i0=20, priority_until_epoch=10)
        t = sample_timesteps(100000, 0, sched, torch.Generator().manual_seed(1))
        # half from [15, 20], half uniform over [1, 20]
        fraction = float((t >= 15).float().mean())
        self.assertAlmostEqual(fraction, 0.5 + 0.5 * 6 / 20, delta=0.01)

    def test_uniform_after_priority_period(self):
        sched = DiscriminatorSchedule(T=1000, i0=20, priority_until_epoch=0)
        t = sample_timesteps(100000, 0, sched, torch.Generator().manual_seed(2))
        counts = torch.bincount(t, minlength=21)[1:].float() / t.numel()
        self.assertEqual(int(t.min()), 1)
        self.assertEqual(int(t.max()), 20)
        self.assertTrue(torch.all((counts - 0.05).abs() < 0.01))

    def test_single_available_timestep(self):
        cases = {
            'ramp start': DiscriminatorSchedule(T=1000, i0=1, priority_until_epoch=10),
            'one step chain': DiscriminatorSchedule(T=1, priority_until_epoch=10),
        }
        for label, sched in cases.items():
            self.assertEqual(t_max(0, sched), 1, label)
            for epoch in (0, 10):
                with self.subTest(label, epoch=epoch):
                    t = sample_timesteps(7, epoch, sched, torch.Generator().manual_seed(0))
                    self.assertTrue(torch.equal(t, torch.ones(7, dtype=t.dtype)))

    def test_seeded_draws_repeat(self):
        sched = DiscriminatorSchedule()
        a = sample_timesteps(16, 3, sched, torch.Generator().manual_seed(4))
        b = sample_timesteps(16, 3, sched, torch.Generator().manual_seed(4))
        self.assertTrue(torch.equal(a, b))


class DiscriminatorLossTest(SimpleTestCase):
    def setUp(self):
        gen = torch.Generator().manual_seed(0)
        self.real = torch.randn(3, 4, 8, 8, generator=gen)
        self.fake = torch.randn(3, 4, 8, 8, generator=gen)
        self.t = torch.tensor([1, 5, 9])

    def test_indifferent_discriminator_costs_ln2(self):
        disc = constant_discriminator(0.0)
        self.assertAlmostEqual(float(discriminator_loss(disc, self.real, self.fake, self.t)), math.log(2), places=6)
        self.assertAlmostEqual(float(generator_adversarial_loss(disc, self.fake, self.t)), math.log(2), places=6)

    def test_constant_logit_closed_form(self):
        b = 1.3
        disc = constant_discriminator(b)
        expected_d = 0.5 * (float(F.softplus(torch.tensor(-b))) + float(F.softplus(torch.tensor(b))))
        self.assertAlmostEqual(float(discriminator_loss(disc, self.real, self.fake, self.t)), expected_d, places=5)
        self.assertAlmostEqual(float(generator_adversarial_loss(disc, self.fake, self.t)),
                               float(F.softplus(torch.tensor(-b))), places=5)

    def test_probabilities_inside_open_interval(self):
        disc = constant_discriminator(100.0)
        p = disc(self.real, self.t)
        self.assertTrue(((p > 0) & (p < 1)).all())

    def test_generator_loss_leaves_discriminator_untouched(self):
        disc = constant_discriminator(0.2)
        fake = self.fake.clone().requires_grad_(True)
        generator_adversarial_loss(disc, fake, self.t).backward()
        self.assertIsNotNone(fake.grad)
        self.assertTrue(all(p.grad is None for p in disc.parameters()))
        self.assertTrue(all(p.requires_grad for p in disc.parameters()))

    def test_discriminator_step_updates_weights(self):
        torch.manual_seed(0)
        disc = Discriminator(in_channels=4, input_size=8, base_channels=8)
        before = [p.detach().clone() for p in disc.parameters()]
        optimizer = torch.optim.Adam(disc.parameters(), lr=1e-3)
        loss = discriminator_step(disc, optimizer, self.real, self.fake, self.t)
        self.assertTrue(math.isfinite(loss))
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(before, disc.parameters())))

    def test_discriminator_step_lowers_its_loss(self):
        torch.manual_seed(0)
        disc = Discriminator(in_channels=4, input_size=8, base_channels=8)
        optimizer = torch.optim.SGD(disc.parameters(), lr=1e-3)
        loss_before = discriminator_step(disc, optimizer, self.real, self.fake, self.t)
        with torch.no_grad():
            loss_after = float(discriminator_loss(disc, self.real, self.fake, self.t))
        self.assertLess(loss_after, loss_before)

    def test_batch_mismatches_rejected(self):
        disc = constant_discriminator(0.0)
        with self.assertRaises(ValueError):
            discriminator_loss(disc, self.real[:2], self.fake, self.t)
        with self.assertRaises(ValueError):
            discriminator_loss(disc, self.real, self.fake, self.t[:2])
        with self.assertRaises(ValueError):
            generator_adversarial_loss(disc, self.fake[:0], self.t[:0])

    def test_input_size_must_be_power_of_two(self):
        with self.assertRaises(ValueError):
            Discriminator(in_channels=4, input_size=12)

    def test_combined_loss(self):
        total = combine_generator_loss(torch.tensor(0.4), torch.tensor(2.0))
        self.assertAlmostEqual(float(total), 0.9, places=6)
