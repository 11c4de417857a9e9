"""Tests for the SPADE generator, dual-branch discriminator, losses, and training."""

import math

import numpy as np
import pytest
import torch

import lesionsynth.scmg as scmg_mod
from lesionsynth.data import PhantomParams, TumorClass, generate_phantom_set, rectangle_map
from lesionsynth.scmg import (
    AllSamplesEmpty,
    MaskDiscriminator,
    MaskGenerator,
    SCMGConfig,
    SpadeNorm,
    init_train_state,
    loss_adv_d,
    loss_adv_g,
    loss_cls,
    sample_masks,
    train_step,
)
from lesionsynth.vae import NonFiniteLoss


def rect32():
    return rectangle_map((32, 32), (8, 8, 12, 12)).astype(np.float32)


@pytest.fixture
def batch32():
    records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
    masks = torch.as_tensor(np.stack([r.mask for r in records]).astype(np.float32))
    classes = torch.as_tensor([int(r.tumor_class) for r in records])
    rects = torch.as_tensor(np.stack([rect32()] * 8))
    return masks, classes, rects


class TestSpadeNorm:
    def test_instance_norm_statistics(self):
        torch.manual_seed(0)
        norm = SpadeNorm(8)
        x = torch.randn(2, 8, 16, 16) * 3.0 + 1.5
        normed = norm.instance_norm(x)
        means = normed.mean(dim=(2, 3))
        stds = normed.var(dim=(2, 3), unbiased=False)
        assert means.abs().max() < 1e-4
        assert (stds - 1.0).abs().max() < 1e-3

    def test_zeroed_affine_networks_give_zero_output(self):
        torch.manual_seed(0)
        norm = SpadeNorm(4)
        torch.nn.init.zeros_(norm.gamma.weight)
        torch.nn.init.zeros_(norm.gamma.bias)
        torch.nn.init.zeros_(norm.beta.weight)
        torch.nn.init.zeros_(norm.beta.bias)
        x = torch.randn(1, 4, 8, 8)
        s = torch.as_tensor(rect32()[::4, ::4].copy())[None, None]
        assert torch.equal(norm(x, s), torch.zeros(1, 4, 8, 8))

    def test_constant_input_reduces_to_beta(self):
        torch.manual_seed(1)
        norm = SpadeNorm(4)
        x = torch.full((1, 4, 8, 8), 2.5)
        s = torch.as_tensor(rect32()[::4, ::4].copy())[None, None]
        out = norm(x, s)
        beta = norm.beta(norm.shared(s))
        assert (out - beta).abs().max() < 1e-2

    def test_hard_vs_soft_cast_rectangle_identical(self):
        torch.manual_seed(2)
        norm = SpadeNorm(4)
        x = torch.randn(1, 4, 32, 32)
        hard = torch.as_tensor(rect32())[None, None]
        soft = hard.to(torch.float32).clone()
        assert torch.equal(norm(x, hard.float()), norm(x, soft))

    def test_shape_mismatch_rejected(self):
        norm = SpadeNorm(4)
        with pytest.raises(ValueError):
            norm(torch.randn(1, 4, 8, 8), torch.zeros(1, 1, 16, 16))


class TestGenerator:
    def test_output_shape_and_open_range(self):
        torch.manual_seed(0)
        g = MaskGenerator(SCMGConfig(resolution=32))
        z = torch.randn(3, 128)
        out = g(z, torch.tensor([0, 1, 0]), torch.as_tensor(np.stack([rect32()] * 3)))
        assert out.shape == (3, 32, 32)
        assert (out > 0).all() and (out < 1).all()

    def test_deterministic_given_inputs(self):
        torch.manual_seed(0)
        g = MaskGenerator(SCMGConfig(resolution=32))
        z = torch.randn(1, 128)
        args = (z, torch.tensor([1]), torch.as_tensor(rect32())[None])
        a = g(*args)
        b = g(*args)
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()

    def test_resolution_must_fit_ladder(self):
        with pytest.raises(ValueError):
            MaskGenerator(SCMGConfig(resolution=48)).config.n_blocks

    def test_class_embedding_changes_output(self):
        torch.manual_seed(0)
        g = MaskGenerator(SCMGConfig(resolution=32))
        z = torch.randn(1, 128)
        r = torch.as_tensor(rect32())[None]
        with torch.no_grad():
            a = g(z, torch.tensor([0]), r)
            b = g(z, torch.tensor([1]), r)
        assert float((a - b).abs().max()) > 0.0


class TestDiscriminator:
    def test_output_scalars_in_open_interval(self):
        torch.manual_seed(0)
        d = MaskDiscriminator(32)
        out = d(torch.rand(4, 32, 32))
        for head in (out.d_adv, out.d_cls):
            assert head.shape == (4,)
            assert (head > 0).all() and (head < 1).all()
            assert (head >= 1e-7).all() and (head <= 1 - 1e-7).all()

    def test_constant_mask_spectrum_is_central_spike(self):
        m = torch.full((1, 1, 32, 32), 0.8)
        spec = MaskDiscriminator.frequency_input(m)[0, 0]
        center = spec[16, 16]
        others = spec.clone()
        others[16, 16] = 0.0
        assert float(center) > 0.0
        assert float(others.abs().max()) < 1e-5

    def test_spectrum_shift_invariance(self):
        torch.manual_seed(0)
        m = (torch.rand(1, 1, 32, 32) > 0.6).float()
        shifted = torch.roll(m, shifts=(5, 5), dims=(2, 3))
        a = MaskDiscriminator.frequency_input(m)
        b = MaskDiscriminator.frequency_input(shifted)
        assert float((a - b).abs().max()) < 1e-5


class TestLosses:
    def test_adv_d_values(self):
        assert float(loss_adv_d(0.5, 0.5)) == pytest.approx(math.log(2), abs=1e-4)
        assert float(loss_adv_d(1 - 1e-7, 1e-7)) == pytest.approx(0.0, abs=1e-4)
        assert float(loss_adv_d(0.9, 0.1)) == pytest.approx(0.10536, abs=1e-4)

    def test_adv_g_values(self):
        assert float(loss_adv_g(0.5)) == pytest.approx(math.log(2), abs=1e-4)
        assert float(loss_adv_g(1 - 1e-7)) == pytest.approx(0.0, abs=1e-4)
        assert float(loss_adv_g(math.exp(-1))) == pytest.approx(1.0, abs=1e-4)

    def test_cls_values(self):
        assert float(loss_cls(1, 1 - 1e-7)) == pytest.approx(0.0, abs=1e-4)
        assert float(loss_cls(0, 0.5)) == pytest.approx(math.log(2), abs=1e-4)
        assert float(loss_cls(1, 0.25)) == pytest.approx(math.log(4), abs=1e-4)

    def test_batch_reduction_is_mean(self):
        d_fake = torch.tensor([0.5, math.exp(-1)])
        expected = (math.log(2) + 1.0) / 2
        assert float(loss_adv_g(d_fake)) == pytest.approx(expected, abs=1e-6)


class TestTrainStep:
    def make_state(self, records, **kw):
        cfg = SCMGConfig(resolution=32, seed=0, **kw)
        return cfg, init_train_state(cfg, records)

    def test_losses_finite_after_one_step(self, batch32):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        cfg, state = self.make_state(records)
        rec = train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
        assert all(np.isfinite(v) for v in rec.values())

    def test_zero_learning_rates_leave_parameters_unchanged(self, batch32):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        cfg, state = self.make_state(records, lr_g=0.0, lr_d=0.0)
        before_g = {n: p.clone() for n, p in state.generator.named_parameters()}
        before_d = {n: p.clone() for n, p in state.discriminator.named_parameters()}
        train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
        for n, p in state.generator.named_parameters():
            assert torch.equal(p, before_g[n]), n
        for n, p in state.discriminator.named_parameters():
            assert torch.equal(p, before_d[n]), n

    def test_gradient_isolation_between_networks(self, batch32):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        cfg, state = self.make_state(records, lr_d=0.0)
        before_d = {n: p.clone() for n, p in state.discriminator.named_parameters()}
        train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
        # D optimizer had lr 0: its parameters must be untouched by the G update
        for n, p in state.discriminator.named_parameters():
            assert torch.equal(p, before_d[n]), n

        cfg2, state2 = self.make_state(records, lr_g=0.0)
        before_g = {n: p.clone() for n, p in state2.generator.named_parameters()}
        train_step(state2, masks, classes, rects, cfg2, torch.Generator().manual_seed(0))
        for n, p in state2.generator.named_parameters():
            assert torch.equal(p, before_g[n]), n

    def test_total_losses_are_exact_sums(self, batch32):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        cfg, state = self.make_state(records)
        rec = train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
        assert abs(rec["loss_g"] - (rec["loss_adv_g"] + rec["loss_cur"])) < 1e-6
        assert abs(rec["loss_d"] - (rec["loss_adv_d"] + rec["loss_cls"])) < 1e-6

    def test_curvature_disabled_records_zero(self, batch32):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        cfg, state = self.make_state(records, enable_curvature=False)
        rec = train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
        assert rec["loss_cur"] == 0.0
        assert rec["loss_g"] == rec["loss_adv_g"]

    def test_cls_target_switch(self, batch32):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        for mode in ("real", "generated", "both"):
            cfg, state = self.make_state(records, cls_target=mode)
            rec = train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
            assert np.isfinite(rec["loss_cls"])
        cfg, state = self.make_state(records, cls_target="bogus")
        with pytest.raises(ValueError):
            train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))

    def test_non_finite_loss_aborts_with_diagnostics(self, batch32, monkeypatch):
        masks, classes, rects = batch32
        records = generate_phantom_set(PhantomParams(resolution=32), 8, 0)
        cfg, state = self.make_state(records)
        monkeypatch.setattr(
            scmg_mod, "curvature_loss",
            lambda *a, **k: torch.tensor(float("nan"), requires_grad=True),
        )
        with pytest.raises(NonFiniteLoss) as err:
            train_step(state, masks, classes, rects, cfg, torch.Generator().manual_seed(0))
        assert "loss" in str(err.value)


class TestSampleMasks:
    def test_empty_count(self):
        g = MaskGenerator(SCMGConfig(resolution=32))
        assert sample_masks(g, 0, TumorClass.BENIGN, [rect32()]) == []

    def test_fixed_seed_reproducible(self):
        torch.manual_seed(0)
        g = MaskGenerator(SCMGConfig(resolution=32))
        a = sample_masks(g, 4, TumorClass.BENIGN, [rect32()], seed=9)
        b = sample_masks(g, 4, TumorClass.BENIGN, [rect32()], seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_masks_are_binary(self):
        torch.manual_seed(0)
        g = MaskGenerator(SCMGConfig(resolution=32))
        for m in sample_masks(g, 3, TumorClass.MALIGNANT, [rect32()], seed=0):
            assert set(np.unique(m)) <= {0, 1}

    def test_all_samples_empty_raises(self):
        torch.manual_seed(0)
        g = MaskGenerator(SCMGConfig(resolution=32))
        with torch.no_grad():
            g.head.bias.fill_(-50.0)  # sigmoid ~ 0 everywhere
        with pytest.raises(AllSamplesEmpty):
            sample_masks(g, 2, TumorClass.BENIGN, [rect32()], seed=0)


def test_training_run_is_bitwise_reproducible():
    from lesionsynth.scmg import train_scmg

    records = generate_phantom_set(PhantomParams(resolution=32), 12, 0)
    cfg = SCMGConfig(resolution=32, epochs=1, batch_size=6, seed=3)
    state_a, hist_a = train_scmg(records, cfg)
    state_b, hist_b = train_scmg(records, cfg)
    assert hist_a == hist_b
    for (n, pa), (_, pb) in zip(
        state_a.generator.named_parameters(), state_b.generator.named_parameters()
    ):
        assert torch.equal(pa, pb), n
