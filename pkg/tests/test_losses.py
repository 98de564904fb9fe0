"""Loss terms checked against naive reimplementations.

The multi-scale similarity gets a from-scratch numpy mirror (explicit sliding
windows, no torch ops); gradients of the composite objective are checked with
central finite differences; the hand-computable weighted totals for unit
sub-losses are pinned.
"""
import math

import numpy as np
import pytest
import torch

import refdemorph as rdm
from refdemorph.losses import (MS_SSIM_WEIGHTS, adversarial_generator_loss,
                              compose_losses, discriminator_loss,
                              feature_loss, id_loss, inverse_id_loss,
                              l2_loss, lpips_loss, ms_ssim, ms_ssim_loss,
                              total_loss)
from conftest import rand_image


@pytest.fixture(scope="module")
def bk():
    return rdm.build_toy_backends()


@pytest.fixture(scope="module")
def disc(bk):
    torch.manual_seed(0)
    return rdm.Discriminator(bk.cfg.image_size)


def batch(rng, n=2, size=16, scale=0.5):
    return torch.stack([rand_image(rng, size, scale) for _ in range(n)])


# ---------------------------------------------------------------- numpy mirror

def np_window(size, sigma):
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g = g / g.sum()
    return np.outer(g, g)


def np_filter_valid(img, k):
    s = k.shape[0]
    h, w = img.shape
    out = np.empty((h - s + 1, w - s + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = float((img[i:i + s, j:j + s] * k).sum())
    return out


def np_ssim_parts(x, y, win):
    """Per-image luminance and contrast-structure terms, averaged over
    channels and window positions.  x, y are (C, H, W) arrays."""
    c1, c2 = (0.01 * 2.0) ** 2, (0.03 * 2.0) ** 2
    lums, css = [], []
    for c in range(x.shape[0]):
        mu_x = np_filter_valid(x[c], win)
        mu_y = np_filter_valid(y[c], win)
        var_x = np_filter_valid(x[c] * x[c], win) - mu_x ** 2
        var_y = np_filter_valid(y[c] * y[c], win) - mu_y ** 2
        cov = np_filter_valid(x[c] * y[c], win) - mu_x * mu_y
        lums.append((2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1))
        css.append((2 * cov + c2) / (var_x + var_y + c2))
    return np.mean(lums), np.mean(css)


def np_pool2(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    x = x[:, :h2 * 2, :w2 * 2]
    return x.reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def np_ms_ssim(x, y, scales=3, window_size=3, sigma=1.0):
    win = np_window(window_size, sigma)
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for i in range(scales):
        lum, cs = np_ssim_parts(x, y, win)
        v = lum * cs if i == scales - 1 else cs
        value *= max(v, 0.0) ** weights[i]
        if i < scales - 1:
            x, y = np_pool2(x), np_pool2(y)
    return value


# ---------------------------------------------------------------- simple terms

class TestElementwiseTerms:
    def test_l2_matches_loop(self):
        rng = np.random.default_rng(0)
        a, b = batch(rng), batch(rng)
        total, n = 0.0, 0
        for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
            total += (x - y) ** 2
            n += 1
        assert float(l2_loss(a, b)) == pytest.approx(total / n, abs=1e-9)

    def test_l2_shape_check(self):
        with pytest.raises(rdm.ShapeMismatch):
            l2_loss(torch.zeros(2, 3, 16, 16), torch.zeros(2, 3, 8, 8))

    def test_feature_loss_matches_loop(self):
        rng = np.random.default_rng(1)
        a = torch.tensor(rng.standard_normal((2, 8, 8, 8)), dtype=rdm.DTYPE)
        b = torch.tensor(rng.standard_normal((2, 8, 8, 8)), dtype=rdm.DTYPE)
        want = float(((a - b) ** 2).double().mean())
        assert float(feature_loss(a, b)) == pytest.approx(want, abs=1e-12)

    def test_lpips_is_sum_of_stage_means(self, bk):
        rng = np.random.default_rng(2)
        a, b = batch(rng), batch(rng)
        stages_a = bk.perceptual.features(a)
        stages_b = bk.perceptual.features(b)
        want = sum(float(((fa - fb) ** 2).mean())
                   for fa, fb in zip(stages_a, stages_b))
        assert float(lpips_loss(a, b, bk.perceptual)) == \
            pytest.approx(want, abs=1e-12)

    def test_id_loss_from_embeddings(self, bk):
        rng = np.random.default_rng(3)
        a, b = batch(rng), batch(rng)
        sims = (bk.frs.embed(a) * bk.frs.embed(b)).sum(dim=1)
        want = float((1.0 - sims).mean())
        assert float(id_loss(a, b, bk.frs)) == pytest.approx(want, abs=1e-12)
        assert float(id_loss(a, a, bk.frs)) == pytest.approx(0.0, abs=1e-12)

    def test_inverse_id_hinge(self, bk):
        rng = np.random.default_rng(4)
        a, b = batch(rng), batch(rng)
        sims = (bk.frs.embed(a) * bk.frs.embed(b)).sum(dim=1)
        want = float(np.mean([max(float(s) - (-0.5), 0.0) for s in sims]))
        got = float(inverse_id_loss(a, b, -0.5, bk.frs))
        assert got == pytest.approx(want, abs=1e-12)
        # a margin above every similarity silences the hinge
        assert float(inverse_id_loss(a, b, 2.0, bk.frs)) == 0.0


# ---------------------------------------------------------------- ms-ssim

class TestMsSsim:
    def test_perfect_reconstruction_is_one(self):
        rng = np.random.default_rng(5)
        x = batch(rng)
        v = ms_ssim(x, x)
        assert torch.allclose(v, torch.ones(2, dtype=rdm.DTYPE), atol=1e-12)
        assert float(ms_ssim_loss(x, x)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_numpy_mirror(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            x = rand_image(rng, scale=0.8)
            y = torch.clamp(x + 0.15 * torch.tensor(
                rng.standard_normal(x.shape)), -1, 1)
            got = float(ms_ssim(x, y))
            want = np_ms_ssim(x.numpy(), y.numpy())
            assert got == pytest.approx(want, abs=1e-4), f"trial {trial}"

    def test_scale_count_changes_value(self):
        rng = np.random.default_rng(7)
        x = rand_image(rng, size=32)
        y = torch.clamp(x + 0.2, -1, 1)
        v2 = float(ms_ssim(x, y, scales=2))
        v3 = float(ms_ssim(x, y, scales=3))
        assert v2 != pytest.approx(v3, abs=1e-6)
        want = np_ms_ssim(x.numpy(), y.numpy(), scales=2)
        assert v2 == pytest.approx(want, abs=1e-4)

    def test_too_small_for_scales(self):
        x = torch.zeros(3, 16, 16, dtype=rdm.DTYPE)
        with pytest.raises(rdm.TooSmallForScales):
            ms_ssim(x, x, scales=4)  # needs 3 * 2**3 = 24 pixels

    def test_noise_lowers_similarity(self):
        rng = np.random.default_rng(8)
        x = rand_image(rng, scale=0.7)
        y = torch.clamp(x + 0.4 * torch.tensor(rng.standard_normal(x.shape)),
                        -1, 1)
        assert float(ms_ssim(x, y)) < 0.99


# ---------------------------------------------------------------- adversarial

class TestAdversarial:
    def test_generator_loss_is_softplus_of_negated_logit(self, bk, disc):
        rng = np.random.default_rng(9)
        x = batch(rng)
        logits = disc(x).detach()
        want = float(np.mean([math.log1p(math.exp(-float(v)))
                              for v in logits]))
        got = float(adversarial_generator_loss(x, disc).detach())
        assert got == pytest.approx(want, abs=1e-12)

    def test_discriminator_loss_r1_matches_finite_differences(self, bk, disc):
        rng = np.random.default_rng(10)
        real = batch(rng, n=1)
        fake = batch(rng, n=1)
        gamma = 10.0
        got = float(discriminator_loss(real, fake, gamma, disc).detach())

        # plain logistic part
        with torch.no_grad():
            d_real = float(disc(real))
            d_fake = float(disc(fake))
        base = math.log1p(math.exp(-d_real)) + math.log1p(math.exp(d_fake))
        # gradient of D at the real image, pixel by pixel
        eps = 1e-6
        sq = 0.0
        flat = real.clone().reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                up = flat.clone(); up[i] += eps
                dn = flat.clone(); dn[i] -= eps
                g = (float(disc(up.reshape(real.shape)))
                     - float(disc(dn.reshape(real.shape)))) / (2 * eps)
                sq += g * g
        want = base + 0.5 * gamma * sq
        assert got == pytest.approx(want, rel=1e-6)

    def test_discriminator_loss_skips_penalty_at_zero_gamma(self, bk, disc):
        rng = np.random.default_rng(11)
        real, fake = batch(rng, n=1), batch(rng, n=1)
        got = float(discriminator_loss(real, fake, 0.0, disc).detach())
        with torch.no_grad():
            want = math.log1p(math.exp(-float(disc(real)))) + \
                math.log1p(math.exp(float(disc(fake))))
        assert got == pytest.approx(want, abs=1e-12)

    def test_fake_branch_never_reaches_the_generator(self, bk, disc):
        rng = np.random.default_rng(12)
        fake = batch(rng, n=1).requires_grad_(True)
        loss = discriminator_loss(batch(rng, n=1), fake, 10.0, disc)
        loss.backward()
        assert fake.grad is None or float(fake.grad.abs().max()) == 0.0


# ---------------------------------------------------------------- composition

def unit_term_totals(w):
    im = w.lambda_l2 + w.lambda_lpips + w.lambda_ms_ssim + w.lambda_id
    total = im + w.lambda_inv_id + w.lambda_feat + w.lambda_adv
    return im, total


def test_unit_term_totals_are_pinned():
    im, total = unit_term_totals(rdm.LossWeights.morphed())
    assert im == pytest.approx(3.2, abs=1e-6)
    assert total == pytest.approx(3.91, abs=1e-6)
    im, total = unit_term_totals(rdm.LossWeights.bona_fide())
    assert im == pytest.approx(0.32, abs=1e-6)
    assert total == pytest.approx(0.34, abs=1e-6)


class TestCompose:
    def _inputs(self, bk, seed=13):
        rng = np.random.default_rng(seed)
        i_out = batch(rng)
        i_gt = batch(rng)
        i_ref = batch(rng)
        f_out = torch.tensor(rng.standard_normal(
            (2, bk.cfg.feat_channels, bk.cfg.feat_size, bk.cfg.feat_size)),
            dtype=rdm.DTYPE)
        return i_out, f_out, i_gt, i_ref

    def test_report_composition_identity(self, bk, disc):
        i_out, f_out, i_gt, i_ref = self._inputs(bk)
        w = rdm.LossWeights.morphed()
        total, rep = compose_losses(i_out, f_out, i_gt, i_ref, w, bk, disc)
        im = (w.lambda_l2 * rep.l2 + w.lambda_lpips * rep.lpips
              + w.lambda_ms_ssim * rep.ms_ssim + w.lambda_id * rep.id)
        assert rep.im_composite == pytest.approx(im, abs=1e-9)
        want_total = im + w.lambda_inv_id * rep.inv_id \
            + w.lambda_feat * rep.feat + w.lambda_adv * rep.adv
        assert rep.total == pytest.approx(want_total, abs=1e-9)
        assert float(total.detach()) == pytest.approx(rep.total, abs=1e-12)
        assert math.isnan(rep.disc)

    def test_zero_inverse_weight_skips_hinge(self, bk, disc):
        i_out, f_out, i_gt, i_ref = self._inputs(bk)
        _, rep = compose_losses(i_out, f_out, i_gt, i_ref,
                                rdm.LossWeights.bona_fide(), bk, disc)
        assert rep.inv_id == 0.0

    def test_each_term_matches_standalone_function(self, bk, disc):
        i_out, f_out, i_gt, i_ref = self._inputs(bk)
        w = rdm.LossWeights.morphed()
        _, rep = compose_losses(i_out, f_out, i_gt, i_ref, w, bk, disc)
        assert rep.l2 == pytest.approx(float(l2_loss(i_out, i_gt)), abs=1e-12)
        assert rep.ms_ssim == pytest.approx(
            float(ms_ssim_loss(i_out, i_gt)), abs=1e-12)
        assert rep.lpips == pytest.approx(
            float(lpips_loss(i_out, i_gt, bk.perceptual)), abs=1e-12)
        assert rep.id == pytest.approx(
            float(id_loss(i_out, i_gt, bk.frs)), abs=1e-12)
        assert rep.inv_id == pytest.approx(
            float(inverse_id_loss(i_out, i_ref, w.margin_m, bk.frs)),
            abs=1e-12)
        f_gt = bk.encoder.encode(i_gt)[1]
        assert rep.feat == pytest.approx(
            float(feature_loss(f_out, f_gt)), abs=1e-12)
        adv = adversarial_generator_loss(i_out, disc).detach()
        assert rep.adv == pytest.approx(float(adv), abs=1e-12)

    def test_total_gradient_matches_finite_differences(self, bk, disc):
        """Central differences on 20 random coordinates of the restored image."""
        i_out, f_out, i_gt, i_ref = self._inputs(bk, seed=14)
        w = rdm.LossWeights.morphed()

        def f(img):
            total, _ = compose_losses(img, f_out, i_gt, i_ref, w, bk, disc)
            return float(total.detach())

        probe = i_out.clone().requires_grad_(True)
        total, _ = compose_losses(probe, f_out, i_gt, i_ref, w, bk, disc)
        total.backward()
        grad = probe.grad.reshape(-1)

        rng = np.random.default_rng(15)
        eps = 1e-6
        flat = i_out.reshape(-1)
        checked = 0
        for i in rng.choice(flat.numel(), size=40, replace=False):
            up = flat.clone(); up[i] += eps
            dn = flat.clone(); dn[i] -= eps
            fd = (f(up.reshape(i_out.shape)) - f(dn.reshape(i_out.shape))) \
                / (2 * eps)
            g = float(grad[i])
            if abs(g) < 1e-4:      # skip nearly-flat coordinates
                continue
            assert fd == pytest.approx(g, rel=1e-3), f"coordinate {i}"
            checked += 1
            if checked == 20:
                break
        assert checked >= 10


class TestTotalLossEntry:
    def _pair(self, bk, with_gt=True):
        rng = np.random.default_rng(16)
        img = lambda: rdm.ImageTensor(rand_image(rng))
        return rdm.DocumentPair(
            pair_id="p0", document=img(), reference=img(),
            scenario=rdm.RestorationScenario.ACCOMPLICE,
            ground_truth=img() if with_gt else None, morph_method="blend")

    def test_missing_ground_truth(self, bk, disc):
        pair = self._pair(bk, with_gt=False)
        outputs = (rand_image(np.random.default_rng(17)),
                   torch.zeros(8, 8, 8, dtype=rdm.DTYPE))
        with pytest.raises(rdm.MissingGroundTruth):
            total_loss(pair, outputs, rdm.PassType.MORPHED_PASS,
                       rdm.LossWeights.morphed(), bk, disc)

    def test_bona_fide_pass_requires_zero_inverse_weight(self, bk, disc):
        pair = self._pair(bk)
        outputs = (rand_image(np.random.default_rng(18)),
                   torch.zeros(8, 8, 8, dtype=rdm.DTYPE))
        with pytest.raises(rdm.RangeError):
            total_loss(pair, outputs, rdm.PassType.BONA_FIDE_PASS,
                       rdm.LossWeights.morphed(), bk, disc)

    def test_reports_on_valid_pair(self, bk, disc):
        pair = self._pair(bk)
        outputs = (rand_image(np.random.default_rng(19)),
                   torch.zeros(8, 8, 8, dtype=rdm.DTYPE))
        rep = total_loss(pair, outputs, rdm.PassType.MORPHED_PASS,
                         rdm.LossWeights.morphed(), bk, disc)
        assert rep.total > 0.0
        assert math.isfinite(rep.total)
