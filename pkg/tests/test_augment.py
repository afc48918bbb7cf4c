import numpy as np
import pytest
import torch

from localconcept import AugmentationConfig, BinaryMask, ConceptToken, augment
from localconcept.augment import color_jitter, grayscale, hflip, zoom
from localconcept.learning import PromptTemplateError, build_prompt, build_roi_prompt
from helpers import synthetic_sample


def token():
    return ConceptToken("v*", torch.zeros(4, dtype=torch.float64), "style")


class TestGeometricOps:
    def test_hflip_involution(self):
        sample = synthetic_sample()
        img1, m1 = hflip(sample.image, sample.mask)
        img2, m2 = hflip(img1, m1)
        assert torch.equal(img2, sample.image)
        assert torch.equal(m2.data, sample.mask.data)

    def test_hflip_moves_mask_with_image(self):
        sample = synthetic_sample()
        img1, m1 = hflip(sample.image, sample.mask)
        assert torch.equal(m1.data, sample.mask.data.flip(-1))

    def test_zoom_identity(self):
        sample = synthetic_sample()
        img, mask = zoom(sample.image, sample.mask, 1.0)
        assert torch.equal(img, sample.image)
        assert torch.equal(mask.data, sample.mask.data)

    @pytest.mark.parametrize("scale", [0.6, 0.8, 1.25, 1.4])
    def test_zoom_keeps_mask_binary_and_shapes(self, scale):
        sample = synthetic_sample()
        img, mask = zoom(sample.image, sample.mask, scale)
        assert img.shape == sample.image.shape
        assert mask.data.shape == sample.mask.data.shape
        assert set(mask.data.reshape(-1).tolist()) <= {0.0, 1.0}

    def test_zoom_out_pads_mask_with_zeros(self):
        mask = BinaryMask(torch.ones(8, 8, dtype=torch.float64))
        img = torch.rand(3, 8, 8, dtype=torch.float64)
        _, zoomed = zoom(img, mask, 0.5)
        assert zoomed.data[0, 0] == 0.0
        assert zoomed.data[4, 4] == 1.0

    def test_zoom_rejects_nonpositive(self):
        sample = synthetic_sample()
        with pytest.raises(ValueError):
            zoom(sample.image, sample.mask, 0.0)


class TestPhotometricOps:
    def test_grayscale_equalizes_channels(self):
        img = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        gray = grayscale(img)
        assert torch.equal(gray[0], gray[1])
        assert torch.equal(gray[1], gray[2])

    def test_jitter_stays_in_range(self):
        img = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        out = color_jitter(img, (1.2, 0.8, 1.1))
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_jitter_identity_factors(self):
        img = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        assert torch.allclose(color_jitter(img, (1.0, 1.0, 1.0)), img)


class TestAugment:
    def test_disabled_config_is_identity(self):
        sample = synthetic_sample()
        out, tag = augment(sample, np.random.default_rng(0), AugmentationConfig.disabled())
        assert tag is None
        assert torch.equal(out.image, sample.image)
        assert torch.equal(out.mask.data, sample.mask.data)

    def test_deterministic_per_rng_seed(self):
        sample = synthetic_sample()
        cfg = AugmentationConfig()
        a, tag_a = augment(sample, np.random.default_rng(5), cfg)
        b, tag_b = augment(sample, np.random.default_rng(5), cfg)
        assert tag_a == tag_b
        assert torch.equal(a.image, b.image)
        assert torch.equal(a.mask.data, b.mask.data)

    def test_zoom_tag_reported(self):
        sample = synthetic_sample()
        cfg = AugmentationConfig(p_hflip=0.0, p_grayscale=0.0, p_jitter=0.0, p_zoom=1.0, zoom_range=(0.5, 0.5))
        _, tag = augment(sample, np.random.default_rng(1), cfg)
        assert tag == "zoomed-out"
        cfg_in = AugmentationConfig(p_hflip=0.0, p_grayscale=0.0, p_jitter=0.0, p_zoom=1.0, zoom_range=(1.3, 1.3))
        _, tag = augment(sample, np.random.default_rng(1), cfg_in)
        assert tag == "zoomed-in"

    def test_photometric_only_leaves_mask(self):
        sample = synthetic_sample()
        cfg = AugmentationConfig(p_hflip=0.0, p_zoom=0.0, p_grayscale=1.0, p_jitter=1.0)
        out, _ = augment(sample, np.random.default_rng(2), cfg)
        assert torch.equal(out.mask.data, sample.mask.data)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            AugmentationConfig(p_hflip=1.5)


class TestPromptBuilding:
    def test_object_substitution(self):
        prompt = build_prompt("A {OBJECT} with [v*] style", "chair", token())
        assert prompt == "A chair with [v*] style"

    def test_zoom_suffix(self):
        prompt = build_prompt("A {OBJECT} with [v*] style", "chair", token(), "zoomed-out")
        assert prompt == "A chair with [v*] style, zoomed-out"

    def test_roi_prompt(self):
        assert build_roi_prompt(token()) == "A photo of [v*]"

    def test_missing_object_placeholder(self):
        with pytest.raises(PromptTemplateError):
            build_prompt("A chair with [v*] style", "chair", token())

    def test_missing_token_placeholder(self):
        with pytest.raises(PromptTemplateError):
            build_prompt("A {OBJECT} in a room", "chair", token())
