import pytest
import torch

from localconcept import (
    BinaryMask,
    ConceptToken,
    CrossAttentionRecord,
    LatentImage,
    NoiseSample,
    make_schedule,
    make_toy_backend,
)
from localconcept.roi_matching import (
    DegenerateAttentionError,
    RegionToken,
    extract_source_mask,
    extract_target_mask,
    largest_component,
    learn_common_concept_token,
    learn_target_matcher,
)
from helpers import backend_with_token, iou, synthetic_sample

SCHED = make_schedule(50)


def planted_region_setup(seed=0, bias=8.0):
    """Toy backend with a strong attention bias on a known quadrant for the
    region token's prompt slot."""
    backend = make_toy_backend(seed=seed)
    token = ConceptToken("w*", backend.vocab_embedding("region").clone(), "region")
    region = RegionToken(token=token, trained_for="target_matching", object_class="chair")
    c = backend.encode_prompt(region.prompt(), [token])
    planted = torch.zeros(8, 8, dtype=torch.float64)
    planted[4:, 4:] = 1.0
    backend.plant_attention_bias(c.concept_slot("w*"), planted * bias)
    return backend, region, planted


def discovery_images(n=3, seed=77):
    g = torch.Generator().manual_seed(seed)
    images = []
    for _ in range(n):
        img = 0.02 + 0.06 * torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
        img[:, 2:6, 2:6] = 0.9 + 0.08 * torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
        images.append(img)
    return images


class TestTargetMatcher:
    def test_zero_steps_token_equals_concept_token(self):
        backend, vtok = backend_with_token(seed=1)
        backend.register_token(vtok)
        region = learn_target_matcher(backend, vtok, synthetic_sample(), SCHED, steps=0)
        assert torch.equal(region.token.embedding, vtok.embedding)
        assert region.token.init_source == "v*"

    def test_backend_frozen_during_matching(self):
        backend, vtok = backend_with_token(seed=2)
        backend.register_token(vtok)
        digest_before = backend.param_digest()
        v_before = vtok.embedding.detach().clone()
        learn_target_matcher(backend, vtok, synthetic_sample(), SCHED, steps=25, learning_rate=0.2)
        assert backend.param_digest() == digest_before
        assert torch.equal(vtok.embedding.detach(), v_before)

    def test_smoke_attention_loss_halves(self):
        backend, vtok = backend_with_token(seed=2)
        backend.register_token(vtok)
        region = learn_target_matcher(
            backend, vtok, synthetic_sample(), SCHED, steps=200, learning_rate=0.2, seed=5
        )
        assert region.loss_trace[-1] <= 0.5 * region.loss_trace[0]

    def test_deterministic(self):
        embeddings = []
        for _ in range(2):
            backend, vtok = backend_with_token(seed=3)
            backend.register_token(vtok)
            region = learn_target_matcher(
                backend, vtok, synthetic_sample(), SCHED, steps=10, learning_rate=0.1, seed=6
            )
            embeddings.append(region.token.embedding.detach())
        assert torch.equal(embeddings[0], embeddings[1])


class TestExtraction:
    @pytest.mark.parametrize("seed", range(5))
    def test_planted_region_recovered(self, seed):
        backend, region, planted = planted_region_setup(seed=seed)
        g = torch.Generator().manual_seed(100 + seed)
        image = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
        result = extract_target_mask(backend, region, image, SCHED)
        assert iou(result.mask.data, planted) >= 0.9
        assert result.confidence > 0

    def test_self_matching_sanity_floor(self):
        backend, vtok = backend_with_token(seed=2)
        backend.register_token(vtok)
        sample = synthetic_sample()
        region = learn_target_matcher(
            backend, vtok, sample, SCHED, steps=200, learning_rate=0.2, seed=5
        )
        result = extract_target_mask(backend, region, sample.image, SCHED)
        assert iou(result.mask.data, sample.mask.data) >= 0.5

    def test_mask_invariants(self):
        backend, region, _ = planted_region_setup(seed=1)
        image = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        result = extract_target_mask(backend, region, image, SCHED)
        values = set(result.mask.data.reshape(-1).tolist())
        assert values <= {0.0, 1.0}
        assert result.mask.area() > 0
        assert -1.0 <= result.confidence <= 1.0

    def test_deterministic_masks(self):
        masks = []
        for _ in range(2):
            backend, region, _ = planted_region_setup(seed=2)
            image = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
            masks.append(extract_target_mask(backend, region, image, SCHED, seed=7).mask.data)
        assert torch.equal(masks[0], masks[1])

    def test_degenerate_constant_map_rejected(self):
        class UniformAttentionBackend:
            """Single-token prompts make the softmax constant, so the averaged
            map carries no region signal."""

            latent_shape = (3, 8, 8)

            def encode_image(self, image):
                return LatentImage(image.clone())

            def encode_prompt(self, prompt, tokens):
                be, _ = backend_with_token(seed=0)
                return be.encode_prompt(f"[{tokens[0].name}]", tokens)

            def predict_noise(self, x_t, c, t):
                maps = torch.ones(1, 1, 8, 8, dtype=torch.float64)
                record = CrossAttentionRecord(maps=[maps], layer_tags=["up.cross.0"])
                return NoiseSample(torch.zeros_like(x_t.data)), record

        token = ConceptToken("w*", torch.zeros(8, dtype=torch.float64), "x")
        region = RegionToken(token=token, trained_for="target_matching", object_class="chair")
        with pytest.raises(DegenerateAttentionError):
            extract_target_mask(
                UniformAttentionBackend(),
                region,
                torch.rand(3, 8, 8, dtype=torch.float64),
                SCHED,
            )

    def test_probe_outside_schedule_rejected(self):
        backend, region, _ = planted_region_setup(seed=3)
        image = torch.rand(3, 8, 8, dtype=torch.float64)
        with pytest.raises(ValueError):
            extract_target_mask(backend, region, image, SCHED, probe_timesteps=(0,))


class TestCommonConceptDiscovery:
    def test_requires_two_images(self):
        backend = make_toy_backend(seed=4)
        with pytest.raises(ValueError):
            learn_common_concept_token(backend, discovery_images(1), "mug", SCHED, steps=5)

    def test_smoke_diffusion_loss_halves(self):
        backend = make_toy_backend(seed=4)
        region = learn_common_concept_token(
            backend, discovery_images(), "mug", SCHED, steps=200, learning_rate=0.02, seed=9
        )
        assert region.loss_trace[-1] <= 0.5 * region.loss_trace[0]
        assert region.trained_for == "source_discovery"

    def test_updates_kv_and_token_only(self):
        backend = make_toy_backend(seed=5)
        frozen = backend.frozen_param_names()
        digest_before = backend.param_digest(frozen)
        learn_common_concept_token(
            backend, discovery_images(), "mug", SCHED, steps=10, learning_rate=0.02
        )
        assert backend.param_digest(frozen) == digest_before

    def test_deterministic(self):
        embeddings = []
        for _ in range(2):
            backend = make_toy_backend(seed=6)
            region = learn_common_concept_token(
                backend, discovery_images(), "mug", SCHED, steps=10, learning_rate=0.02, seed=11
            )
            embeddings.append(region.token.embedding.detach())
        assert torch.equal(embeddings[0], embeddings[1])

    def test_extract_source_mask_planted(self):
        backend = make_toy_backend(seed=7)
        token = ConceptToken("w*", backend.vocab_embedding("style").clone(), "style")
        region = RegionToken(token=token, trained_for="source_discovery", object_class="mug")
        c = backend.encode_prompt(region.prompt(), [token])
        planted = torch.zeros(8, 8, dtype=torch.float64)
        planted[4:, 4:] = 1.0
        backend.plant_attention_bias(c.concept_slot("w*"), planted * 8.0)
        image = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
        result = extract_source_mask(backend, region, image, SCHED)
        assert iou(result.mask.data, planted) >= 0.9

    def test_pipeline_into_concept_learning(self):
        from localconcept.learning import SourceSample, TrainingConfig, train_concept

        images = discovery_images()
        backend = make_toy_backend(seed=8)
        region = learn_common_concept_token(
            backend, images, "mug", SCHED, steps=60, learning_rate=0.02, seed=13
        )
        result = extract_source_mask(backend, region, images[0], SCHED)
        sample = SourceSample(image=images[0], mask=result.mask, object_class="mug")
        fresh = make_toy_backend(seed=9)
        ckpt = train_concept(
            fresh, sample, TrainingConfig(steps=5, learning_rate=5e-3, seed=14), SCHED
        )
        assert len(ckpt.loss_trace) == 5


class TestLargestComponent:
    def test_keeps_bigger_blob(self):
        data = torch.zeros(6, 6, dtype=torch.float64)
        data[0:3, 0:3] = 1.0  # 9 px
        data[5, 5] = 1.0  # 1 px speckle
        out = largest_component(BinaryMask(data))
        assert out.area() == 9
        assert float(out.data[5, 5]) == 0.0

    def test_diagonal_not_connected(self):
        data = torch.zeros(4, 4, dtype=torch.float64)
        data[0, 0] = 1.0
        data[1, 1] = 1.0
        data[2, 2] = 1.0
        out = largest_component(BinaryMask(data))
        assert out.area() == 1

    def test_empty_mask_stays_empty(self):
        out = largest_component(BinaryMask(torch.zeros(3, 3, dtype=torch.float64)))
        assert out.area() == 0
