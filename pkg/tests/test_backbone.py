"""Frozen backbone: determinism, normalization, and alignment geometry."""

import itertools

import numpy as np
import pytest

from stylecat.backbone import (
    FrozenWeights,
    Vocab,
    embed_caption,
    embed_image,
    embed_prompt_prototypes,
    embed_text,
)
from stylecat.datagen import SyntheticSpec, generate_classification_dataset
from stylecat.train import TrainConfig, build_backbone


@pytest.fixture(scope="module")
def spec():
    return SyntheticSpec()


@pytest.fixture(scope="module")
def weights(spec):
    return build_backbone(spec, TrainConfig())


class TestVocab:
    def test_ids_dense_and_injective(self, weights):
        v = weights.vocab
        ids = [v.id_of(t) for t in v.tokens()]
        assert sorted(ids) == list(range(1, v.size))

    def test_unknown_maps_to_zero(self, weights):
        assert weights.vocab.id_of("zzz-not-a-word") == 0

    def test_case_folding(self):
        v = Vocab.from_texts(["A Cat sat"])
        assert v.id_of("CAT") == v.id_of("cat")


class TestEmbedText:
    def test_single_token_is_normalized_row(self, weights):
        tid = weights.vocab.id_of("cat")
        row = weights.token_embed[tid]
        out = embed_text([tid], weights).data
        assert np.allclose(out, row / np.linalg.norm(row), atol=1e-12)

    def test_determinism_across_builds(self, spec):
        a = build_backbone(spec, TrainConfig())
        b = build_backbone(spec, TrainConfig())
        assert a.checksum() == b.checksum()
        ids = a.vocab.encode("a sketch style cat")
        assert np.array_equal(embed_text(ids, a).data, embed_text(ids, b).data)

    def test_permutation_invariance(self, weights):
        ids = weights.vocab.encode("a sketch style cat")
        assert np.array_equal(embed_text(ids, weights).data, embed_text(ids[::-1], weights).data)

    def test_empty_tokens_error(self, weights):
        with pytest.raises(ValueError, match="empty"):
            embed_text([], weights)

    def test_unit_norm(self, weights):
        for text in ("a cat", "a sketch style dog", "tree"):
            f = embed_caption(text, weights).data
            assert abs(np.linalg.norm(f) - 1.0) < 1e-9


class TestEmbedImage:
    def test_zero_grid_returns_normalized_bias(self, weights):
        out = embed_image(np.zeros((8, 8, 3)), weights).data
        expected = weights.img_bias / np.linalg.norm(weights.img_bias)
        assert np.allclose(out, expected, atol=1e-12)

    def test_determinism(self, weights, spec):
        grid = generate_classification_dataset(spec)[0][0].grid
        assert np.array_equal(embed_image(grid, weights).data, embed_image(grid, weights).data)

    def test_out_of_range_rejected(self, weights):
        bad = np.full((8, 8, 3), 1.5)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            embed_image(bad, weights)

    def test_bad_shape_rejected(self, weights):
        with pytest.raises(ValueError, match="shape"):
            embed_image(np.zeros((4, 4, 3)), weights)

    def test_within_category_similarity_exceeds_across(self, weights, spec):
        _, test = generate_classification_dataset(spec)
        feats = np.stack([embed_image(s.grid, weights).data for s in test])
        cats = np.array([s.category for s in test])
        sims = feats @ feats.T
        mask = ~np.eye(len(test), dtype=bool)
        same = sims[(cats[:, None] == cats[None, :]) & mask].mean()
        across = sims[(cats[:, None] != cats[None, :]) & mask].mean()
        assert same > across


class TestPromptPrototypes:
    def test_one_unit_feature_per_class(self, weights):
        protos = embed_prompt_prototypes(["cat", "dog"], "a {}", weights)
        assert len(protos) == 2
        for p in protos:
            assert abs(np.linalg.norm(p.data) - 1.0) < 1e-9

    def test_distinct_classes_distinct_prototypes(self, weights, spec):
        protos = embed_prompt_prototypes(spec.category_names, "a {}", weights)
        for a, b in itertools.combinations(protos, 2):
            assert not np.allclose(a.data, b.data)

    def test_placeholder_free_template_collapses(self, weights):
        protos = embed_prompt_prototypes(["cat", "dog"], "a photo", weights)
        assert np.array_equal(protos[0].data, protos[1].data)


def test_alignment_own_caption_beats_mismatched(weights, spec):
    _, test = generate_classification_dataset(spec)
    wins = 0
    for s in test:
        f_i = embed_image(s.grid, weights).data
        own = embed_caption(s.caption, weights).data
        other_cap = spec.caption((s.style + 1) % spec.n_styles, (s.category + 1) % spec.n_categories)
        other = embed_caption(other_cap, weights).data
        wins += float(f_i @ own) > float(f_i @ other)
    assert wins / len(test) >= 0.95


def test_frozen_weights_unchanged_by_training(spec):
    from stylecat.train import train_encoders

    config = TrainConfig(epochs=2, shots=4)
    backbone = build_backbone(spec, config)
    before = backbone.checksum()
    train, _ = generate_classification_dataset(spec)
    train_encoders(config, spec, train, backbone=backbone)
    assert backbone.checksum() == before


def test_build_requires_capacity_for_codes():
    spec = SyntheticSpec()
    with pytest.raises(ValueError, match="too small"):
        build_backbone(spec, TrainConfig(dim=4))
