import pytest
import torch

from ade.embedding import ConceptVocabulary
from ade.model import CompositionModel, ModelConfig


@pytest.fixture
def vocab():
    return ConceptVocabulary(["red", "green"], ["circle", "square"])


def test_seeded_init_is_reproducible(vocab):
    a = CompositionModel(ModelConfig(token_dim=16, word_dim=8, num_heads=2),
                         vocab, seed=3)
    b = CompositionModel(ModelConfig(token_dim=16, word_dim=8, num_heads=2),
                         vocab, seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_none_mode_has_no_attention_modules(vocab):
    model = CompositionModel(ModelConfig(token_dim=16, word_dim=8,
                                         num_heads=2, attention_mode="none"),
                             vocab, seed=0)
    assert not hasattr(model, "attn_a")
    tokens = torch.randn(3, 5, 16)
    v_a, v_o, v_c = model.inference_features(tokens)
    assert torch.equal(v_a, tokens[:, 0])
    assert torch.equal(v_c, tokens[:, 0])


def test_class_token_features_ignore_patch_order(vocab):
    # index 0 is the class token for every branch; shuffling the patch rows
    # must not change any class-token feature
    model = CompositionModel(ModelConfig(token_dim=16, word_dim=8,
                                         num_heads=2), vocab, seed=1)
    model.eval()
    tokens = torch.randn(6, 16)
    perm = torch.cat([torch.zeros(1, dtype=torch.long),
                      1 + torch.randperm(5)])
    base = model.inference_features(tokens.unsqueeze(0))
    shuffled = model.inference_features(tokens[perm].unsqueeze(0))
    for b, s in zip(base, shuffled):
        assert torch.allclose(b, s, atol=1e-5)


def test_inference_features_come_from_row_zero(vocab):
    model = CompositionModel(ModelConfig(token_dim=16, word_dim=8,
                                         num_heads=2), vocab, seed=2)
    model.eval()
    tokens = torch.randn(1, 5, 16)
    v_a, v_o, v_c = model.inference_features(tokens)
    res = model.attn_c.self_attend(tokens)
    assert torch.equal(v_c, res.output[:, 0])
