"""Concept vocabularies, word-vector prototypes, embedders, and the losses.

Attribute and object prototypes are learnable rows of an embedding table,
optionally warm-started from a word-vector file. Composition prototypes are
rebuilt from the current attribute/object vectors by a linear composer on
every forward pass, so the composer trains jointly with the tables. Class
probabilities are temperature-scaled softmax over cosine similarities of
L2-normalized embedded features and prototypes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class DegenerateFeature(ValueError):
    """A feature or prototype had (numerically) zero norm."""


@dataclass
class ConceptVocabulary:
    """Ordered attribute and object name lists; pairs index as (attr, obj)."""

    attributes: list[str]
    objects: list[str]
    attr_index: dict[str, int] = field(init=False)
    obj_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("duplicate attribute names")
        if len(set(self.objects)) != len(self.objects):
            raise ValueError("duplicate object names")
        self.attr_index = {a: i for i, a in enumerate(self.attributes)}
        self.obj_index = {o: i for i, o in enumerate(self.objects)}

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def all_pairs(self) -> list[tuple[int, int]]:
        return [(a, o) for a in range(len(self.attributes))
                for o in range(len(self.objects))]

    def pair_name(self, pair: tuple[int, int]) -> str:
        return f"{self.attributes[pair[0]]} {self.objects[pair[1]]}"


def load_word_vectors(path) -> tuple[dict[str, np.ndarray], int]:
    """Whitespace-separated "token v1 ... vD" lines."""
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split()
            if len(parts) < 2:
                continue
            vec = np.asarray([float(x) for x in parts[1:]], dtype=np.float32)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"inconsistent vector width in {path}")
            vectors[parts[0]] = vec
    if dim is None:
        raise ValueError(f"no vectors found in {path}")
    return vectors, dim


def _prototype_from_words(name: str, vectors: dict[str, np.ndarray],
                          dim: int, rng: np.random.Generator,
                          sigma: float = 0.1) -> np.ndarray:
    # Multi-word names average their constituents; unknown words fall back
    # to a seeded Gaussian.
    words = name.replace(".", " ").replace("_", " ").lower().split()
    found = [vectors[w] for w in words if w in vectors]
    missing = [w for w in words if w not in vectors]
    if missing:
        log.warning("no word vector for %s (in '%s'); using seeded Gaussian",
                    missing, name)
        found.extend(rng.normal(0.0, sigma, size=dim).astype(np.float32)
                     for _ in missing)
    if len(found) > 1:
        log.warning("averaging %d word vectors for multi-word name '%s'",
                    len(found), name)
    return np.mean(found, axis=0)


class EmbeddingTable(nn.Module):
    """Learnable attribute and object prototype vectors."""

    def __init__(self, vocab: ConceptVocabulary, word_dim: int, seed: int = 0,
                 word_vector_path=None, trainable: bool = True):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 71]))
        if word_vector_path is not None:
            vectors, dim = load_word_vectors(word_vector_path)
            if dim != word_dim:
                raise ValueError(
                    f"word vectors are {dim}-d but the table wants {word_dim}-d")
            attr = np.stack([_prototype_from_words(a, vectors, dim, rng)
                             for a in vocab.attributes])
            obj = np.stack([_prototype_from_words(o, vectors, dim, rng)
                            for o in vocab.objects])
        else:
            attr = rng.normal(0.0, 0.1, size=(vocab.num_attributes, word_dim))
            obj = rng.normal(0.0, 0.1, size=(vocab.num_objects, word_dim))
        self.attr_vectors = nn.Parameter(torch.as_tensor(attr, dtype=torch.float32),
                                         requires_grad=trainable)
        self.obj_vectors = nn.Parameter(torch.as_tensor(obj, dtype=torch.float32),
                                        requires_grad=trainable)


class Composer(nn.Module):
    """Linear composition of an attribute vector and an object vector."""

    def __init__(self, word_dim: int):
        super().__init__()
        self.linear = nn.Linear(2 * word_dim, word_dim)

    def forward(self, attr_vec: torch.Tensor, obj_vec: torch.Tensor) -> torch.Tensor:
        if attr_vec.shape[-1] != obj_vec.shape[-1]:
            raise ValueError("attribute and object vector widths differ")
        return self.linear(torch.cat([attr_vec, obj_vec], dim=-1))


def compose(attr_vec, obj_vec, composer: Composer):
    return composer(attr_vec, obj_vec)


class Embedder(nn.Module):
    """Two-layer perceptron from feature width to word width."""

    def __init__(self, feature_dim: int, word_dim: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(feature_dim, word_dim),
        )

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.net(feature)


def _normalize(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm < 1e-12).any():
        raise DegenerateFeature(f"zero-norm {what}")
    return x / norm


def cosine_logits(feature: torch.Tensor, embedder: Embedder,
                  prototypes: torch.Tensor) -> torch.Tensor:
    """Cosines between the embedded feature and each prototype (pre-softmax)."""
    if prototypes.shape[0] == 0:
        raise ValueError("empty prototype set")
    emb = _normalize(embedder(feature), "embedded feature")
    protos = _normalize(prototypes, "prototype")
    return emb @ protos.T


def class_probabilities(feature: torch.Tensor, embedder: Embedder,
                        prototypes: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return torch.softmax(cosine_logits(feature, embedder, prototypes) / tau, dim=-1)


def cross_entropy(probabilities: torch.Tensor, label: int) -> torch.Tensor:
    """-log p[label], rebuilt through log-softmax so a zero never hits log."""
    probabilities = torch.as_tensor(probabilities)
    tiny = torch.finfo(probabilities.dtype).tiny
    log_p = F.log_softmax(torch.log(probabilities.clamp_min(tiny)), dim=-1)
    return -log_p[..., label]


def cross_entropy_from_cosines(cosines: torch.Tensor, labels: torch.Tensor,
                               tau: float) -> torch.Tensor:
    """Batched stable cross-entropy straight from cosine logits; mean over batch."""
    return F.cross_entropy(cosines / tau, labels)


def total_ce_loss(v_a, v_a2, v_o, v_o2, v_c, labels, tables: EmbeddingTable,
                  embedders, composer: Composer,
                  comp_pairs: list[tuple[int, int]], tau: float) -> torch.Tensor:
    """Five cross-entropies: attribute x2, object x2, composition.

    Features are (B, D) (or (D,) for a single example); `labels` is the
    (attr, obj, comp) triple of index tensors; `embedders` the (pi_a, pi_o,
    pi_c) triple. Composition prototypes are composed fresh from the current
    tables over `comp_pairs`, and the composition label indexes that list.
    """
    parts = components_ce_loss(v_a, v_a2, v_o, v_o2, v_c, labels, tables,
                               embedders, composer, comp_pairs, tau)
    return sum(parts.values())


def components_ce_loss(v_a, v_a2, v_o, v_o2, v_c, labels, tables, embedders,
                       composer, comp_pairs, tau):
    pi_a, pi_o, pi_c = embedders
    attr_labels, obj_labels, comp_labels = (torch.atleast_1d(torch.as_tensor(l))
                                            for l in labels)
    feats = [torch.atleast_2d(v) for v in (v_a, v_a2, v_o, v_o2, v_c)]
    pair_idx = torch.as_tensor(comp_pairs, dtype=torch.long)
    comp_protos = composer(tables.attr_vectors[pair_idx[:, 0]],
                           tables.obj_vectors[pair_idx[:, 1]])
    return {
        "loss_attr": cross_entropy_from_cosines(
            cosine_logits(feats[0], pi_a, tables.attr_vectors), attr_labels, tau),
        "loss_attr2": cross_entropy_from_cosines(
            cosine_logits(feats[1], pi_a, tables.attr_vectors), attr_labels, tau),
        "loss_obj": cross_entropy_from_cosines(
            cosine_logits(feats[2], pi_o, tables.obj_vectors), obj_labels, tau),
        "loss_obj2": cross_entropy_from_cosines(
            cosine_logits(feats[3], pi_o, tables.obj_vectors), obj_labels, tau),
        "loss_comp": cross_entropy_from_cosines(
            cosine_logits(feats[4], pi_c, comp_protos), comp_labels, tau),
    }
