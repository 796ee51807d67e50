"""Qualitative retrieval over embedded features.

The index stores L2-normalized embedded features per image; composition,
attribute, and object; extracted with self-attention branches from cached
tokens. Queries are exact nearest neighbor by cosine; ties break by id so
rankings are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .embedding import _normalize


@dataclass
class FeatureIndex:
    image_ids: list[str]
    comp_features: np.ndarray  # (N, D_w), unit rows
    attr_features: np.ndarray
    obj_features: np.ndarray
    attr_labels: np.ndarray
    obj_labels: np.ndarray


def build_index(model, store, records, batch_size: int = 256) -> FeatureIndex:
    ids, comps, attrs, objs = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            tokens = torch.as_tensor(np.stack([store.get(r.id) for r in chunk]))
            v_a, v_o, v_c = model.inference_features(tokens)
            comps.append(_normalize(model.pi_c(v_c), "composition feature").numpy())
            attrs.append(_normalize(model.pi_a(v_a), "attribute feature").numpy())
            objs.append(_normalize(model.pi_o(v_o), "object feature").numpy())
            ids.extend(r.id for r in chunk)
    return FeatureIndex(
        image_ids=ids,
        comp_features=np.concatenate(comps),
        attr_features=np.concatenate(attrs),
        obj_features=np.concatenate(objs),
        attr_labels=np.array([r.attribute_label for r in records]),
        obj_labels=np.array([r.object_label for r in records]),
    )


def _top_k(similarities: np.ndarray, ids: list[str], k: int):
    if k > len(ids):
        k = len(ids)  # truncated with notice in the CLI report
    order = sorted(range(len(ids)), key=lambda i: (-similarities[i], ids[i]))
    return [(ids[i], float(similarities[i])) for i in order[:k]]


def _text_embedding(model, pair) -> np.ndarray:
    with torch.no_grad():
        tables = model.tables
        vec = model.psi(tables.attr_vectors[pair[0]], tables.obj_vectors[pair[1]])
        return _normalize(vec, "text embedding").numpy()


def text_to_image(pair, k: int, index: FeatureIndex, model):
    """Top-k image ids whose composition features match the composed text."""
    query = _text_embedding(model, pair)
    return _top_k(index.comp_features @ query, index.image_ids, k)


def image_to_text(image_feature: np.ndarray, k: int, candidates, model, vocab):
    """Top-k candidate compositions for an embedded composition feature."""
    with torch.no_grad():
        tables = model.tables
        pair_idx = torch.as_tensor(candidates, dtype=torch.long)
        protos = model.psi(tables.attr_vectors[pair_idx[:, 0]],
                           tables.obj_vectors[pair_idx[:, 1]])
        protos = _normalize(protos, "text embedding").numpy()
    sims = protos @ image_feature
    names = [vocab.pair_name(p) for p in candidates]
    order = sorted(range(len(candidates)),
                   key=lambda i: (-sims[i], names[i]))
    return [(candidates[i], float(sims[i])) for i in order[:min(k, len(candidates))]]


def concept_retrieve(query_feature: np.ndarray, concept: str, k: int,
                     index: FeatureIndex):
    """Nearest images in the attribute or object feature space."""
    if concept == "attribute":
        feats = index.attr_features
    elif concept == "object":
        feats = index.obj_features
    else:
        raise ValueError(f"concept must be attribute or object, got '{concept}'")
    return _top_k(feats @ query_feature, index.image_ids, k)


def image_features(model, tokens: torch.Tensor):
    """(comp, attr, obj) unit features for one image's tokens."""
    with torch.no_grad():
        v_a, v_o, v_c = model.inference_features(tokens.unsqueeze(0))
        return (_normalize(model.pi_c(v_c), "composition feature")[0].numpy(),
                _normalize(model.pi_a(v_a), "attribute feature")[0].numpy(),
                _normalize(model.pi_o(v_o), "object feature")[0].numpy())


def precision_at_k(results, labels_by_id: dict[str, int], want: int) -> float:
    if not results:
        return 0.0
    return sum(labels_by_id[rid] == want for rid, _ in results) / len(results)


def write_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def contact_sheet(path, image_paths, columns: int = 5, cell: int = 64) -> None:
    """Grid of thumbnails for eyeballing retrieval results."""
    from PIL import Image

    rows = (len(image_paths) + columns - 1) // columns
    sheet = Image.new("RGB", (columns * cell, max(1, rows) * cell), (20, 20, 20))
    for i, p in enumerate(image_paths):
        with Image.open(p) as img:
            thumb = img.convert("RGB").resize((cell - 4, cell - 4), Image.NEAREST)
        sheet.paste(thumb, ((i % columns) * cell + 2, (i // columns) * cell + 2))
    sheet.save(path)
