"""Test-time scoring: three self-attention branches, blended prediction.

Every test image runs through all three branches with query = key = its own
tokens, yielding composition, attribute, and object distributions. The
blended score per candidate (a, o) is p(c) + beta * p(a) * p(o); beta is
either fixed or grid-searched on the validation split by full-protocol AUC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .embedding import cosine_logits

BETA_GRID = [round(0.1 * k, 1) for k in range(11)]


@dataclass
class PredictionScores:
    candidates: list[tuple[int, int]]
    p_comp: np.ndarray       # (N_cand,)
    p_attr: np.ndarray       # (|A|,)
    p_obj: np.ndarray        # (|O|,)
    blended: np.ndarray      # (N_cand,)
    comp_cosines: np.ndarray
    beta: float

    @property
    def pred_index(self) -> int:
        return int(np.argmax(self.blended))  # argmax takes the lowest index


@dataclass
class ScoreTable:
    """Per-image component and blended scores over one candidate set."""

    candidates: list[tuple[int, int]]
    unseen_candidate: np.ndarray   # (N_cand,) bool
    blended: np.ndarray            # (N_img, N_cand)
    p_comp: np.ndarray
    p_attr: np.ndarray             # (N_img, |A|)
    p_obj: np.ndarray
    truth: np.ndarray              # (N_img,) candidate index
    attr_labels: np.ndarray
    obj_labels: np.ndarray
    image_ids: list[str]
    beta: float


def component_scores(model, tokens: torch.Tensor, candidates):
    """Softmax distributions (and raw composition cosines) for a batch."""
    with torch.no_grad():
        v_a, v_o, v_c = model.inference_features(tokens)
        tables = model.tables
        pair_idx = torch.as_tensor(candidates, dtype=torch.long)
        protos = model.psi(tables.attr_vectors[pair_idx[:, 0]],
                           tables.obj_vectors[pair_idx[:, 1]])
        tau = model.config.tau
        cos_c = cosine_logits(torch.atleast_2d(v_c), model.pi_c, protos)
        cos_a = cosine_logits(torch.atleast_2d(v_a), model.pi_a, tables.attr_vectors)
        cos_o = cosine_logits(torch.atleast_2d(v_o), model.pi_o, tables.obj_vectors)
        p_c = torch.softmax(cos_c / tau, dim=-1)
        p_a = torch.softmax(cos_a / tau, dim=-1)
        p_o = torch.softmax(cos_o / tau, dim=-1)
    return (p_c.numpy(), p_a.numpy(), p_o.numpy(), cos_c.numpy())


def blend_scores(p_comp, p_attr, p_obj, candidates, beta: float) -> np.ndarray:
    """p(c) + beta * p(a(c)) * p(o(c)) per candidate, batched."""
    attr_idx = np.array([a for a, _ in candidates])
    obj_idx = np.array([o for _, o in candidates])
    return p_comp + beta * p_attr[:, attr_idx] * p_obj[:, obj_idx]


def predict(tokens: torch.Tensor, model, candidates, beta: float) -> PredictionScores:
    """Blended scores for a single image over the given candidate set."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    p_c, p_a, p_o, cos_c = component_scores(model, tokens.unsqueeze(0)
                                            if tokens.dim() == 2 else tokens,
                                            candidates)
    blended = blend_scores(p_c, p_a, p_o, candidates, beta)
    return PredictionScores(candidates=list(candidates), p_comp=p_c[0],
                            p_attr=p_a[0], p_obj=p_o[0], blended=blended[0],
                            comp_cosines=cos_c[0], beta=beta)


def score_table_for_records(model, store, records, vocab, split, world: str,
                            eval_split: str, beta: float,
                            batch_size: int = 256) -> ScoreTable:
    candidates = split.candidates(vocab, world, split=eval_split)
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    cand_index = {p: i for i, p in enumerate(candidates)}
    chunks = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        tokens = torch.as_tensor(np.stack([store.get(r.id) for r in chunk]))
        chunks.append(component_scores(model, tokens, candidates))
    p_c = np.concatenate([c[0] for c in chunks])
    p_a = np.concatenate([c[1] for c in chunks])
    p_o = np.concatenate([c[2] for c in chunks])
    truth = np.array([cand_index[(r.attribute_label, r.object_label)]
                      for r in records])
    return ScoreTable(
        candidates=candidates,
        unseen_candidate=split.unseen_mask(candidates),
        blended=blend_scores(p_c, p_a, p_o, candidates, beta),
        p_comp=p_c, p_attr=p_a, p_obj=p_o, truth=truth,
        attr_labels=np.array([r.attribute_label for r in records]),
        obj_labels=np.array([r.object_label for r in records]),
        image_ids=[r.id for r in records], beta=beta)


def reblend(table: ScoreTable, beta: float) -> ScoreTable:
    return ScoreTable(
        candidates=table.candidates, unseen_candidate=table.unseen_candidate,
        blended=blend_scores(table.p_comp, table.p_attr, table.p_obj,
                             table.candidates, beta),
        p_comp=table.p_comp, p_attr=table.p_attr, p_obj=table.p_obj,
        truth=table.truth, attr_labels=table.attr_labels,
        obj_labels=table.obj_labels, image_ids=table.image_ids, beta=beta)


def select_beta(model, store, val_records, vocab, split, world: str = "closed"):
    """AUC-maximizing beta over the 11-point grid; ties go to the lowest."""
    from .evaluation import build_curve, calibration_gammas, summarize

    base = score_table_for_records(model, store, val_records, vocab, split,
                                   world=world, eval_split="val", beta=0.0)
    results = []
    for beta in BETA_GRID:
        table = reblend(base, beta)
        curve = build_curve(table, calibration_gammas(table))
        results.append((beta, summarize(curve, table).auc))
    best_beta, _ = max(results, key=lambda pair: (pair[1], -pair[0]))
    return best_beta, results


def write_score_dump(path, table: ScoreTable) -> None:
    """JSON lines, one object per test image, consumed by the evaluation
    module and third parties."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"candidates": [list(p) for p in table.candidates],
                  "unseen_candidate": table.unseen_candidate.tolist(),
                  "beta": table.beta}
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for i, rid in enumerate(table.image_ids):
            fh.write(json.dumps({
                "id": rid,
                "truth": int(table.truth[i]),
                "attr_label": int(table.attr_labels[i]),
                "obj_label": int(table.obj_labels[i]),
                "blended": table.blended[i].tolist(),
                "p_comp": table.p_comp[i].tolist(),
                "p_attr": table.p_attr[i].tolist(),
                "p_obj": table.p_obj[i].tolist(),
            }, sort_keys=True) + "\n")


def read_score_dump(path) -> ScoreTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "header" not in lines[0]:
        raise ValueError(f"{path} is not a score dump")
    header = lines[0]["header"]
    rows = lines[1:]
    if not rows:
        raise ValueError(f"{path} contains no images")
    return ScoreTable(
        candidates=[tuple(p) for p in header["candidates"]],
        unseen_candidate=np.array(header["unseen_candidate"], dtype=bool),
        blended=np.array([r["blended"] for r in rows]),
        p_comp=np.array([r["p_comp"] for r in rows]),
        p_attr=np.array([r["p_attr"] for r in rows]),
        p_obj=np.array([r["p_obj"] for r in rows]),
        truth=np.array([r["truth"] for r in rows]),
        attr_labels=np.array([r["attr_label"] for r in rows]),
        obj_labels=np.array([r["obj_label"] for r in rows]),
        image_ids=[r["id"] for r in rows],
        beta=header["beta"])
