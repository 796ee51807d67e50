"""Training loop: triple forward passes, five cross-entropies, four EMD
terms, one optimizer step; plus checkpointing and the per-epoch metrics log.

Checkpoint format (little-endian):

    bytes 0..7   magic b"ADECKPT1"
    uint32       header length
    header       json: config_hash, epoch, seed, next_epoch, and an array
                 table [{name, dtype, shape, offset}] into the payload
    payload      raw array bytes, concatenated in table order

Arrays cover every learnable tensor plus the optimizer moments, so a reload
continues bit-identically on the same platform. All run-time randomness is
keyed on (seed, epoch, ...), never on a mutable generator, which is why the
seed and epoch counter are the only RNG state the checkpoint needs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import emd as emd_mod
from .backbone import BackboneConfig, TokenStore, cache_tokens
from .data import PairSampler, load_manifest
from .embedding import components_ce_loss
from .emd import RegTerms
from .model import CompositionModel, ModelConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ADECKPT1"


class NumericFailure(RuntimeError):
    """A loss went non-finite; diagnostics carried in the message."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    tau: float = 0.05
    seed: int = 0
    solver: str = "exact"            # exact | sinkhorn
    beta_train: float = 1.0
    reg_weight: float = 1.0
    checkpoint_every: int = 1
    attention_mode: str = "cross"
    num_heads: int = 4
    word_dim: int = 32
    dropout: float = 0.0
    weight_decay: float = 0.0
    word_vector_path: str | None = None
    emd_from_logits: bool = False
    qk_init_gain: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("rates and sizes must be positive")
        if self.reg_weight != 0.0 and self.attention_mode != "cross":
            raise ValueError("the attention-level regularizer needs cross "
                             "attention; set reg_weight 0 for other modes")

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:32]


def batch_losses(model: CompositionModel, tokens, tokens_attr, tokens_obj,
                 labels, comp_pairs, config: TrainConfig, fixed_plans=None):
    """Loss tensor plus components for one batch of (target, partners).

    `fixed_plans` replays previously solved transport plans instead of
    re-solving, holding the plan constant while the cost path varies; the
    semantics under which the regularizer's gradient is defined.
    """
    mode = config.attention_mode
    if mode == "cross":
        res_a1, res_a2 = model.attn_a.cross_attend_swapped(tokens, tokens_attr)
        res_o1, res_o2 = model.attn_o.cross_attend_swapped(tokens, tokens_obj)
        res_c = model.attn_c.self_attend(tokens)
        v_a, v_a2 = res_a1.output[:, 0], res_a2.output[:, 0]
        v_o, v_o2 = res_o1.output[:, 0], res_o2.output[:, 0]
        v_c = res_c.output[:, 0]
    elif mode == "self":
        v_a = model.attn_a.self_attend(tokens).output[:, 0]
        v_a2 = model.attn_a.self_attend(tokens_attr).output[:, 0]
        v_o = model.attn_o.self_attend(tokens).output[:, 0]
        v_o2 = model.attn_o.self_attend(tokens_obj).output[:, 0]
        v_c = model.attn_c.self_attend(tokens).output[:, 0]
    else:
        v_a, v_a2 = tokens[:, 0], tokens_attr[:, 0]
        v_o, v_o2 = tokens[:, 0], tokens_obj[:, 0]
        v_c = tokens[:, 0]

    parts = components_ce_loss(v_a, v_a2, v_o, v_o2, v_c, labels,
                               model.tables, model.embedders, model.psi,
                               comp_pairs, config.tau)
    loss = sum(parts.values())
    components = {k: float(v.detach()) for k, v in parts.items()}

    plans_out = []
    if config.reg_weight != 0.0:
        # Wrong-concept maps: attribute attention on the object-sharing pair
        # and vice versa, swapped like the matched pairs.
        res_x1, res_x2 = model.attn_a.cross_attend_swapped(tokens, tokens_obj)
        res_y1, res_y2 = model.attn_o.cross_attend_swapped(tokens, tokens_attr)
        pair_results = {
            "lam_aa": (res_a1, res_a2), "lam_oo": (res_o1, res_o2),
            "lam_ao": (res_x1, res_x2), "lam_oa": (res_y1, res_y2),
        }
        bsz = tokens.shape[0]
        sums = {k: tokens.new_zeros(()) for k in pair_results}
        for b in range(bsz):
            plans_b = {}
            for key, (r1, r2) in pair_results.items():
                if fixed_plans is not None:
                    supplies, demands, cost = emd_mod.transport_inputs_from_attention(
                        r1.item(b), r2.item(b), from_logits=config.emd_from_logits)
                    flow = torch.as_tensor(fixed_plans[b][key], dtype=cost.dtype)
                    sim = ((1.0 - cost) * flow).sum()
                    plans_b[key] = fixed_plans[b][key]
                else:
                    supplies, demands, cost = emd_mod.transport_inputs_from_attention(
                        r1.item(b), r2.item(b), from_logits=config.emd_from_logits)
                    problem = emd_mod.TransportProblem(
                        cost.detach().double().numpy(), supplies, demands)
                    plan = emd_mod.solve(problem, solver=config.solver)
                    flow = torch.as_tensor(plan.flow, dtype=cost.dtype)
                    sim = ((1.0 - cost) * flow).sum()
                    plans_b[key] = plan.flow
                sums[key] = sums[key] + sim
            plans_out.append(plans_b)
        terms = RegTerms(**{k: sums[k] / bsz for k in sums})
        reg = emd_mod.regularization_loss(terms)
        loss = loss + config.reg_weight * reg
        components["loss_reg"] = float(reg.detach())
        for k in sums:
            components[k] = float(sums[k].detach()) / bsz
    else:
        components["loss_reg"] = 0.0
    components["loss"] = float(loss.detach())
    return loss, components, plans_out


def train_step(model, optimizer, tokens, tokens_attr, tokens_obj, labels,
               comp_pairs, config: TrainConfig):
    """One optimizer update; returns the loss breakdown."""
    loss, components, _ = batch_losses(model, tokens, tokens_attr, tokens_obj,
                                       labels, comp_pairs, config)
    if not torch.isfinite(loss):
        raise NumericFailure(f"non-finite loss; components: {components}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return components


def _batch_tensors(store: TokenStore, samples, dtype=torch.float32):
    def stack(recs):
        return torch.as_tensor(
            np.stack([store.get(r.id) for r in recs]), dtype=dtype)
    targets = [s.target for s in samples]
    tokens = stack(targets)
    tokens_attr = stack([s.attr_partner for s in samples])
    tokens_obj = stack([s.obj_partner for s in samples])
    attr = torch.tensor([r.attribute_label for r in targets], dtype=torch.long)
    obj = torch.tensor([r.object_label for r in targets], dtype=torch.long)
    return tokens, tokens_attr, tokens_obj, attr, obj


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_epoch: int
    best_val_auc: float
    history: list[dict] = field(default_factory=list)


def fit(config: TrainConfig, manifest_path, backbone: BackboneConfig,
        out_dir, store_path=None) -> FitResult:
    """Full training run: cache tokens, train, validate every epoch, checkpoint."""
    from .evaluation import build_curve, calibration_gammas, summarize
    from .inference import score_table_for_records

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, vocab, split = load_manifest(manifest_path)
    if store_path is None:
        store_path = out_dir / "tokens.bin"
    store = cache_tokens(records, backbone, store_path)

    model_cfg = ModelConfig(token_dim=backbone.embed_dim,
                            word_dim=config.word_dim,
                            num_heads=config.num_heads, tau=config.tau,
                            attention_mode=config.attention_mode,
                            dropout=config.dropout,
                            qk_init_gain=config.qk_init_gain)
    model = CompositionModel(model_cfg, vocab,
                             word_vector_path=config.word_vector_path,
                             seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    comp_pairs = split.candidates(vocab, "closed", split="test")
    comp_pair_index = {p: i for i, p in enumerate(comp_pairs)}
    sampler = PairSampler(records, seed=config.seed)
    val_records = [r for r in records if r.split == "val"]

    log_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    history = []
    best_auc, best_epoch = -1.0, -1
    cfg_hash = config.content_hash()

    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(config.epochs):
            t0 = time.time()
            order = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch, 541])
            ).permutation(len(sampler))
            model.train()
            epoch_sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                samples = [sampler.sample(int(i), epoch) for i in idx]
                tokens, tok_a, tok_o, attr, obj = _batch_tensors(store, samples)
                comp = torch.tensor(
                    [comp_pair_index[(int(a), int(o))]
                     for a, o in zip(attr, obj)], dtype=torch.long)
                components = train_step(model, optimizer, tokens, tok_a, tok_o,
                                        (attr, obj, comp), comp_pairs, config)
                for k, v in components.items():
                    epoch_sums[k] = epoch_sums.get(k, 0.0) + v
                n_batches += 1

            model.eval()
            val_metrics = {}
            if val_records:
                table = score_table_for_records(
                    model, store, val_records, vocab, split, world="closed",
                    eval_split="val", beta=config.beta_train)
                gammas = calibration_gammas(table)
                curve = build_curve(table, gammas)
                report = summarize(curve, table)
                val_metrics = {"val_auc": report.auc, "val_best_hm": report.best_hm,
                               "val_best_seen": report.best_seen,
                               "val_best_unseen": report.best_unseen}
            entry = {"epoch": epoch,
                     **{k: v / max(1, n_batches) for k, v in epoch_sums.items()},
                     **val_metrics}
            history.append(entry)
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()
            log.info("epoch %d: loss %.4f val_auc %s (%.1fs)", epoch,
                     entry.get("loss", float("nan")), entry.get("val_auc"),
                     time.time() - t0)

            if val_metrics and val_metrics["val_auc"] > best_auc:
                best_auc = val_metrics["val_auc"]
                best_epoch = epoch
                save_checkpoint(best_path, model, optimizer, cfg_hash,
                                epoch=epoch, seed=config.seed)
            if (epoch + 1) % config.checkpoint_every == 0 \
                    or epoch == config.epochs - 1:
                save_checkpoint(last_path, model, optimizer, cfg_hash,
                                epoch=epoch, seed=config.seed)

    if not best_path.exists():  # no validation split: fall back to last
        save_checkpoint(best_path, model, optimizer, cfg_hash,
                        epoch=config.epochs - 1, seed=config.seed)
    return FitResult(best_checkpoint=best_path, last_checkpoint=last_path,
                     log_path=log_path, best_epoch=best_epoch,
                     best_val_auc=best_auc, history=history)


def save_checkpoint(path, model: CompositionModel, optimizer, config_hash: str,
                    epoch: int, seed: int) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, tensor in model.state_dict().items():
        arrays.append((f"param/{name}", tensor.detach().cpu().numpy()))
    if optimizer is not None:
        for pid, state in optimizer.state_dict()["state"].items():
            for key in ("step", "exp_avg", "exp_avg_sq"):
                val = state[key]
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) \
                    else np.asarray(val)
                arrays.append((f"adam/{pid}/{key}", arr))

    table = []
    payload = bytearray()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        table.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({"config_hash": config_hash, "epoch": epoch,
                         "seed": seed, "arrays": table},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path, model: CompositionModel, optimizer=None):
    """Restore parameters (and Adam moments); returns the header dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen].decode())
    payload = blob[12 + hlen:]
    loaded = {}
    for meta in header["arrays"]:
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        loaded[meta["name"]] = arr.reshape(meta["shape"]).copy()

    state = {name[len("param/"):]: torch.as_tensor(arr)
             for name, arr in loaded.items() if name.startswith("param/")}
    model.load_state_dict(state)

    if optimizer is not None:
        opt_sd = optimizer.state_dict()
        new_state = {}
        pids = {name.split("/")[1] for name in loaded if name.startswith("adam/")}
        for pid in pids:
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                entry[key] = torch.as_tensor(loaded[f"adam/{pid}/{key}"])
            new_state[int(pid)] = entry
        opt_sd["state"] = new_state
        optimizer.load_state_dict(opt_sd)
    return header
