"""Frozen token encoder and the on-disk token store.

The encoder is a standard pre-norm vision transformer run in numpy: patch
projection, class token, positional embeddings, then N attention blocks.
"external" mode reads the weights from an .npz file; "toy" mode draws them
once from a seeded generator, giving a millisecond-cost encoder with the
same token-shape contract. Either way the encoder is frozen: bit-identical
outputs for the same config and image, and nothing here ever sees a
gradient.

Token store format (little-endian):

    bytes 0..7    magic b"ADETOK1\\0"
    bytes 8..39   32 hex chars: content hash of the backbone config
    uint32        T   (tokens per image)
    uint32        D   (token width)
    uint32        count
    count times:  uint16 id length, id bytes (utf-8), uint64 row offset
    data:         count rows of T*D float32, at the stated offsets
                  (relative to the end of the index table)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"ADETOK1\0"


class StoreHashMismatch(RuntimeError):
    """An existing store was built under a different backbone config."""


@dataclass
class ImageRecord:
    id: str
    path: str
    attribute_label: int
    object_label: int
    split: str


@dataclass
class BackboneConfig:
    mode: str = "toy"              # "toy" or "external"
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    seed: int = 0
    weight_path: str | None = None
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.mode not in ("toy", "external"):
            raise ValueError(f"unknown backbone mode '{self.mode}'")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image size must be a multiple of the patch size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed dim must be divisible by the head count")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches

    def content_hash(self) -> str:
        fields = (self.mode, self.image_size, self.patch_size, self.embed_dim,
                  self.num_heads, self.num_blocks, self.seed,
                  self.weight_path if self.mode == "external" else None,
                  tuple(self.mean), tuple(self.std))
        return hashlib.sha256(repr(fields).encode()).hexdigest()[:32]


_WEIGHT_KEYS = ("patch_kernel", "patch_bias", "cls_token", "pos_embed",
                "final_ln_gamma", "final_ln_beta")
_BLOCK_KEYS = ("ln1_gamma", "ln1_beta", "qkv_kernel", "qkv_bias",
               "proj_kernel", "proj_bias", "ln2_gamma", "ln2_beta",
               "fc1_kernel", "fc1_bias", "fc2_kernel", "fc2_bias")


def _toy_weights(config: BackboneConfig) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    d = config.embed_dim
    patch_dim = 3 * config.patch_size ** 2
    hidden = 2 * d

    def mat(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32)

    w = {
        "patch_kernel": mat(patch_dim, d),
        "patch_bias": np.zeros(d, dtype=np.float32),
        "cls_token": (0.1 * rng.standard_normal(d)).astype(np.float32),
        "pos_embed": (0.3 * rng.standard_normal((config.num_tokens, d))).astype(np.float32),
        "final_ln_gamma": np.ones(d, dtype=np.float32),
        "final_ln_beta": np.zeros(d, dtype=np.float32),
    }
    for b in range(config.num_blocks):
        w[f"block{b}_ln1_gamma"] = np.ones(d, dtype=np.float32)
        w[f"block{b}_ln1_beta"] = np.zeros(d, dtype=np.float32)
        w[f"block{b}_qkv_kernel"] = mat(d, 3 * d)
        w[f"block{b}_qkv_bias"] = np.zeros(3 * d, dtype=np.float32)
        w[f"block{b}_proj_kernel"] = mat(d, d)
        w[f"block{b}_proj_bias"] = np.zeros(d, dtype=np.float32)
        w[f"block{b}_ln2_gamma"] = np.ones(d, dtype=np.float32)
        w[f"block{b}_ln2_beta"] = np.zeros(d, dtype=np.float32)
        w[f"block{b}_fc1_kernel"] = mat(d, hidden)
        w[f"block{b}_fc1_bias"] = np.zeros(hidden, dtype=np.float32)
        w[f"block{b}_fc2_kernel"] = mat(hidden, d)
        w[f"block{b}_fc2_bias"] = np.zeros(d, dtype=np.float32)
    return w


def _load_external_weights(config: BackboneConfig) -> dict:
    if config.weight_path is None:
        raise FileNotFoundError("external mode needs a weight file path")
    path = Path(config.weight_path)
    if not path.exists():
        raise FileNotFoundError(f"weight file not found: {path}")
    with np.load(path) as npz:
        w = {k: np.asarray(npz[k], dtype=np.float32) for k in npz.files}
    d = config.embed_dim
    patch_dim = 3 * config.patch_size ** 2
    expected = dict.fromkeys(_WEIGHT_KEYS)
    for b in range(config.num_blocks):
        for k in _BLOCK_KEYS:
            expected[f"block{b}_{k}"] = None
    missing = [k for k in expected if k not in w]
    if missing:
        raise ValueError(f"weight file is missing keys: {missing[:4]}...")
    if w["patch_kernel"].shape != (patch_dim, d):
        raise ValueError(
            f"patch kernel is {w['patch_kernel'].shape}, config wants {(patch_dim, d)}")
    if w["pos_embed"].shape != (config.num_tokens, d):
        raise ValueError(
            f"pos embed is {w['pos_embed'].shape}, config wants {(config.num_tokens, d)}")
    return w


def save_external_weights(path, weights: dict) -> None:
    np.savez(path, **weights)


def _layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class FrozenEncoder:
    """Deterministic numpy forward pass; weights fixed at construction."""

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.weights = (_toy_weights(config) if config.mode == "toy"
                        else _load_external_weights(config))

    def _patches(self, image: np.ndarray) -> np.ndarray:
        size, p = self.config.image_size, self.config.patch_size
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) RGB array")
        if image.dtype == np.uint8:
            pil = Image.fromarray(image)
        else:
            pil = Image.fromarray(np.clip(image, 0, 255).astype(np.uint8))
        if pil.size != (size, size):
            pil = pil.resize((size, size), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float32) / 255.0
        arr = (arr - np.asarray(self.config.mean, dtype=np.float32)) \
            / np.asarray(self.config.std, dtype=np.float32)
        g = size // p
        tiles = arr.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        return tiles.reshape(g * g, p * p * 3)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) image -> (T, D) float32 tokens, class token at row 0."""
        cfg, wts = self.config, self.weights
        x = self._patches(image).astype(np.float32)
        tokens = x @ wts["patch_kernel"] + wts["patch_bias"]
        tokens = np.concatenate([wts["cls_token"][None, :], tokens], axis=0)
        tokens = tokens + wts["pos_embed"]
        h, d = cfg.num_heads, cfg.embed_dim
        d_h = d // h
        for b in range(cfg.num_blocks):
            pre = _layer_norm(tokens, wts[f"block{b}_ln1_gamma"],
                              wts[f"block{b}_ln1_beta"])
            qkv = pre @ wts[f"block{b}_qkv_kernel"] + wts[f"block{b}_qkv_bias"]
            q, k, v = np.split(qkv, 3, axis=-1)
            t = tokens.shape[0]

            def heads(m):
                return m.reshape(t, h, d_h).transpose(1, 0, 2)

            attn = _softmax(heads(q) @ heads(k).transpose(0, 2, 1) / np.sqrt(d_h))
            ctx = (attn @ heads(v)).transpose(1, 0, 2).reshape(t, d)
            tokens = tokens + ctx @ wts[f"block{b}_proj_kernel"] \
                + wts[f"block{b}_proj_bias"]
            pre2 = _layer_norm(tokens, wts[f"block{b}_ln2_gamma"],
                               wts[f"block{b}_ln2_beta"])
            hid = np.maximum(pre2 @ wts[f"block{b}_fc1_kernel"]
                             + wts[f"block{b}_fc1_bias"], 0.0)
            tokens = tokens + hid @ wts[f"block{b}_fc2_kernel"] \
                + wts[f"block{b}_fc2_bias"]
        tokens = _layer_norm(tokens, wts["final_ln_gamma"], wts["final_ln_beta"])
        return tokens.astype(np.float32)


def encode_image(image: np.ndarray, config: BackboneConfig) -> np.ndarray:
    return FrozenEncoder(config).encode(image)


@dataclass
class TokenStore:
    path: Path
    config_hash: str
    num_tokens: int
    token_dim: int
    _rows: dict[str, np.ndarray] = field(default_factory=dict)
    encodes_performed: int = 0

    @property
    def ids(self) -> list[str]:
        return list(self._rows.keys())

    def get(self, record_id: str) -> np.ndarray:
        return self._rows[record_id]

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def save(self) -> None:
        index = bytearray()
        payload = bytearray()
        for rid, row in self._rows.items():
            raw = np.ascontiguousarray(row, dtype="<f4").tobytes()
            rid_b = rid.encode("utf-8")
            index += struct.pack("<H", len(rid_b)) + rid_b \
                + struct.pack("<Q", len(payload))
            payload += raw
        header = MAGIC + self.config_hash.encode("ascii") \
            + struct.pack("<III", self.num_tokens, self.token_dim, len(self._rows))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "wb") as fh:
            fh.write(header)
            fh.write(bytes(index))
            fh.write(bytes(payload))

    @classmethod
    def load(cls, path) -> "TokenStore":
        path = Path(path)
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != MAGIC:
            raise ValueError(f"{path} is not a token store")
        config_hash = blob[8:40].decode("ascii")
        t, d, count = struct.unpack_from("<III", blob, 40)
        offset = 52
        entries = []
        for _ in range(count):
            (rid_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            rid = blob[offset:offset + rid_len].decode("utf-8")
            offset += rid_len
            (row_off,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            entries.append((rid, row_off))
        data_start = offset
        store = cls(path=path, config_hash=config_hash, num_tokens=t, token_dim=d)
        row_bytes = t * d * 4
        for rid, row_off in entries:
            start = data_start + row_off
            row = np.frombuffer(blob[start:start + row_bytes], dtype="<f4")
            store._rows[rid] = row.reshape(t, d).copy()
        return store


def cache_tokens(manifest: list[ImageRecord], config: BackboneConfig,
                 store_path) -> TokenStore:
    """Encode every manifest image once; a matching existing store is reused.

    Raises StoreHashMismatch if the store on disk was built under a different
    config; it is never silently reused. `encodes_performed` on the returned
    store counts the encoder invocations of this call (0 for a clean reuse).
    """
    store_path = Path(store_path)
    want_hash = config.content_hash()
    store = None
    if store_path.exists():
        store = TokenStore.load(store_path)
        if store.config_hash != want_hash:
            raise StoreHashMismatch(
                f"{store_path} was built with config hash {store.config_hash}, "
                f"current config hashes to {want_hash}")
        store.encodes_performed = 0
        if all(rec.id in store for rec in manifest):
            return store
    if store is None:
        store = TokenStore(path=store_path, config_hash=want_hash,
                           num_tokens=config.num_tokens, token_dim=config.embed_dim)
    encoder = FrozenEncoder(config)
    for rec in manifest:
        if rec.id in store:
            continue
        with Image.open(rec.path) as img:
            arr = np.asarray(img.convert("RGB"))
        store._rows[rec.id] = encoder.encode(arr)
        store.encodes_performed += 1
    store.save()
    return store
