"""Manifests, split semantics, pair sampling, and the synthetic dataset.

Manifest format: JSON lines, one image per line with fields
{id, path, attribute, object, split}, paths relative to the manifest
directory. A sidecar `splits.json` in the same directory declares the
ordered attribute/object name lists and the val/test unseen pair lists
(seen pairs are implied by the train split). Splits are validated on load:
seen and unseen pairs must be disjoint and every train image must carry a
seen pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .backbone import ImageRecord
from .embedding import ConceptVocabulary

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    """The manifest or its sidecar violates a split invariant."""


@dataclass
class SplitSpec:
    seen_pairs: list[tuple[int, int]]
    unseen_val: list[tuple[int, int]]
    unseen_test: list[tuple[int, int]]

    def __post_init__(self):
        seen = set(self.seen_pairs)
        if seen & set(self.unseen_val) or seen & set(self.unseen_test):
            raise ManifestError("seen and unseen pair sets overlap")

    def candidates(self, vocab: ConceptVocabulary, world: str,
                   split: str = "test") -> list[tuple[int, int]]:
        """Candidate composition list for a world; closed uses seen + unseen."""
        if world == "open":
            return vocab.all_pairs()
        if world == "closed":
            unseen = self.unseen_val if split == "val" else self.unseen_test
            return list(self.seen_pairs) + [p for p in unseen
                                            if p not in set(self.seen_pairs)]
        raise ValueError(f"unknown world '{world}'")

    def unseen_mask(self, candidates: list[tuple[int, int]]) -> np.ndarray:
        seen = set(self.seen_pairs)
        return np.array([pair not in seen for pair in candidates])


def load_manifest(manifest_path, splits_path=None):
    """Read records + vocabulary + splits, validating the invariants."""
    manifest_path = Path(manifest_path)
    if splits_path is None:
        splits_path = manifest_path.parent / "splits.json"
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    if not Path(splits_path).exists():
        raise ManifestError(f"split sidecar not found: {splits_path}")
    with open(splits_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    vocab = ConceptVocabulary(sidecar["attributes"], sidecar["objects"])

    def pair_indices(pairs):
        out = []
        for attr, obj in pairs:
            if attr not in vocab.attr_index or obj not in vocab.obj_index:
                raise ManifestError(f"unknown pair name ({attr}, {obj})")
            out.append((vocab.attr_index[attr], vocab.obj_index[obj]))
        return out

    records = []
    ids = set()
    root = manifest_path.parent
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            if row["attribute"] not in vocab.attr_index:
                raise ManifestError(
                    f"line {line_no}: unknown attribute '{row['attribute']}'")
            if row["object"] not in vocab.obj_index:
                raise ManifestError(
                    f"line {line_no}: unknown object '{row['object']}'")
            if row["id"] in ids:
                raise ManifestError(f"line {line_no}: duplicate id '{row['id']}'")
            if row["split"] not in ("train", "val", "test"):
                raise ManifestError(f"line {line_no}: bad split '{row['split']}'")
            ids.add(row["id"])
            records.append(ImageRecord(
                id=row["id"],
                path=str(root / row["path"]),
                attribute_label=vocab.attr_index[row["attribute"]],
                object_label=vocab.obj_index[row["object"]],
                split=row["split"],
            ))

    train_pairs = sorted({(r.attribute_label, r.object_label)
                          for r in records if r.split == "train"})
    split = SplitSpec(
        seen_pairs=train_pairs,
        unseen_val=pair_indices(sidecar.get("val_unseen", [])),
        unseen_test=pair_indices(sidecar.get("test_unseen", [])),
    )
    for r in records:
        if r.split == "train" and (r.attribute_label, r.object_label) \
                not in set(split.seen_pairs):
            raise ManifestError(f"train image {r.id} has a non-seen pair")
    if not split.unseen_val and not split.unseen_test:
        log.warning("no unseen pairs declared; closed world degenerates to "
                    "seen-only classification")
    log.info("manifest: %d images, |A|=%d, |O|=%d, %d seen pairs, "
             "%d val-unseen, %d test-unseen",
             len(records), vocab.num_attributes, vocab.num_objects,
             len(split.seen_pairs), len(split.unseen_val), len(split.unseen_test))
    return records, vocab, split


@dataclass
class PairSample:
    target: ImageRecord
    attr_partner: ImageRecord
    obj_partner: ImageRecord


class PairSampler:
    """Concept-sharing partner sampling over the train split.

    Partners are drawn uniformly from train records sharing the target's
    attribute (resp. object), preferring partners whose other concept
    differs; same-composition partners are the fallback, the target itself
    the last resort. Deterministic in (seed, epoch, target index).
    """

    def __init__(self, records: list[ImageRecord], seed: int):
        self.seed = seed
        self.train = [r for r in records if r.split == "train"]
        self.by_attr: dict[int, list[int]] = {}
        self.by_obj: dict[int, list[int]] = {}
        for idx, rec in enumerate(self.train):
            self.by_attr.setdefault(rec.attribute_label, []).append(idx)
            self.by_obj.setdefault(rec.object_label, []).append(idx)

    def __len__(self):
        return len(self.train)

    def _pick(self, rng, target_idx, pool, same_key):
        target = self.train[target_idx]
        preferred = [i for i in pool
                     if getattr(self.train[i], same_key) !=
                     getattr(target, same_key)]
        if preferred:
            return self.train[preferred[int(rng.integers(len(preferred)))]]
        others = [i for i in pool if i != target_idx]
        if others:
            return self.train[others[int(rng.integers(len(others)))]]
        return target  # singleton concept: self-pair fallback

    def sample(self, target_index: int, epoch: int) -> PairSample:
        target = self.train[target_index]
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, epoch, target_index, 929]))
        attr_partner = self._pick(rng, target_index,
                                  self.by_attr[target.attribute_label],
                                  "object_label")
        obj_partner = self._pick(rng, target_index,
                                 self.by_obj[target.object_label],
                                 "attribute_label")
        return PairSample(target, attr_partner, obj_partner)


def sample_pair(sampler: PairSampler, target_index: int, epoch: int) -> PairSample:
    return sampler.sample(target_index, epoch)


_COLOR_RGB = {
    "red": (200, 40, 40), "green": (40, 170, 60), "blue": (40, 80, 200),
    "yellow": (220, 200, 40), "purple": (140, 60, 180), "orange": (230, 130, 30),
    "cyan": (40, 190, 190), "magenta": (200, 50, 160), "white": (235, 235, 235),
    "brown": (130, 80, 40),
}
_SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx, cy, r, color):
    box = (cx - r, cy - r, cx + r, cy + r)
    if shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "square":
        draw.rectangle(box, fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif shape == "cross":
        w = max(1, int(r * 0.45))
        draw.rectangle((cx - w, cy - r, cx + w, cy + r), fill=color)
        draw.rectangle((cx - r, cy - w, cx + r, cy + w), fill=color)
    elif shape == "ring":
        draw.ellipse(box, fill=color)
        hole = max(1, int(r * 0.45))
        draw.ellipse((cx - hole, cy - hole, cx + hole, cy + hole), fill=(0, 0, 0))
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)],
                     fill=color)
    else:
        raise ValueError(f"no renderer for shape '{shape}'")


def _render(rng: np.random.Generator, color: str, shape: str,
            size: int, shade: float = 1.0) -> Image.Image:
    # The background is a dimmed palette color different from the label, so
    # the attribute cannot be read off a global hue pool; the model has to
    # localize the shape.
    other = [c for c in _COLOR_RGB if c != color]
    bg_base = np.asarray(
        _COLOR_RGB[other[int(rng.integers(len(other)))]], dtype=np.float64)
    bg_scale = 0.35 + 0.35 * rng.random()
    bg = tuple(int(v) for v in np.clip(bg_base * bg_scale, 0, 255))
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)
    # background speckle so global pooling is noisy
    for _ in range(int(rng.integers(8, 18))):
        x = int(rng.integers(0, size))
        y = int(rng.integers(0, size))
        c = tuple(int(v) for v in rng.integers(0, 150, size=3))
        draw.point((x, y), fill=c)
    # a small distractor blob in a corner region, any non-label color
    dist_color = _COLOR_RGB[other[int(rng.integers(len(other)))]]
    corner = int(rng.integers(4))
    margin = size // 5
    dx = int(rng.integers(0, margin))
    dy = int(rng.integers(0, margin))
    px = dx if corner in (0, 2) else size - 1 - dx
    py = dy if corner in (0, 1) else size - 1 - dy
    dr = int(rng.integers(1, max(2, size // 12)))
    draw.ellipse((px - dr, py - dr, px + dr, py + dr), fill=dist_color)
    # main shape: jittered center, scale, and hue; `shade` scales the fill
    # brightness (the attribute looks different on different objects, which
    # keeps the unseen combinations non-trivial)
    base = np.asarray(_COLOR_RGB[color], dtype=np.float64) * shade
    jitter = rng.normal(0.0, 14.0, size=3)
    fill = tuple(int(v) for v in np.clip(base + jitter, 0, 255))
    cx = size / 2 + rng.normal(0.0, size / 12)
    cy = size / 2 + rng.normal(0.0, size / 12)
    r = size * (0.24 + 0.10 * rng.random())
    _draw_shape(draw, shape, cx, cy, r, fill)
    return img


def generate_synthetic(colors, shapes, images_per_pair: int = 20,
                       unseen_fraction: float = 0.2,
                       eval_images_per_pair: int = 4,
                       image_size: int = 32, seed: int = 0,
                       out_dir=".") -> Path:
    """Colored-shapes dataset with a pair-level unseen holdout.

    Train images cover only seen pairs (`images_per_pair` each); val and
    test render `eval_images_per_pair` fresh images for every pair, seen and
    unseen alike. The holdout keeps every color and every shape present in
    at least one seen pair. Returns the manifest path.
    """
    colors = list(colors)
    shapes = list(shapes)
    if len(colors) < 2 or len(shapes) < 2:
        raise ManifestError("need at least 2 colors and 2 shapes")
    for c in colors:
        if c not in _COLOR_RGB:
            raise ManifestError(f"no RGB for color '{c}'; "
                                f"known: {sorted(_COLOR_RGB)}")
    for s in shapes:
        if s not in _SHAPES:
            raise ManifestError(f"no renderer for shape '{s}'; known: {_SHAPES}")

    pairs = [(a, o) for a in range(len(colors)) for o in range(len(shapes))]
    n_unseen = int(round(unseen_fraction * len(pairs)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))

    unseen: list[tuple[int, int]] = []
    order = list(rng.permutation(len(pairs)))
    for idx in order:
        if len(unseen) == n_unseen:
            break
        cand = pairs[idx]
        trial = set(unseen) | {cand}
        seen_left = [p for p in pairs if p not in trial]
        attrs_ok = {p[0] for p in seen_left} == set(range(len(colors)))
        objs_ok = {p[1] for p in seen_left} == set(range(len(shapes)))
        if attrs_ok and objs_ok:
            unseen.append(cand)
    if len(unseen) < n_unseen:
        raise ManifestError(
            f"cannot hold out {n_unseen} of {len(pairs)} pairs without "
            "orphaning a color or shape")
    unseen = sorted(unseen)
    seen = [p for p in pairs if p not in set(unseen)]

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []

    # Per-object brightness of the attribute color: unseen pairs show a
    # color at a shade never observed for that color during training.
    shades = [0.55 + 0.5 * (o / max(1, len(shapes) - 1))
              for o in range(len(shapes))]

    def emit(pair, split, count):
        a, o = pair
        for k in range(count):
            rid = f"{split}_{colors[a]}_{shapes[o]}_{k:03d}"
            img_rng = np.random.default_rng(
                np.random.SeedSequence([seed, a, o, {"train": 0, "val": 1,
                                                     "test": 2}[split], k]))
            img = _render(img_rng, colors[a], shapes[o], image_size,
                          shade=shades[o])
            rel = f"images/{rid}.png"
            img.save(out_dir / rel)
            records.append({"id": rid, "path": rel, "attribute": colors[a],
                            "object": shapes[o], "split": split})

    for pair in seen:
        emit(pair, "train", images_per_pair)
    for pair in pairs:
        emit(pair, "val", eval_images_per_pair)
        emit(pair, "test", eval_images_per_pair)

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for row in records:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    sidecar = {
        "attributes": colors,
        "objects": shapes,
        "val_unseen": [[colors[a], shapes[o]] for a, o in unseen],
        "test_unseen": [[colors[a], shapes[o]] for a, o in unseen],
    }
    with open(out_dir / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    log.info("synthetic dataset: %d pairs (%d seen, %d unseen), %d images",
             len(pairs), len(seen), len(unseen), len(records))
    return manifest_path
