"""Synthetic data generation, manifests, tokenization, and joint batch sampling.

The generator draws flat color-block pedestrians: identity-level attributes
(gender, hair, top, bottom) render as fixed body regions whose colors are
stable for a person across all their images, instance-level attributes
(action, carried object) render as small localized marks, and each camera
applies a global tint plus seeded noise.  Captions come from one grammar over
the same attribute words, so caption text and pixels can never disagree.

Two datasets are emitted, one with captions and one without, sharing a
configurable fraction of persons through a common raw-id namespace; identity
unification maps equal (namespace, raw id) pairs to one label.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .backbone import ImageBatch
from .config import SyntheticSpec, TEMPLATE_WORDS, derive_seed
from .errors import ConfigError, DataError
from .losses import BatchViews

log = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
WORD_RE = re.compile(r"[a-z0-9]+")

# word lists are pairwise disjoint so a caption word identifies its attribute
ATTRIBUTE_WORDS = {
    "gender": ("woman", "man", "girl", "boy"),
    "hair": ("black", "brown", "blonde", "red", "gray", "white"),
    "top_color": ("crimson", "orange", "yellow", "green", "teal", "blue", "purple", "pink"),
    "bottom_color": ("navy", "khaki", "olive", "maroon", "beige", "charcoal", "tan", "indigo"),
    "action": ("walking", "running", "standing", "sitting", "jogging", "waiting"),
    "carried_object": ("backpack", "handbag", "umbrella", "suitcase", "phone", "bottle"),
}

_COLORS = {
    "gender": ((225, 75, 75), (75, 75, 225), (225, 190, 75), (75, 210, 190)),
    "hair": ((25, 25, 25), (120, 72, 36), (230, 200, 120), (180, 60, 30),
             (150, 150, 150), (240, 240, 240)),
    "top_color": ((180, 30, 60), (240, 130, 40), (240, 220, 60), (60, 180, 75),
                  (0, 150, 150), (40, 80, 220), (140, 60, 200), (240, 140, 200)),
    "bottom_color": ((25, 35, 90), (195, 176, 145), (110, 120, 50), (115, 25, 45),
                     (225, 210, 180), (54, 60, 66), (210, 180, 140), (75, 0, 130)),
    "action": ((255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (255, 0, 255),
               (0, 255, 255)),
    "carried_object": ((128, 0, 0), (0, 128, 0), (0, 0, 128), (128, 128, 0),
                       (128, 0, 128), (0, 128, 128)),
}

_CAPTION = ("the {gender} with {hair} hair wearing {top_color} top and "
            "{bottom_color} pants, {action} and carrying {carried_object}")


@dataclass
class ManifestEntry:
    image_path: str  # relative to the manifest's directory
    identity: str    # raw id within the manifest's namespace
    camera: int
    split: str       # train | query | gallery
    captions: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    name: str
    modality: str            # t2i | i2i
    image_size: tuple[int, int]
    id_namespace: str
    root: Path               # directory holding manifest.json and images
    entries: list[ManifestEntry]

    def validate(self) -> None:
        if self.modality not in ("t2i", "i2i"):
            raise DataError(f"manifest {self.name}: modality must be t2i or i2i")
        train_paths, test_paths = set(), set()
        for e in self.entries:
            if e.split not in ("train", "query", "gallery"):
                raise DataError(f"manifest {self.name}: bad split {e.split!r}")
            if self.modality == "t2i" and e.split == "train" and not e.captions:
                raise DataError(f"manifest {self.name}: train entry {e.image_path} has no caption")
            if self.modality == "i2i" and e.captions:
                raise DataError(f"manifest {self.name}: entry {e.image_path} carries captions")
            (train_paths if e.split == "train" else test_paths).add(e.image_path)
        leaked = train_paths & test_paths
        if leaked:
            raise DataError(f"manifest {self.name}: images in both train and test: {sorted(leaked)[:3]}")

    def entries_in(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    payload = {
        "meta": {
            "name": manifest.name,
            "modality": manifest.modality,
            "image_size": list(manifest.image_size),
            "id_namespace": manifest.id_namespace,
        },
        "entries": [
            {
                "image_path": e.image_path,
                "identity": e.identity,
                "camera": e.camera,
                "split": e.split,
                "captions": e.captions,
            }
            for e in manifest.entries
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from None
    try:
        meta = payload["meta"]
        manifest = DatasetManifest(
            name=meta["name"],
            modality=meta["modality"],
            image_size=tuple(meta["image_size"]),
            id_namespace=meta["id_namespace"],
            root=path.parent,
            entries=[ManifestEntry(**e) for e in payload["entries"]],
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest {path} has a malformed schema: {exc}") from None
    manifest.validate()
    return manifest


def _layout(height: int, width: int) -> dict[str, tuple[slice, slice]]:
    def rows(a: float, b: float) -> slice:
        return slice(int(a * height), int(b * height))

    def cols(a: float, b: float) -> slice:
        return slice(int(a * width), int(b * width))

    return {
        "hair": (rows(0.03, 0.16), cols(0.25, 0.75)),
        "face": (rows(0.16, 0.22), cols(0.31, 0.69)),
        "gender": (rows(0.22, 0.28), cols(0.125, 0.875)),
        "top_color": (rows(0.28, 0.59), cols(0.125, 0.875)),
        "bottom_color": (rows(0.59, 0.875), cols(0.19, 0.81)),
        "shoes": (rows(0.875, 0.97), cols(0.25, 0.75)),
    }


def _render_image(spec: SyntheticSpec, id_attrs: dict[str, int], action: int,
                  carried: int, camera: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_height, spec.image_width
    img = np.full((h, w, 3), 200.0)
    layout = _layout(h, w)
    for attr in ("hair", "gender", "top_color", "bottom_color"):
        r, c = layout[attr]
        img[r, c] = _COLORS[attr][id_attrs[attr]]
    img[layout["face"][0], layout["face"][1]] = (235, 205, 175)
    img[layout["shoes"][0], layout["shoes"][1]] = (45, 40, 40)
    # instance marks: small squares on the margins, position and color indexed
    mark = max(2, h // 16)
    row_a = int((0.125 + 0.125 * action) * h)
    img[row_a:row_a + mark, 0:mark] = _COLORS["action"][action]
    row_o = int((0.125 + 0.125 * carried) * h)
    img[row_o:row_o + mark, w - mark:w] = _COLORS["carried_object"][carried]
    # camera signature: channelwise tint plus pixel noise
    phase = 2.0 * math.pi * camera / spec.n_cameras
    tint = np.array([1.0 + spec.tint_strength * math.cos(phase + 2.0 * math.pi * ch / 3.0)
                     for ch in range(3)])
    img = img / 255.0 * tint
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _caption_for(id_attrs: dict[str, int], action: int, carried: int) -> str:
    words = {k: ATTRIBUTE_WORDS[k][v] for k, v in id_attrs.items()}
    words["action"] = ATTRIBUTE_WORDS["action"][action]
    words["carried_object"] = ATTRIBUTE_WORDS["carried_object"][carried]
    return _CAPTION.format(**words)


def _assign_identity_attrs(spec: SyntheticSpec) -> list[dict[str, int]]:
    sizes = {
        "gender": spec.gender_vocab,
        "hair": spec.hair_vocab,
        "top_color": spec.top_color_vocab,
        "bottom_color": spec.bottom_color_vocab,
    }
    for attr, size in sizes.items():
        if not 1 <= size <= len(ATTRIBUTE_WORDS[attr]):
            raise ConfigError(f"{attr} vocab size must be in [1, {len(ATTRIBUTE_WORDS[attr])}]")
    combos = math.prod(sizes.values())
    if spec.n_identities > combos:
        raise ConfigError(
            f"{spec.n_identities} identities need distinct attribute combos but only "
            f"{combos} exist; enlarge the attribute vocabs"
        )
    rng = np.random.default_rng(derive_seed(spec.seed, "synthetic:identity-attrs"))
    picks = rng.choice(combos, size=spec.n_identities, replace=False)
    attrs = []
    order = list(sizes)
    for flat in picks:
        combo = {}
        for attr in reversed(order):
            combo[attr] = int(flat % sizes[attr])
            flat //= sizes[attr]
        attrs.append(combo)
    return attrs


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> tuple[DatasetManifest, DatasetManifest]:
    """Write the paired caption/no-caption datasets under out_dir and return their manifests.

    Everything (attribute assignment, instance draws, pixel noise) derives from
    spec.seed, so the same spec writes byte-identical files.
    """
    spec.validate()
    if spec.action_vocab > len(ATTRIBUTE_WORDS["action"]):
        raise ConfigError(f"action vocab size must be <= {len(ATTRIBUTE_WORDS['action'])}")
    if spec.object_vocab > len(ATTRIBUTE_WORDS["carried_object"]):
        raise ConfigError(f"object vocab size must be <= {len(ATTRIBUTE_WORDS['carried_object'])}")
    out_dir = Path(out_dir)
    attrs = _assign_identity_attrs(spec)
    raw_ids = [f"person_{i:03d}" for i in range(spec.n_identities)]

    shared = round(spec.shared_identity_fraction * spec.n_identities)
    only = spec.n_identities - shared
    t2i_extra = (only + 1) // 2
    t2i_persons = list(range(shared)) + list(range(shared, shared + t2i_extra))
    i2i_persons = list(range(shared)) + list(range(shared + t2i_extra, spec.n_identities))
    for name, persons in (("t2i", t2i_persons), ("i2i", i2i_persons)):
        if len(persons) < 2:
            raise ConfigError(f"{name} dataset would cover {len(persons)} identities; need >= 2")

    train_n = spec.images_per_identity - spec.query_per_identity - spec.gallery_per_identity
    manifests = []
    for name, persons in (("t2i", t2i_persons), ("i2i", i2i_persons)):
        ds_root = out_dir / name
        (ds_root / "images").mkdir(parents=True, exist_ok=True)
        entries = []
        attr_table = {}
        for p in persons:
            raw = raw_ids[p]
            attr_table[raw] = {k: ATTRIBUTE_WORDS[k][v] for k, v in attrs[p].items()}
            for idx in range(spec.images_per_identity):
                camera = idx % spec.n_cameras
                split = ("train" if idx < train_n
                         else "query" if idx < train_n + spec.query_per_identity
                         else "gallery")
                rng = np.random.default_rng(derive_seed(spec.seed, f"{name}:{raw}:{idx}"))
                action = int(rng.integers(spec.action_vocab))
                carried = int(rng.integers(spec.object_vocab))
                pixels = _render_image(spec, attrs[p], action, carried, camera, rng)
                rel = f"images/{raw}_cam{camera}_{idx:02d}.png"
                Image.fromarray(pixels).save(ds_root / rel)
                captions = [_caption_for(attrs[p], action, carried)] if name == "t2i" else []
                entries.append(ManifestEntry(rel, raw, camera, split, captions))
        manifest = DatasetManifest(
            name=f"synthetic-{name}", modality=name,
            image_size=(spec.image_height, spec.image_width),
            id_namespace="synthetic-people", root=ds_root, entries=entries,
        )
        manifest.validate()
        save_manifest(manifest, ds_root / "manifest.json")
        with open(ds_root / "attributes.json", "w") as fh:
            json.dump(attr_table, fh, indent=1, sort_keys=True)
            fh.write("\n")
        manifests.append(manifest)
    return manifests[0], manifests[1]


@dataclass
class IdentityMap:
    """Unified labels over (namespace, raw id) keys; train labels are contiguous."""

    label_of: dict[tuple[str, str], int]
    num_train_identities: int

    def label(self, namespace: str, raw: str) -> int:
        try:
            return self.label_of[(namespace, raw)]
        except KeyError:
            raise DataError(f"identity {raw!r} in namespace {namespace!r} is not mapped") from None


def unify_identities(manifests: Sequence[DatasetManifest]) -> IdentityMap:
    """Merge identities across manifests: equal raw ids within one namespace are one person.

    Train identities get labels [0, N_id); identities seen only in evaluation
    splits continue the numbering above N_id.
    """
    namespace_by_name: dict[str, str] = {}
    for m in manifests:
        seen = namespace_by_name.get(m.name)
        if seen is not None and seen != m.id_namespace:
            raise DataError(
                f"dataset {m.name!r} declared twice with conflicting namespaces "
                f"{seen!r} and {m.id_namespace!r}"
            )
        namespace_by_name[m.name] = m.id_namespace
    train_keys, test_keys = set(), set()
    for m in manifests:
        for e in m.entries:
            key = (m.id_namespace, e.identity)
            (train_keys if e.split == "train" else test_keys).add(key)
    label_of = {key: i for i, key in enumerate(sorted(train_keys))}
    for key in sorted(test_keys - train_keys):
        label_of[key] = len(label_of)
    return IdentityMap(label_of, num_train_identities=len(train_keys))


@dataclass
class Vocabulary:
    """Word to id mapping with PAD/BOS/EOS specials at fixed low ids."""

    word_to_id: dict[str, int]
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID

    @property
    def size(self) -> int:
        return 3 + len(self.word_to_id)

    def id_of(self, word: str) -> int:
        try:
            return self.word_to_id[word]
        except KeyError:
            raise DataError(f"word {word!r} is not in the vocabulary") from None

    def encode(self, caption: str, max_len: int, train: bool = True) -> list[int]:
        """BOS + word ids + EOS, truncated to max_len with EOS kept last.

        Unknown words are an error while building training batches and map to
        PAD at evaluation time.
        """
        ids = [self.bos_id]
        for word in WORD_RE.findall(caption.lower()):
            got = self.word_to_id.get(word)
            if got is None:
                if train:
                    raise DataError(f"out-of-vocabulary word {word!r} in training caption")
                got = self.pad_id
            ids.append(got)
        ids.append(self.eos_id)
        if len(ids) > max_len:
            ids = ids[:max_len]
            ids[-1] = self.eos_id
        return ids

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.word_to_id, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path) as fh:
            return cls(json.load(fh))


def build_vocabulary(captions: Iterable[str]) -> Vocabulary:
    """Vocabulary over all caption words plus the prompt-template words."""
    words = set(TEMPLATE_WORDS)
    for caption in captions:
        words.update(WORD_RE.findall(caption.lower()))
    return Vocabulary({w: i + 3 for i, w in enumerate(sorted(words))})


class ManifestDataset:
    """A manifest with images decoded into memory and unified labels attached."""

    def __init__(self, manifest: DatasetManifest, id_map: IdentityMap):
        self.manifest = manifest
        self.entries = manifest.entries
        self.labels = torch.tensor(
            [id_map.label(manifest.id_namespace, e.identity) for e in self.entries]
        )
        self.cameras = torch.tensor([e.camera for e in self.entries])
        h, w = manifest.image_size
        pixels = np.empty((len(self.entries), h, w, 3), dtype=np.uint8)
        for i, e in enumerate(self.entries):
            arr = np.asarray(Image.open(manifest.root / e.image_path).convert("RGB"))
            if arr.shape != (h, w, 3):
                raise DataError(
                    f"{e.image_path}: image is {arr.shape[:2]}, manifest says {(h, w)}"
                )
            pixels[i] = arr
        self.pixels = torch.from_numpy(pixels).permute(0, 3, 1, 2).contiguous()

    def __len__(self) -> int:
        return len(self.entries)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def pixels_float(self, indices: Sequence[int]) -> Tensor:
        return self.pixels[list(indices)].float() / 255.0


@dataclass
class JointBatch:
    images: ImageBatch   # caption-paired items first, then the PK-structured items
    token_ids: Tensor    # [B_t2i, L] padded with PAD
    views: BatchViews


def pad_token_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> Tensor:
    length = max(len(s) for s in sequences)
    out = torch.full((len(sequences), length), pad_id, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


class JointSampler:
    """Draws joint batches: random caption-paired samples plus a PK image block.

    The PK block takes ``i2i_batch / P`` distinct identities with P instances
    each; identities with fewer than P training images are resampled with
    replacement (logged once per identity).
    """

    def __init__(self, t2i: ManifestDataset, i2i: ManifestDataset, *, t2i_batch: int,
                 i2i_batch: int, instances_per_identity: int, vocab: Vocabulary,
                 max_text_len: int, rng: np.random.Generator):
        self.t2i = t2i
        self.i2i = i2i
        self.t2i_batch = t2i_batch
        self.i2i_batch = i2i_batch
        self.p = instances_per_identity
        self.vocab = vocab
        self.max_text_len = max_text_len
        self.rng = rng
        self.t2i_train = t2i.split_indices("train")
        if len(self.t2i_train) < 2:
            raise DataError("caption dataset needs at least 2 training images")
        by_label: dict[int, list[int]] = {}
        for i in i2i.split_indices("train"):
            by_label.setdefault(int(i2i.labels[i]), []).append(i)
        self.i2i_by_label = by_label
        self.num_pk_identities = i2i_batch // instances_per_identity
        if len(by_label) < self.num_pk_identities:
            raise DataError(
                f"PK sampling needs {self.num_pk_identities} identities, "
                f"dataset has {len(by_label)}"
            )
        self._warned_shallow: set[int] = set()

    def _sample_t2i(self) -> tuple[list[int], list[list[int]]]:
        n = len(self.t2i_train)
        replace = n < self.t2i_batch
        picks = self.rng.choice(n, size=self.t2i_batch, replace=replace)
        indices, tokens = [], []
        for pick in picks:
            idx = self.t2i_train[int(pick)]
            entry = self.t2i.entries[idx]
            caption = entry.captions[int(self.rng.integers(len(entry.captions)))]
            tokens.append(self.vocab.encode(caption, self.max_text_len, train=True))
            indices.append(idx)
        return indices, tokens

    def _sample_i2i(self) -> list[int]:
        labels = sorted(self.i2i_by_label)
        chosen = self.rng.choice(len(labels), size=self.num_pk_identities, replace=False)
        indices = []
        for c in chosen:
            label = labels[int(c)]
            pool = self.i2i_by_label[label]
            if len(pool) < self.p:
                if label not in self._warned_shallow:
                    log.warning("identity %d has %d < %d training images; sampling with replacement",
                                label, len(pool), self.p)
                    self._warned_shallow.add(label)
                picks = self.rng.choice(len(pool), size=self.p, replace=True)
            else:
                picks = self.rng.choice(len(pool), size=self.p, replace=False)
            indices.extend(pool[int(k)] for k in picks)
        return indices

    def sample(self) -> JointBatch:
        t2i_idx, token_lists = self._sample_t2i()
        i2i_idx = self._sample_i2i()
        pixels = torch.cat([self.t2i.pixels_float(t2i_idx), self.i2i.pixels_float(i2i_idx)])
        labels = torch.cat([self.t2i.labels[t2i_idx], self.i2i.labels[i2i_idx]])
        cameras = torch.cat([self.t2i.cameras[t2i_idx], self.i2i.cameras[i2i_idx]])
        mask = torch.zeros(len(labels), dtype=torch.bool)
        mask[: len(t2i_idx)] = True
        images = ImageBatch(pixels=pixels, identity=labels, camera=cameras, is_t2i=mask)
        return JointBatch(images=images, token_ids=pad_token_batch(token_lists),
                          views=BatchViews(labels=labels, cameras=cameras, t2i_mask=mask))
