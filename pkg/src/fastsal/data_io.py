"""Dataset ingestion and saliency-map output.

Images are binary PPM (P6) or PGM (P5), 8-bit only; saliency maps are written
as 8-bit P5 after min-max scaling. Fixations are "row col" text lines,
0-indexed. Manifests are JSON lines with image/gt/fix/teacher keys. Teacher
bundles reuse the weight-file container with reserved entry names.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .distill import TeacherBundle
from .errors import ContractError, ParseError
from .network import load_weights
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _parse_pnm(blob):
    """Parse a binary P5/P6 file, returning (channels, height, width, pixels).
    Raises ParseError with the byte offset of the first bad byte."""
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch in b" \t\r\n":
                pos += 1
            elif ch == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                return

    def read_int(what):
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ParseError(f"expected {what}", offset=start)
        return int(blob[start:pos])

    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}, need binary P5 or P6", offset=0)
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval = read_int("maxval")
    if maxval > 255:
        raise ParseError(f"16-bit samples (maxval {maxval}) unsupported", offset=pos)
    if maxval < 1:
        raise ParseError(f"invalid maxval {maxval}", offset=pos)
    if pos >= len(blob) or blob[pos:pos + 1] not in b" \t\r\n":
        raise ParseError("missing whitespace after maxval", offset=pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    nbytes = width * height * channels
    if len(blob) - pos < nbytes:
        raise ParseError(
            f"truncated pixel data: need {nbytes} bytes, have {len(blob) - pos}",
            offset=pos)
    if len(blob) - pos > nbytes:
        raise ParseError("trailing bytes after pixel data", offset=pos + nbytes)
    pixels = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos)
    return channels, height, width, pixels.reshape(height, width, channels), maxval


def load_pnm(path):
    """Raw decode to a float array in [0,1], shape (H, W, C)."""
    with open(path, "rb") as f:
        blob = f.read()
    try:
        channels, h, w, pixels, maxval = _parse_pnm(blob)
    except ParseError as e:
        raise ParseError(f"{path}: {e}", offset=e.offset) from None
    return pixels.astype(np.float32) / maxval


def load_image(path, size=None, mean=IMAGENET_MEAN, std=IMAGENET_STD,
               normalize=True):
    """Image file to a (1,3,H,W) tensor: grayscale broadcast to 3 channels,
    bilinear resize to the target size, then per-channel normalization."""
    from .kernels import bilinear_resize

    arr = load_pnm(path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    t = Tensor(arr.transpose(2, 0, 1)[None])
    if size is not None and (t.shape[2], t.shape[3]) != tuple(size):
        t = bilinear_resize(t, size[0], size[1])
    if normalize:
        m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
        s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
        t = Tensor((t.data - m) / s)
    return t


def load_map(path, size=None):
    """Single-channel map file to a (1,1,H,W) tensor in [0,1]."""
    from .kernels import bilinear_resize

    arr = load_pnm(path)
    if arr.shape[2] == 3:
        arr = arr.mean(axis=2, keepdims=True)
    t = Tensor(arr.transpose(2, 0, 1)[None])
    if size is not None and (t.shape[2], t.shape[3]) != tuple(size):
        t = bilinear_resize(t, size[0], size[1])
    return t


def save_map(saliency, path):
    """Write a saliency map as 8-bit P5 after per-map min-max scaling; a
    constant map writes as all zeros."""
    arr = np.asarray(saliency.data if isinstance(saliency, Tensor) else saliency,
                     dtype=np.float64)
    arr = arr.reshape(arr.shape[-2], arr.shape[-1])
    lo, hi = arr.min(), arr.max()
    scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def load_fixations(path, bounds=None):
    """Fixation file: one "row col" 0-indexed pair per line."""
    fixations = []
    bad_lines = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}: expected 'row col'", line=lineno)
            try:
                r, c = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{path}: non-integer coordinate", line=lineno) from None
            if bounds is not None:
                h, w = bounds
                if not (0 <= r < h and 0 <= c < w):
                    bad_lines.append(lineno)
                    continue
            fixations.append((r, c))
    if bad_lines:
        raise ContractError(
            f"{path}: fixation coordinates out of range on lines {bad_lines}")
    return fixations


@dataclass
class ManifestRecord:
    image: str
    gt: str | None = None
    fix: str | None = None
    teacher: str | None = None


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    split: str = ""

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def load_manifest(path, split=""):
    """JSON-lines manifest; every referenced path must exist and image paths
    must be unique."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: invalid JSON ({e.msg})", line=lineno) from None
            if "image" not in obj:
                raise ParseError(f"{path}: record missing 'image' key", line=lineno)
            rec = ManifestRecord(image=obj["image"], gt=obj.get("gt"),
                                 fix=obj.get("fix"), teacher=obj.get("teacher"))
            if rec.image in seen:
                raise ContractError(
                    f"{path}: duplicate image path '{rec.image}' (line {lineno})")
            seen.add(rec.image)
            for key in ("image", "gt", "fix", "teacher"):
                p = getattr(rec, key)
                if p is None:
                    continue
                full = p if os.path.isabs(p) else os.path.join(base, p)
                if not os.path.exists(full):
                    raise ContractError(
                        f"{path} line {lineno}: {key} file not found: {p}")
                setattr(rec, key, full)
            records.append(rec)
    return DatasetManifest(records=records, split=split)


HINT_SLOTS = tuple(f"teacher.hint.{i}" for i in range(4))
PSEUDO_MAP_SLOT = "teacher.pseudo_map"
PSEUDO_DIST_SLOT = "teacher.pseudo_dist"


def load_teacher_bundle(path):
    """Teacher supervision packed in the weight-file container under the
    reserved teacher.* names."""
    store = load_weights(path)
    hints = None
    if all(s in store for s in HINT_SLOTS):
        hints = [store.get(s) for s in HINT_SLOTS]
    bundle = TeacherBundle(
        hint_features=hints,
        pseudo_map=store.get(PSEUDO_MAP_SLOT) if PSEUDO_MAP_SLOT in store else None,
        pseudo_dist=store.get(PSEUDO_DIST_SLOT) if PSEUDO_DIST_SLOT in store else None,
    )
    return bundle.validate()


def save_teacher_bundle(bundle, path):
    from .network import WeightStore, save_weights

    store = WeightStore()
    if bundle.hint_features is not None:
        for slot, t in zip(HINT_SLOTS, bundle.hint_features):
            store.put(slot, t)
    if bundle.pseudo_map is not None:
        store.put(PSEUDO_MAP_SLOT, bundle.pseudo_map)
    if bundle.pseudo_dist is not None:
        store.put(PSEUDO_DIST_SLOT, bundle.pseudo_dist)
    save_weights(store, path)
