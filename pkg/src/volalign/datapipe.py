"""Dataset manifests, the VOL1 sample container, preprocessing, captions,
and synthetic corpus generation.

Manifests are JSON lists of entry records; samples are little-endian VOL1
files (magic, n/H/W as u32, then float32 voxels, slice-major). Preprocessing
is always resize first, z-score second, per slice.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffmath import Tensor, fnv1a64, make_rng
from .errors import ConfigurationError, FormatError, InputError, LoadError

DEFAULT_VOCAB = 4096

_KINDS = ("2d", "3d")
_SPLITS = ("train", "val", "test")
_MANIFEST_FIELDS = ("id", "path", "kind", "body_region", "modality", "condition", "label", "split")


@dataclass
class ManifestEntry:
    id: str
    path: str
    kind: str
    body_region: str
    modality: str
    condition: str | None
    label: int
    split: str


@dataclass
class Volume:
    """An n x H x W voxel block; 2D samples use n = 1."""

    voxels: Tensor

    def __post_init__(self):
        if self.voxels.data.ndim != 3 or self.voxels.data.shape[0] < 1:
            raise InputError(f"volume must be n x H x W with n >= 1, got {self.voxels.shape}")
        if not np.isfinite(self.voxels.data).all():
            raise InputError("volume contains non-finite voxels")

    @property
    def n(self) -> int:
        return self.voxels.data.shape[0]


@dataclass
class Caption:
    text: str
    token_ids: list[int]


# ---------------------------------------------------------------------------
# manifests


def _check_entry(raw: dict, index: int) -> ManifestEntry:
    where = f"entry {index}"
    if not isinstance(raw, dict):
        raise LoadError(f"{where}: expected an object, got {type(raw).__name__}")
    missing = [k for k in _MANIFEST_FIELDS if k != "condition" and k not in raw]
    if missing:
        raise LoadError(f"{where}: missing fields {missing}")
    unknown = [k for k in raw if k not in _MANIFEST_FIELDS]
    if unknown:
        raise LoadError(f"{where}: unknown fields {unknown}")
    e = ManifestEntry(
        id=raw["id"], path=raw["path"], kind=raw["kind"],
        body_region=raw["body_region"], modality=raw["modality"],
        condition=raw.get("condition"), label=raw["label"], split=raw["split"],
    )
    if not isinstance(e.id, str) or not e.id:
        raise LoadError(f"{where}: id must be a non-empty string")
    if e.kind not in _KINDS:
        raise LoadError(f"{where} (id {e.id!r}): kind must be one of {_KINDS}, got {e.kind!r}")
    if e.split not in _SPLITS:
        raise LoadError(f"{where} (id {e.id!r}): split must be one of {_SPLITS}, got {e.split!r}")
    if not isinstance(e.label, int) or isinstance(e.label, bool) or e.label < 0:
        raise LoadError(f"{where} (id {e.id!r}): label must be an integer >= 0")
    if e.condition is not None and not isinstance(e.condition, str):
        raise LoadError(f"{where} (id {e.id!r}): condition must be a string or null")
    return e


def load_manifest(path) -> list[ManifestEntry]:
    """Load and validate a manifest; entry paths are resolved relative to it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {path} line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, list):
        raise LoadError(f"manifest {path}: top level must be a list of entries")

    entries = [_check_entry(item, i) for i, item in enumerate(raw)]
    seen: dict[str, int] = {}
    for i, e in enumerate(entries):
        if e.id in seen:
            raise LoadError(f"entry {i}: duplicate id {e.id!r} (first at entry {seen[e.id]})")
        seen[e.id] = i
        sample = path.parent / e.path
        if not sample.is_file():
            raise LoadError(f"entry {i} (id {e.id!r}): sample file not found: {sample}")
    return entries


def save_manifest(entries: list[ManifestEntry], path) -> None:
    records = []
    for e in entries:
        rec = {k: getattr(e, k) for k in _MANIFEST_FIELDS}
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


# ---------------------------------------------------------------------------
# VOL1 container

_VOL1_MAGIC = b"VOL1"
_VOL1_HEADER = struct.Struct("<III")


def save_volume(volume: Volume, path) -> None:
    v = volume.voxels.data
    n, h, w = v.shape
    payload = v.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_VOL1_MAGIC)
        fh.write(_VOL1_HEADER.pack(n, h, w))
        fh.write(payload)


def load_volume(path) -> Volume:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _VOL1_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_VOL1_MAGIC!r}")
    if len(blob) < 4 + _VOL1_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    n, h, w = _VOL1_HEADER.unpack_from(blob, 4)
    if n < 1 or h < 1 or w < 1:
        raise FormatError(f"{path}: invalid dimensions {(n, h, w)}")
    expected = 4 + _VOL1_HEADER.size + 4 * n * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=4 + _VOL1_HEADER.size)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite voxel values")
    return Volume(Tensor(data.astype(np.float64).reshape(n, h, w)))


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with pixel centers at (i + 0.5) / size and border replicate."""
    a = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"resize_bilinear expects a 2-D image, got shape {a.shape}")
    h, w = a.shape
    if out_h < 1 or out_w < 1:
        raise InputError(f"target size must be >= 1, got {(out_h, out_w)}")

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y0c = np.clip(y0.astype(int), 0, h - 1)
    y1c = np.clip(y0.astype(int) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(int), 0, w - 1)
    x1c = np.clip(x0.astype(int) + 1, 0, w - 1)

    v00 = a[np.ix_(y0c, x0c)]
    v01 = a[np.ix_(y0c, x1c)]
    v10 = a[np.ix_(y1c, x0c)]
    v11 = a[np.ix_(y1c, x1c)]
    out = ((1 - fy) * (1 - fx) * v00 + (1 - fy) * fx * v01
           + fy * (1 - fx) * v10 + fy * fx * v11)
    return Tensor(out)


def zscore(img, eps: float = 1e-8) -> Tensor:
    """Standardize to zero mean and unit population std; constant images map to zeros."""
    a = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    mean = a.mean()
    std = a.std()
    return Tensor((a - mean) / max(std, eps))


def preprocess_volume(volume: Volume, out_h: int, out_w: int, eps: float = 1e-8) -> Volume:
    """Resize then z-score each slice, in that order."""
    slices = [zscore(resize_bilinear(volume.voxels.data[i], out_h, out_w), eps).data
              for i in range(volume.n)]
    return Volume(Tensor(np.stack(slices, axis=0)))


# ---------------------------------------------------------------------------
# captions and tokens


def build_caption(entry: ManifestEntry) -> str:
    if not entry.body_region or not entry.body_region.strip():
        raise InputError(f"entry {entry.id!r}: body_region is required for a caption")
    if not entry.modality or not entry.modality.strip():
        raise InputError(f"entry {entry.id!r}: modality is required for a caption")
    base = f"{entry.body_region} {entry.modality}"
    if entry.condition:
        return f"{base} with {entry.condition}"
    return base


def tokenize(text: str, vocab: int = DEFAULT_VOCAB) -> list[int]:
    """Lowercase, split on non-alphanumeric runs, hash each word (FNV-1a mod vocab)."""
    words = re.findall(r"[a-z0-9]+", text.lower())
    if not words:
        raise InputError(f"no alphanumeric content to tokenize in {text!r}")
    return [fnv1a64(w) % vocab for w in words]


def caption_for(entry: ManifestEntry, vocab: int = DEFAULT_VOCAB) -> Caption:
    text = build_caption(entry)
    return Caption(text=text, token_ids=tokenize(text, vocab))


# ---------------------------------------------------------------------------
# synthetic corpora

_PATTERNS = ("square", "stripe", "disk", "blank")

_SPLIT_FRACTIONS = (("train", 0.7), ("val", 0.1), ("test", 0.2))


@dataclass
class SynthSpec:
    """Parameters of a synthetic corpus.

    family "pattern": the class is a geometric marker (bright square, stripe,
    disk, or nothing) drawn at a fixed place on one randomly chosen slice.
    family "order-coded": all samples share the same multiset of slices and
    the class is encoded purely by which slice sits at position 0, so any
    order-invariant pooling is provably uninformative.
    """

    family: str
    classes: int = 2
    per_class: int = 200
    slices: int = 8
    height: int = 16
    width: int = 16
    kind: str = "3d"
    noise: float = 0.1

    def validate(self) -> None:
        if self.family not in ("pattern", "order-coded"):
            raise ConfigurationError(f"unknown synth family {self.family!r}")
        if self.kind not in _KINDS:
            raise ConfigurationError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.per_class < 5:
            raise ConfigurationError("need at least 5 samples per class")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("images must be at least 8 x 8")
        if self.family == "pattern" and self.classes > len(_PATTERNS):
            raise ConfigurationError(f"pattern family supports at most {len(_PATTERNS)} classes")
        if self.kind == "3d" and self.slices < 2:
            raise ConfigurationError("3d samples need at least 2 slices")
        if self.family == "order-coded":
            if self.kind != "3d":
                raise ConfigurationError("order-coded family is 3d only")
            if self.classes > self.slices:
                raise ConfigurationError("order-coded needs classes <= slices")


def _draw_pattern(img: np.ndarray, pattern: str) -> None:
    h, w = img.shape
    s = min(h, w)
    if pattern == "square":
        side = max(2, s // 4)
        img[s // 8: s // 8 + side, s // 8: s // 8 + side] += 2.0
    elif pattern == "stripe":
        band = max(2, h // 4)
        top = (h - band) // 2
        img[top: top + band, :] += 4.0
    elif pattern == "disk":
        r = s // 4
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - h // 2) ** 2 + (xx - w // 2) ** 2 <= r * r
        img[mask] += 8.0
    elif pattern == "blank":
        pass
    else:
        raise ConfigurationError(f"unknown pattern {pattern!r}")


def _class_meta(spec: SynthSpec, label: int) -> dict:
    if spec.family == "pattern":
        pattern = _PATTERNS[label]
        condition = None if pattern == "blank" else f"{pattern} marker"
        return {"body_region": "Chest", "modality": "CT", "condition": condition,
                "pattern": pattern}
    letter = chr(ord("A") + label)
    return {"body_region": "Brain", "modality": "MRI", "condition": f"Sequence {letter}",
            "pattern": None}


def _base_slices(spec: SynthSpec, seed: int) -> np.ndarray:
    """Order-coded slice types: a bright band per type plus fixed texture."""
    n, h, w = spec.slices, spec.height, spec.width
    out = np.zeros((n, h, w))
    for j in range(n):
        r = make_rng(seed, f"slicetype:{j}")
        out[j] = r.normal(0.0, 0.25, size=(h, w))
        top = (j * h) // n
        bottom = ((j + 1) * h) // n
        out[j, top:bottom, :] += 3.0
    return out


def _make_sample(spec: SynthSpec, seed: int, label: int, index: int,
                 base: np.ndarray | None) -> Volume:
    r = make_rng(seed, f"sample:{label}:{index}")
    n = 1 if spec.kind == "2d" else spec.slices
    if spec.family == "pattern":
        vox = r.normal(0.0, spec.noise, size=(n, spec.height, spec.width))
        pattern = _PATTERNS[label]
        _draw_pattern(vox[int(r.integers(n))], pattern)
        return Volume(Tensor(vox))
    # order-coded: no per-sample noise, identical multiset for every sample
    others = [j for j in range(spec.slices) if j != label]
    order = [label] + [others[k] for k in r.permutation(len(others))]
    return Volume(Tensor(base[order].copy()))


def _split_for(index: int, per_class: int) -> str:
    n_train = int(per_class * _SPLIT_FRACTIONS[0][1])
    n_val = int(per_class * _SPLIT_FRACTIONS[1][1])
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def synth_dataset(spec: SynthSpec, seed: int, out_dir) -> list[ManifestEntry]:
    """Generate a corpus under out_dir: samples/, manifest.json, captions.json."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)

    base = _base_slices(spec, seed) if spec.family == "order-coded" else None
    entries: list[ManifestEntry] = []
    captions = []
    for label in range(spec.classes):
        meta = _class_meta(spec, label)
        for i in range(spec.per_class):
            sid = f"c{label}_{i:04d}"
            rel = f"samples/{sid}.vol"
            vol = _make_sample(spec, seed, label, i, base)
            save_volume(vol, out_dir / rel)
            entries.append(ManifestEntry(
                id=sid, path=rel, kind=spec.kind,
                body_region=meta["body_region"], modality=meta["modality"],
                condition=meta["condition"], label=label,
                split=_split_for(i, spec.per_class),
            ))
        cap_entry = ManifestEntry(id=f"class{label}", path="", kind=spec.kind,
                                  body_region=meta["body_region"], modality=meta["modality"],
                                  condition=meta["condition"], label=label, split="train")
        captions.append({"label": label, "body_region": meta["body_region"],
                         "modality": meta["modality"], "condition": meta["condition"],
                         "text": build_caption(cap_entry)})

    save_manifest(entries, out_dir / "manifest.json")
    (out_dir / "captions.json").write_text(json.dumps(captions, indent=2) + "\n")
    return entries


def load_captions(path, vocab: int = DEFAULT_VOCAB) -> list[Caption]:
    """Read a captions.json written by synth_dataset; one caption per class, by label."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read captions {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise LoadError(f"captions {path}: expected a non-empty list")
    by_label = {}
    for item in raw:
        if "label" not in item or "text" not in item:
            raise LoadError(f"captions {path}: each record needs label and text")
        by_label[int(item["label"])] = item["text"]
    labels = sorted(by_label)
    if labels != list(range(len(labels))):
        raise LoadError(f"captions {path}: labels must be 0..{len(labels) - 1}")
    return [Caption(text=by_label[c], token_ids=tokenize(by_label[c], vocab)) for c in labels]
