"""Downstream evaluation: frozen-feature extraction, linear probing with
stratified cross-validation, cross-modal top-1 matching, and the
four-configuration ablation runner.

The probe recipe is fixed (full-batch gradient descent, 500 iterations, step
0.1, no regularization) so reports are reproducible; F1 is macro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datapipe as dp
from . import encoders as enc
from . import slice_pool as sp
from . import trainer as tr
from .config import TrainConfig
from .diffmath import make_rng
from .errors import (AmbiguityError, DependencyError, EvaluationError,
                     InputError, LoadError, StratificationError)

PROBE_ITERATIONS = 500
PROBE_STEP = 0.1


@dataclass
class EmbeddingRow:
    id: str
    label: int
    vec: np.ndarray


@dataclass
class EmbeddingTable:
    rows: list[EmbeddingRow]

    def __post_init__(self):
        ids = [r.id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise InputError("embedding table ids must be unique")
        dims = {r.vec.shape for r in self.rows}
        if len(dims) > 1:
            raise InputError(f"embedding table has mixed dimensionalities: {dims}")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows[0].vec.shape[0] if self.rows else 0

    def matrix(self) -> np.ndarray:
        return np.stack([r.vec for r in self.rows])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=int)


def extract_embeddings(ckpt: tr.Checkpoint, entries, data_root, pool_mode: str,
                       cfg: TrainConfig | None = None) -> EmbeddingTable:
    """One embedding per manifest entry, in manifest order, eval mode throughout."""
    if cfg is not None:
        tr.check_geometry(ckpt, cfg)
    if pool_mode not in sp.POOL_MODES:
        raise InputError(f"pool mode must be one of {sp.POOL_MODES}, got {pool_mode!r}")
    root = Path(data_root)
    size = ckpt.config.image_size
    rows = []
    for e in entries:
        vol = dp.preprocess_volume(dp.load_volume(root / e.path), size, size)
        stack = enc.encode_slices(vol, ckpt.image, s_max=ckpt.config.s_max)
        vec = sp.pool(stack, pool_mode, ckpt.adapter)
        rows.append(EmbeddingRow(id=e.id, label=e.label, vec=vec.data))
    return EmbeddingTable(rows)


def export_embeddings_csv(table: EmbeddingTable, path) -> None:
    d = table.dim
    header = "id,label," + ",".join(f"e{i}" for i in range(d))
    lines = [header]
    for r in table.rows:
        lines.append(f"{r.id},{r.label}," + ",".join(repr(float(v)) for v in r.vec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_embeddings_csv(path) -> EmbeddingTable:
    try:
        lines = Path(path).read_text().strip().splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read embeddings {path}: {exc}") from exc
    if not lines or not lines[0].startswith("id,label,"):
        raise LoadError(f"{path}: missing embedding CSV header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(EmbeddingRow(id=parts[0], label=int(parts[1]),
                                 vec=np.array([float(x) for x in parts[2:]])))
    return EmbeddingTable(rows)


# ---------------------------------------------------------------------------
# linear probing


@dataclass
class ProbeReport:
    fold_accuracy: list[float]
    fold_macro_f1: list[float]

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def accuracy_std(self) -> float:
        return float(np.std(self.fold_accuracy))

    @property
    def f1_mean(self) -> float:
        return float(np.mean(self.fold_macro_f1))

    @property
    def f1_std(self) -> float:
        return float(np.std(self.fold_macro_f1))

    def to_csv(self) -> str:
        lines = ["fold,accuracy,macro_f1"]
        for i, (a, f) in enumerate(zip(self.fold_accuracy, self.fold_macro_f1)):
            lines.append(f"{i},{a!r},{f!r}")
        lines.append(f"mean,{self.accuracy_mean!r},{self.f1_mean!r}")
        lines.append(f"std,{self.accuracy_std!r},{self.f1_std!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"{'fold':>6} {'accuracy':>10} {'macro-F1':>10}"]
        for i, (a, f) in enumerate(zip(self.fold_accuracy, self.fold_macro_f1)):
            lines.append(f"{i:>6} {a:>10.4f} {f:>10.4f}")
        lines.append(f"{'mean':>6} {self.accuracy_mean:>10.4f} {self.f1_mean:>10.4f}")
        lines.append(f"{'std':>6} {self.accuracy_std:>10.4f} {self.f1_std:>10.4f}")
        return "\n".join(lines) + "\n"


def _train_logistic(x: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    """Multinomial logistic regression: full-batch GD, fixed recipe."""
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    w = np.zeros((xa.shape[1], n_classes))
    onehot = np.eye(n_classes)[y]
    n = x.shape[0]
    for _ in range(PROBE_ITERATIONS):
        z = xa @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= PROBE_STEP * (xa.T @ (p - onehot)) / n
    return w


def _predict_logistic(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    return (xa @ w).argmax(axis=1)


def _macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def linear_probe_cv(table: EmbeddingTable, k: int = 5, seed: int = 0) -> ProbeReport:
    """Stratified seeded k-fold; a fresh probe per fold, scored on the held-out fold."""
    labels = table.labels()
    classes = np.unique(labels)
    if len(classes) < 2:
        raise EvaluationError("linear probe needs at least 2 classes")
    class_to_idx = {c: i for i, c in enumerate(classes)}
    y = np.array([class_to_idx[v] for v in labels])
    x = table.matrix()

    rng = make_rng(seed, "probe:folds")
    fold_of = np.empty(len(table), dtype=int)
    for c in range(len(classes)):
        members = np.flatnonzero(y == c)
        if len(members) < k:
            raise StratificationError(
                f"class {classes[c]} has {len(members)} members, fewer than {k} folds")
        members = members[rng.permutation(len(members))]
        for pos, idx in enumerate(members):
            fold_of[idx] = pos % k

    accs, f1s = [], []
    for f in range(k):
        test = fold_of == f
        w = _train_logistic(x[~test], y[~test], len(classes))
        pred = _predict_logistic(w, x[test])
        accs.append(float((pred == y[test]).mean()))
        f1s.append(_macro_f1(y[test], pred, len(classes)))
    return ProbeReport(fold_accuracy=accs, fold_macro_f1=f1s)


# ---------------------------------------------------------------------------
# cross-modal matching


@dataclass
class MatchReport:
    precision: float
    confusion: np.ndarray  # [true x predicted]

    def to_csv(self) -> str:
        c = self.confusion.shape[0]
        lines = [f"top1_precision,{self.precision!r}"]
        lines.append("true\\pred," + ",".join(str(j) for j in range(c)))
        for i in range(c):
            lines.append(f"{i}," + ",".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        c = self.confusion.shape[0]
        lines = [f"top-1 precision: {self.precision:.4f}", ""]
        lines.append("confusion (rows = true class, cols = predicted):")
        head = "     " + "".join(f"{j:>7}" for j in range(c))
        lines.append(head)
        for i in range(c):
            lines.append(f"{i:>5}" + "".join(f"{int(v):>7}" for v in self.confusion[i]))
        return "\n".join(lines) + "\n"


def _normalize_rows(a: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((a * a).sum(axis=1))
    return a / np.where(norms >= eps, norms, 1.0)[:, None]


def top1_match(images: EmbeddingTable, class_captions: list[dp.Caption],
               text_params: enc.TextEncoderParams) -> MatchReport:
    """Assign each image to the nearest caption by cosine; ties break to the
    lowest class id."""
    if not class_captions:
        raise InputError("top1_match: no candidate captions")
    seen: dict[tuple, int] = {}
    for c, cap in enumerate(class_captions):
        key = tuple(sorted(cap.token_ids))
        if key in seen:
            raise AmbiguityError(
                f"captions for classes {seen[key]} and {c} are identical after tokenization")
        seen[key] = c

    n_classes = len(class_captions)
    labels = images.labels()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"image labels must lie in [0, {n_classes}), got "
                         f"[{labels.min()}, {labels.max()}]")

    cap_mat = np.stack([enc.encode_text(c.token_ids, text_params).data
                        for c in class_captions])
    scores = _normalize_rows(images.matrix()) @ _normalize_rows(cap_mat).T
    pred = scores.argmax(axis=1)  # argmax returns the first (lowest) index on ties

    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(labels, pred):
        confusion[t, p] += 1
    precision = float((pred == labels).mean()) if labels.size else 0.0
    return MatchReport(precision=precision, confusion=confusion)


# ---------------------------------------------------------------------------
# ablation runner


ABLATION_CONFIGS = (
    "vanilla encoder + gap",
    "vanilla encoder + trained adapter",
    "fine-tuned encoder + gap",
    "fine-tuned encoder + trained adapter",
)


@dataclass
class AblationRow:
    config: str
    probe_accuracy: float
    probe_macro_f1: float
    match_precision: float


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def __post_init__(self):
        if [r.config for r in self.rows] != list(ABLATION_CONFIGS):
            raise InputError("ablation report must contain exactly the four standard rows")

    def to_csv(self) -> str:
        lines = ["config,probe_accuracy,probe_macro_f1,match_precision"]
        for r in self.rows:
            lines.append(f"{r.config},{r.probe_accuracy!r},{r.probe_macro_f1!r},"
                         f"{r.match_precision!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        w = max(len(r.config) for r in self.rows)
        lines = [f"{'configuration':<{w}} {'probe-acc':>10} {'macro-F1':>10} {'match-P@1':>10}"]
        for r in self.rows:
            lines.append(f"{r.config:<{w}} {r.probe_accuracy:>10.4f} "
                         f"{r.probe_macro_f1:>10.4f} {r.match_precision:>10.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class AblationData:
    """Corpora for the ablation: a 2D corpus to fine-tune the encoder and a 3D
    corpus to train the adapter and evaluate all four configurations."""

    root2d: Path | None
    entries2d: list[dp.ManifestEntry] | None
    root3d: Path
    entries3d: list[dp.ManifestEntry]
    captions3d: list[dp.Caption]


def _splits(entries):
    return ([e for e in entries if e.split == "train"],
            [e for e in entries if e.split == "val"],
            [e for e in entries if e.split == "test"])


def _cached_stage2(cfg, data, base_ckpt, workdir, name):
    if workdir is not None:
        path = Path(workdir) / name
        if path.is_file():
            return tr.load_checkpoint(path)
    train3d, val3d, _ = _splits(data.entries3d)
    out = Path(workdir) / name.removesuffix(".ckpt") if workdir is not None else None
    ckpt = tr.train_stage2(cfg, train3d, val3d, data.root3d, base_ckpt, out_dir=out)
    if workdir is not None:
        tr.save_checkpoint(ckpt, Path(workdir) / name)
    return ckpt


def run_ablation(data: AblationData, cfg: TrainConfig, workdir=None,
                 stage1_ckpt: tr.Checkpoint | None = None) -> AblationReport:
    """Evaluate the four encoder/pooling configurations on the 3D test split.

    Trains whatever is missing: the stage-1 encoder (unless supplied or cached
    in workdir) and one adapter per encoder variant. Configuration "vanilla
    encoder + gap" involves no training at all.
    """
    cfg.validate()
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)

    init_ckpt = tr.make_initial_checkpoint(cfg)

    if stage1_ckpt is None and workdir is not None:
        cached = Path(workdir) / "stage1.ckpt"
        if cached.is_file():
            stage1_ckpt = tr.load_checkpoint(cached)
    if stage1_ckpt is None:
        if data.entries2d is None or data.root2d is None:
            raise DependencyError(
                "no stage-1 checkpoint and no 2D corpus to train one; "
                "run the 2D training step first or provide its checkpoint")
        train2d, val2d, _ = _splits(data.entries2d)
        out = Path(workdir) / "stage1" if workdir is not None else None
        stage1_ckpt = tr.train_stage1(cfg, train2d, val2d, data.root2d, out_dir=out)
        if workdir is not None:
            tr.save_checkpoint(stage1_ckpt, Path(workdir) / "stage1.ckpt")
    else:
        tr.check_geometry(stage1_ckpt, cfg)

    adapter_vanilla = _cached_stage2(cfg, data, init_ckpt, workdir, "stage2_vanilla.ckpt")
    adapter_tuned = _cached_stage2(cfg, data, stage1_ckpt, workdir, "stage2_finetuned.ckpt")

    _, _, test3d = _splits(data.entries3d)
    if not test3d:
        raise EvaluationError("ablation needs a non-empty 3D test split")

    setups = [
        (ABLATION_CONFIGS[0], init_ckpt, "gap"),
        (ABLATION_CONFIGS[1], adapter_vanilla, "attention"),
        (ABLATION_CONFIGS[2], stage1_ckpt, "gap"),
        (ABLATION_CONFIGS[3], adapter_tuned, "attention"),
    ]
    rows = []
    for name, ckpt, mode in setups:
        table = extract_embeddings(ckpt, test3d, data.root3d, mode)
        probe = linear_probe_cv(table, k=5, seed=cfg.seed)
        match = top1_match(table, data.captions3d, ckpt.text)
        rows.append(AblationRow(config=name, probe_accuracy=probe.accuracy_mean,
                                probe_macro_f1=probe.f1_mean,
                                match_precision=match.precision))
    return AblationReport(rows=rows)
