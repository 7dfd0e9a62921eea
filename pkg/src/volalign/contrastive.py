"""Temperature-scaled cosine similarity logits and the InfoNCE objective.

Both embedding matrices are L2-normalized inside similarity_matrix, so the
logits are cosine similarities divided by the temperature; matching pairs sit
on the diagonal. The loss is batch-mean cross-entropy toward that diagonal,
averaged over both directions when symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import diffmath as dm
from .diffmath import Tape, Tensor
from .errors import BatchError, ConfigurationError, DimensionError, InputError


@dataclass
class LossConfig:
    tau: float = 0.07
    symmetric: bool = True

    def validate(self) -> "LossConfig":
        if self.tau <= 0.0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        return self


@dataclass
class SimilarityMatrix:
    logits: Tensor  # [N x N], entry ij = cos(img_i, txt_j) / tau
    tau: float


def similarity_matrix(img, txt, cfg: LossConfig, tape: Tape | None = None) -> SimilarityMatrix:
    """Cosine similarities of all image/text pairs, scaled by 1/tau."""
    cfg.validate()
    iv, tv = dm._val(img), dm._val(txt)
    if iv.ndim != 2 or tv.ndim != 2 or iv.shape[1] != tv.shape[1]:
        raise DimensionError(
            f"similarity_matrix: embedding shapes disagree: {iv.shape} vs {tv.shape}")
    if iv.shape[0] != tv.shape[0]:
        raise DimensionError(
            f"similarity_matrix: batch sizes differ: {iv.shape[0]} vs {tv.shape[0]}")
    if iv.shape[0] < 2:
        raise BatchError("similarity_matrix: need N >= 2 pairs for in-batch negatives")
    img_n = dm.l2_normalize_rows(img, tape=tape)
    txt_n = dm.l2_normalize_rows(txt, tape=tape)
    logits = dm.scale(dm.matmul(img_n, dm.transpose(txt_n, tape), tape), 1.0 / cfg.tau, tape)
    return SimilarityMatrix(logits=logits, tau=cfg.tau)


def _direction_loss(logits, tape: Tape | None) -> Tensor:
    # mean over rows of (logsumexp(row) - diagonal entry)
    lse = dm.logsumexp_rows(logits, tape)
    diag = dm.take_diag(logits, tape)
    return dm.mean_all(dm.sub(lse, diag, tape), tape)


def info_nce(sim: SimilarityMatrix, cfg: LossConfig, tape: Tape | None = None) -> Tensor:
    """Cross-entropy toward the diagonal; image->text plus (optionally) text->image."""
    lv = sim.logits.data if isinstance(sim.logits, Tensor) else sim.logits
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1]:
        raise InputError(f"info_nce: logits must be square, got shape {lv.shape}")
    i2t = _direction_loss(sim.logits, tape)
    if not cfg.symmetric:
        return i2t
    t2i = _direction_loss(dm.transpose(sim.logits, tape), tape)
    return dm.scale(dm.add(i2t, t2i, tape), 0.5, tape)


def batch_loss(img, txt, cfg: LossConfig, tape: Tape | None = None) -> Tensor:
    """similarity_matrix followed by info_nce; the training-step composite."""
    return info_nce(similarity_matrix(img, txt, cfg, tape), cfg, tape)
