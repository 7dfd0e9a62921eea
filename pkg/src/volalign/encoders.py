"""Shared-space embedding producers.

Two towers meet in one d_model space: a frozen, seed-determined hashed-bag
text encoder (word identity is all the short templated captions need) and a
trainable patch + MLP image encoder for single slices. encode_slices runs the
image encoder over every slice of a volume and stacks the rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .config import TrainConfig
from .datapipe import Volume
from .diffmath import Param, Tape, Tensor
from .errors import InputError

INIT_STD = 0.02


@dataclass
class TextEncoderParams:
    """Frozen lookup table + projection; fully determined by the seed."""

    embed_table: Param  # [vocab x d_text]
    proj: Param         # [d_text x d_model]
    seed: int


@dataclass
class ImageEncoderParams:
    patch_proj: Param   # [patch*patch x d_hidden]
    mlp_hidden: Param   # [d_hidden x d_hidden]
    out_proj: Param     # [d_hidden x d_model]
    patch_size: int

    def params(self) -> list[Param]:
        return [self.patch_proj, self.mlp_hidden, self.out_proj]


@dataclass
class SliceStack:
    """Per-slice embeddings of one volume, one row per slice."""

    mat: Tensor  # [n x d_model]
    n: int


def init_text_encoder(cfg: TrainConfig, seed: int) -> TextEncoderParams:
    rng = dm.make_rng(seed, "init:text")
    table = rng.normal(0.0, INIT_STD, size=(cfg.vocab, cfg.d_text))
    proj = rng.normal(0.0, INIT_STD, size=(cfg.d_text, cfg.d_model))
    return TextEncoderParams(
        embed_table=Param(table, trainable=False, name="text.embed_table"),
        proj=Param(proj, trainable=False, name="text.proj"),
        seed=seed,
    )


def init_image_encoder(cfg: TrainConfig, seed: int) -> ImageEncoderParams:
    rng = dm.make_rng(seed, "init:image")
    p2 = cfg.patch_size * cfg.patch_size
    return ImageEncoderParams(
        patch_proj=Param(rng.normal(0.0, INIT_STD, size=(p2, cfg.d_hidden)),
                         name="image.patch_proj"),
        mlp_hidden=Param(rng.normal(0.0, INIT_STD, size=(cfg.d_hidden, cfg.d_hidden)),
                         name="image.mlp_hidden"),
        out_proj=Param(rng.normal(0.0, INIT_STD, size=(cfg.d_hidden, cfg.d_model)),
                       name="image.out_proj"),
        patch_size=cfg.patch_size,
    )


def encode_text(token_ids: list[int], params: TextEncoderParams) -> Tensor:
    """Mean of the looked-up embedding rows, projected into the shared space.

    Frozen path: never records on a tape. The mean is exactly rounded, so any
    permutation of the same token multiset gives a bitwise identical result.
    """
    if not token_ids:
        raise InputError("encode_text: empty token list")
    table = params.embed_table.value.data
    vocab = table.shape[0]
    for t in token_ids:
        if not 0 <= t < vocab:
            raise InputError(f"encode_text: token id {t} outside [0, {vocab})")
    rows = table[np.asarray(token_ids, dtype=np.intp)]
    bag = dm.mean_rows(Tensor(rows))
    return dm.vecmat(bag, params.proj)


def patchify(image, patch_size: int) -> Tensor:
    """Split an H x W image into non-overlapping flattened patches, row-major."""
    a = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"patchify expects a 2-D image, got shape {a.shape}")
    h, w = a.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise InputError(f"patch size {p} does not divide image shape {(h, w)}")
    patches = (a.reshape(h // p, p, w // p, p)
                .transpose(0, 2, 1, 3)
                .reshape((h // p) * (w // p), p * p))
    return Tensor(patches)


def encode_image2d(image, params: ImageEncoderParams, train_mode: bool = False,
                   dropout_rate: float = 0.0, rng=None, tape: Tape | None = None) -> Tensor:
    """Patch projection -> relu -> hidden layer -> relu -> mean over patches -> output.

    Dropout acts on the hidden activation in train mode only; eval mode is a
    pure function of the image and parameters.
    """
    patches = patchify(image, params.patch_size)  # constant w.r.t. params
    h1 = dm.relu(dm.matmul(patches, params.patch_proj, tape), tape)
    h2 = dm.relu(dm.matmul(h1, params.mlp_hidden, tape), tape)
    h2 = dm.dropout(h2, dropout_rate, train_mode, rng, tape)
    pooled = dm.mean_rows(h2, tape)
    return dm.vecmat(pooled, params.out_proj, tape)


def encode_slices(volume: Volume, params: ImageEncoderParams, s_max: int = 64,
                  train_mode: bool = False, dropout_rate: float = 0.0, rng=None,
                  tape: Tape | None = None) -> SliceStack:
    """Encode every slice of a volume; row i is encode_image2d of slice i."""
    n = volume.n
    if not 1 <= n <= s_max:
        raise InputError(f"encode_slices: slice count {n} outside [1, {s_max}]")
    rows = [encode_image2d(volume.voxels.data[i], params, train_mode,
                           dropout_rate, rng, tape) for i in range(n)]
    return SliceStack(mat=dm.stack_rows(rows, tape), n=n)
