"""Two-stage contrastive training and checkpointing.

Stage 1 fine-tunes the 2D image encoder against the frozen text encoder on
2D samples; stage 2 freezes both encoders and trains only the slice-pooling
adapter on volumes. Both stages share one engine: seeded shuffling, Adam with
decoupled weight decay, cosine-annealed learning rate, per-epoch checkpoints,
and early stopping on validation loss. Runs are bitwise reproducible for a
fixed config and seed, and an interrupted run resumed from any epoch
checkpoint reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import contrastive as ct
from . import datapipe as dp
from . import diffmath as dm
from . import encoders as enc
from . import slice_pool as sp
from .config import TrainConfig
from .diffmath import Param, Tape, Tensor
from .errors import (CheckpointError, CompatibilityError, ConfigurationError,
                     InputError)

CHECKPOINT_VERSION = 1
_MAGIC = b"RCKP"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr0 (t = 0) down to lr_min (t = epochs).

    The endpoints are returned exactly rather than through the cosine
    expression, so cosine_lr(0) == lr0 bit for bit.
    """
    if t < 0 or (cfg.epochs > 0 and t > cfg.epochs):
        raise InputError(f"epoch index {t} outside [0, {cfg.epochs}]")
    if t == 0 or cfg.epochs == 0:
        return cfg.lr0
    if t == cfg.epochs:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.epochs))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    step: int
    moments: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (m, v)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.step, {k: (m.copy(), v.copy())
                                          for k, (m, v) in self.moments.items()})


class Adam:
    """Adam with decoupled weight decay over the trainable params it was given."""

    def __init__(self, params: list[Param], weight_decay: float = 0.0,
                 state: OptimizerState | None = None):
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError("optimizer params must have unique names")
        self.weight_decay = weight_decay
        if state is None:
            self.step_count = 0
            self.moments = {p.name: (np.zeros_like(p.value.data), np.zeros_like(p.value.data))
                            for p in self.params}
        else:
            self.step_count = state.step
            self.moments = {k: (m.copy(), v.copy()) for k, (m, v) in state.moments.items()}
            for p in self.params:
                if p.name not in self.moments:
                    raise CheckpointError(f"optimizer state missing moments for {p.name}")

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - ADAM_BETA1 ** t
        bc2 = 1.0 - ADAM_BETA2 ** t
        for p in self.params:
            g = p.grad.data
            m, v = self.moments[p.name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            if self.weight_decay:
                update = update + self.weight_decay * p.value.data
            p.value.data -= lr * update

    def state(self) -> OptimizerState:
        return OptimizerState(self.step_count,
                              {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()})


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to evaluate or to resume training: all parameter
    groups, optimizer moments, progress counters, and the training RNG state."""

    version: int
    stage: int
    epoch: int  # completed epochs
    config: TrainConfig
    text: enc.TextEncoderParams
    image: enc.ImageEncoderParams
    adapter: sp.AdapterParams
    optimizer: OptimizerState | None = None
    best_val_loss: float | None = None
    best_epoch: int | None = None
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def model_params(self) -> list[Param]:
        return ([self.text.embed_table, self.text.proj]
                + self.image.params() + self.adapter.params())


def init_model(cfg: TrainConfig, seed: int):
    text = enc.init_text_encoder(cfg, seed)
    image = enc.init_image_encoder(cfg, seed)
    adapter = sp.init_adapter(cfg, seed)
    return text, image, adapter


def make_initial_checkpoint(cfg: TrainConfig, stage: int = 1) -> Checkpoint:
    """A fresh, untrained checkpoint determined entirely by cfg.seed."""
    cfg.validate()
    text, image, adapter = init_model(cfg, cfg.seed)
    return Checkpoint(version=CHECKPOINT_VERSION, stage=stage, epoch=0, config=cfg,
                      text=text, image=image, adapter=adapter)


def _copy_param(p: Param) -> Param:
    out = Param(p.value.data.copy(), trainable=p.trainable, name=p.name)
    out.grad.data[...] = p.grad.data
    return out


def snapshot_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Deep copy so that later training steps do not mutate saved state."""
    text = enc.TextEncoderParams(_copy_param(ckpt.text.embed_table),
                                 _copy_param(ckpt.text.proj), ckpt.text.seed)
    image = enc.ImageEncoderParams(_copy_param(ckpt.image.patch_proj),
                                   _copy_param(ckpt.image.mlp_hidden),
                                   _copy_param(ckpt.image.out_proj),
                                   ckpt.image.patch_size)
    adapter = sp.AdapterParams(
        pe_table=_copy_param(ckpt.adapter.pe_table),
        heads=[sp.HeadParams(_copy_param(h.wq), _copy_param(h.wk), _copy_param(h.wv))
               for h in ckpt.adapter.heads],
        wo=_copy_param(ckpt.adapter.wo),
        num_heads=ckpt.adapter.num_heads, d_head=ckpt.adapter.d_head,
        dropout_rate=ckpt.adapter.dropout_rate)
    return Checkpoint(version=ckpt.version, stage=ckpt.stage, epoch=ckpt.epoch,
                      config=ckpt.config, text=text, image=image, adapter=adapter,
                      optimizer=ckpt.optimizer.copy() if ckpt.optimizer else None,
                      best_val_loss=ckpt.best_val_loss, best_epoch=ckpt.best_epoch,
                      rng_state=json.loads(json.dumps(ckpt.rng_state)) if ckpt.rng_state else None,
                      history=[dict(h) for h in ckpt.history])


def _pack_tensor(a: np.ndarray) -> bytes:
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f8").tobytes(order="C")


def _unpack_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise CheckpointError("tensor section truncated")
    (ndim,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + 4 * ndim:
        raise CheckpointError("tensor section truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    ofs = 4 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != ofs + 8 * count:
        raise CheckpointError("tensor payload length mismatch")
    return np.frombuffer(buf, dtype="<f8", offset=ofs).astype(np.float64).reshape(shape)


def _rng_state_to_json(state: dict) -> dict:
    def conv(x):
        if isinstance(x, np.ndarray):
            return [int(v) for v in x.tolist()]
        if isinstance(x, (np.integer,)):
            return int(x)
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(state)


def _rng_state_from_json(state: dict) -> dict:
    out = dict(state)
    inner = dict(out["state"])
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    out["state"] = inner
    out["buffer"] = np.array(out["buffer"], dtype=np.uint64)
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_dict(),
        "best_val_loss": ckpt.best_val_loss,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer else None,
        "text_seed": ckpt.text.seed,
    }
    sections: list[tuple[str, bytes]] = [
        ("meta", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    ]
    for p in ckpt.model_params():
        sections.append((f"param:{p.name}", _pack_tensor(p.value.data)))
    if ckpt.optimizer is not None:
        for name in sorted(ckpt.optimizer.moments):
            m, v = ckpt.optimizer.moments[name]
            sections.append((f"adam.m:{name}", _pack_tensor(m)))
            sections.append((f"adam.v:{name}", _pack_tensor(v)))

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, payload in sections:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _read_sections(blob: bytes, path) -> dict[str, bytes]:
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    sections: dict[str, bytes] = {}
    ofs = 8
    while ofs < len(blob):
        if ofs + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated section header")
        (nlen,) = struct.unpack_from("<I", blob, ofs)
        ofs += 4
        if ofs + nlen + 8 > len(blob):
            raise CheckpointError(f"{path}: truncated section name or length")
        name = blob[ofs:ofs + nlen].decode("utf-8")
        ofs += nlen
        (plen,) = struct.unpack_from("<Q", blob, ofs)
        ofs += 8
        if ofs + plen > len(blob):
            raise CheckpointError(f"{path}: truncated payload for section {name!r}")
        sections[name] = blob[ofs:ofs + plen]
        ofs += plen
    return sections


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    sections = _read_sections(blob, path)
    if "meta" not in sections:
        raise CheckpointError(f"{path}: missing meta section")
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt meta section: {exc}") from exc

    cfg = TrainConfig.from_dict(meta["config"])

    def arr(name: str) -> np.ndarray:
        key = f"param:{name}"
        if key not in sections:
            raise CheckpointError(f"{path}: missing parameter section {name}")
        return _unpack_tensor(sections[key])

    text = enc.TextEncoderParams(
        embed_table=Param(arr("text.embed_table"), trainable=False, name="text.embed_table"),
        proj=Param(arr("text.proj"), trainable=False, name="text.proj"),
        seed=meta["text_seed"])
    image = enc.ImageEncoderParams(
        patch_proj=Param(arr("image.patch_proj"), name="image.patch_proj"),
        mlp_hidden=Param(arr("image.mlp_hidden"), name="image.mlp_hidden"),
        out_proj=Param(arr("image.out_proj"), name="image.out_proj"),
        patch_size=cfg.patch_size)
    heads = []
    for h in range(cfg.heads):
        heads.append(sp.HeadParams(
            wq=Param(arr(f"adapter.h{h}.wq"), name=f"adapter.h{h}.wq"),
            wk=Param(arr(f"adapter.h{h}.wk"), name=f"adapter.h{h}.wk"),
            wv=Param(arr(f"adapter.h{h}.wv"), name=f"adapter.h{h}.wv")))
    adapter = sp.AdapterParams(
        pe_table=Param(arr("adapter.pe_table"), name="adapter.pe_table"),
        heads=heads, wo=Param(arr("adapter.wo"), name="adapter.wo"),
        num_heads=cfg.heads, d_head=cfg.d_head, dropout_rate=cfg.dropout_rate)

    optimizer = None
    if meta.get("optimizer_step") is not None:
        moments = {}
        for key in sections:
            if key.startswith("adam.m:"):
                name = key[len("adam.m:"):]
                vkey = f"adam.v:{name}"
                if vkey not in sections:
                    raise CheckpointError(f"{path}: missing second moment for {name}")
                moments[name] = (_unpack_tensor(sections[key]), _unpack_tensor(sections[vkey]))
        optimizer = OptimizerState(step=meta["optimizer_step"], moments=moments)

    return Checkpoint(version=CHECKPOINT_VERSION, stage=meta["stage"], epoch=meta["epoch"],
                      config=cfg, text=text, image=image, adapter=adapter,
                      optimizer=optimizer, best_val_loss=meta["best_val_loss"],
                      best_epoch=meta["best_epoch"], rng_state=meta["rng_state"],
                      history=meta["history"])


def check_geometry(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    mismatches = {k: (getattr(ckpt.config, k), getattr(cfg, k))
                  for k in TrainConfig.GEOMETRY
                  if getattr(ckpt.config, k) != getattr(cfg, k)}
    if mismatches:
        raise CompatibilityError(f"checkpoint geometry differs from config: {mismatches}")


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class _Item:
    inputs: object       # preprocessed slice (stage 1) or frozen SliceStack (stage 2)
    text_vec: np.ndarray


def _require_kind(entries: list[dp.ManifestEntry], kind: str) -> None:
    for e in entries:
        if e.kind != kind:
            raise InputError(f"entry {e.id!r} has kind {e.kind!r}, expected {kind!r}")


def _text_vectors(entries, text_params, vocab) -> list[np.ndarray]:
    cache: dict[str, np.ndarray] = {}
    out = []
    for e in entries:
        caption = dp.build_caption(e)
        if caption not in cache:
            ids = dp.tokenize(caption, vocab)
            cache[caption] = enc.encode_text(ids, text_params).data
        out.append(cache[caption])
    return out


def _load_slices(entries, data_root, cfg) -> list[dp.Volume]:
    root = Path(data_root)
    vols = []
    for e in entries:
        vol = dp.load_volume(root / e.path)
        if e.kind == "2d" and vol.n != 1:
            raise InputError(f"entry {e.id!r} is 2d but its sample has {vol.n} slices")
        vols.append(dp.preprocess_volume(vol, cfg.image_size, cfg.image_size))
    return vols


def _stage1_items(entries, data_root, cfg, text_params) -> list[_Item]:
    vols = _load_slices(entries, data_root, cfg)
    texts = _text_vectors(entries, text_params, cfg.vocab)
    return [_Item(inputs=v.voxels.data[0], text_vec=t) for v, t in zip(vols, texts)]


def _stage2_items(entries, data_root, cfg, text_params, image_params) -> list[_Item]:
    vols = _load_slices(entries, data_root, cfg)
    texts = _text_vectors(entries, text_params, cfg.vocab)
    items = []
    for v, t in zip(vols, texts):
        stack = enc.encode_slices(v, image_params, s_max=cfg.s_max)  # frozen, eval mode
        items.append(_Item(inputs=stack, text_vec=t))
    return items


# ---------------------------------------------------------------------------
# training engine


def _batch_loss(items: list[_Item], idxs, forward_row, cfg, train_mode, rng, tape):
    rows = [forward_row(items[i], train_mode, rng, tape) for i in idxs]
    img = dm.stack_rows(rows, tape)
    txt = Tensor(np.stack([items[i].text_vec for i in idxs]))
    loss_cfg = ct.LossConfig(tau=cfg.tau, symmetric=cfg.symmetric)
    return ct.batch_loss(img, txt, loss_cfg, tape)


def _mean_val_loss(items: list[_Item], forward_row, cfg) -> float:
    losses = []
    n = len(items)
    for start in range(0, n, cfg.batch_size):
        idxs = range(start, min(start + cfg.batch_size, n))
        if len(idxs) < 2:
            break
        losses.append(_batch_loss(items, idxs, forward_row, cfg, False, None, None).item())
    if not losses:
        raise ConfigurationError("validation set needs at least 2 samples")
    return math.fsum(losses) / len(losses)


def _write_loss_csv(history: list[dict], path) -> None:
    lines = ["epoch,lr,train_loss,val_loss"]
    for h in history:
        lines.append(f"{h['epoch']},{h['lr']!r},{h['train_loss']!r},{h['val_loss']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _run_stage(cfg: TrainConfig, stage: int, ckpt: Checkpoint, items, val_items,
               forward_row, trainables: list[Param], out_dir, resume: Checkpoint | None,
               label: str) -> Checkpoint:
    if len(items) < cfg.batch_size:
        raise ConfigurationError(
            f"{len(items)} training samples is fewer than batch size {cfg.batch_size}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = dm.make_rng(cfg.seed, f"train:stage{stage}")
    if resume is not None:
        start_epoch = resume.epoch
        history = [dict(h) for h in resume.history]
        best_val = resume.best_val_loss
        best_epoch = resume.best_epoch
        adam = Adam(trainables, weight_decay=cfg.weight_decay, state=resume.optimizer)
        if resume.rng_state is not None:
            rng.bit_generator.state = _rng_state_from_json(resume.rng_state)
    else:
        start_epoch = 0
        history = []
        best_val = None
        best_epoch = None
        adam = Adam(trainables, weight_decay=cfg.weight_decay)

    ckpt.stage = stage
    best_ckpt = None

    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(len(items))
        batch_losses = []
        n_batches = len(items) // cfg.batch_size
        for b in range(n_batches):
            idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            tape = Tape()
            loss = _batch_loss(items, idxs, forward_row, cfg, True, rng, tape)
            batch_losses.append(loss.item())
            dm.zero_grads(trainables)
            tape.backward(loss)
            adam.step(lr)
        train_loss = math.fsum(batch_losses) / len(batch_losses)
        val_loss = _mean_val_loss(val_items, forward_row, cfg)
        history.append({"epoch": epoch, "lr": lr,
                        "train_loss": train_loss, "val_loss": val_loss})

        improved = best_val is None or val_loss < best_val
        if improved:
            best_val = val_loss
            best_epoch = epoch

        ckpt.epoch = epoch + 1
        ckpt.optimizer = adam.state()
        ckpt.best_val_loss = best_val
        ckpt.best_epoch = best_epoch
        ckpt.rng_state = _rng_state_to_json(rng.bit_generator.state)
        ckpt.history = history
        snap = snapshot_checkpoint(ckpt)
        if out_dir is not None:
            save_checkpoint(snap, out_dir / f"epoch_{epoch + 1:04d}.ckpt")
            _write_loss_csv(history, out_dir / "loss.csv")
        if improved:
            best_ckpt = snap
        if epoch - best_epoch >= cfg.patience:
            break

    if best_ckpt is None:
        # either zero epochs (return the starting state) or a resumed run in
        # which no new epoch improved; recover the best epoch from disk if we can
        if best_epoch is not None and out_dir is not None:
            best_path = out_dir / f"epoch_{best_epoch + 1:04d}.ckpt"
            if best_path.is_file():
                best_ckpt = load_checkpoint(best_path)
        if best_ckpt is None:
            best_ckpt = snapshot_checkpoint(ckpt)
    if out_dir is not None:
        save_checkpoint(best_ckpt, out_dir / f"{label}.ckpt")
    return best_ckpt


def train_stage1(cfg: TrainConfig, train_entries, val_entries, data_root,
                 out_dir=None, resume: Checkpoint | None = None) -> Checkpoint:
    """Contrastively fine-tune the 2D image encoder; the text tower stays frozen.

    Returns the best-validation checkpoint; per-epoch checkpoints and a loss
    CSV are written when out_dir is given.
    """
    cfg.validate()
    _require_kind(train_entries, "2d")
    _require_kind(val_entries, "2d")

    if resume is not None:
        check_geometry(resume, cfg)
        if resume.stage != 1:
            raise CompatibilityError(f"cannot resume stage 1 from a stage-{resume.stage} checkpoint")
        ckpt = snapshot_checkpoint(resume)
    else:
        ckpt = make_initial_checkpoint(cfg, stage=1)

    items = _stage1_items(train_entries, data_root, cfg, ckpt.text)
    val_items = _stage1_items(val_entries, data_root, cfg, ckpt.text)

    def forward_row(item, train_mode, rng, tape):
        return enc.encode_image2d(item.inputs, ckpt.image, train_mode,
                                  cfg.dropout_rate, rng, tape)

    return _run_stage(cfg, 1, ckpt, items, val_items, forward_row,
                      ckpt.image.params(), out_dir, resume, "stage1")


def train_stage2(cfg: TrainConfig, train_entries, val_entries, data_root,
                 stage1_ckpt: Checkpoint, out_dir=None,
                 resume: Checkpoint | None = None) -> Checkpoint:
    """Train the slice-pooling adapter on volumes; both encoders are frozen.

    Slice stacks are embedded once up front (the encoder is frozen), so each
    epoch touches only the adapter parameters.
    """
    cfg.validate()
    _require_kind(train_entries, "3d")
    _require_kind(val_entries, "3d")
    check_geometry(stage1_ckpt, cfg)

    if resume is not None:
        check_geometry(resume, cfg)
        if resume.stage != 2:
            raise CompatibilityError(f"cannot resume stage 2 from a stage-{resume.stage} checkpoint")
        ckpt = snapshot_checkpoint(resume)
    else:
        ckpt = snapshot_checkpoint(stage1_ckpt)
        ckpt.optimizer = None
        ckpt.best_val_loss = None
        ckpt.best_epoch = None
        ckpt.rng_state = None
        ckpt.history = []
        ckpt.epoch = 0
    ckpt.adapter.dropout_rate = cfg.dropout_rate
    for p in ckpt.image.params():  # stage-2 freeze contract
        p.trainable = False

    items = _stage2_items(train_entries, data_root, cfg, ckpt.text, ckpt.image)
    val_items = _stage2_items(val_entries, data_root, cfg, ckpt.text, ckpt.image)

    def forward_row(item, train_mode, rng, tape):
        return sp.attention_pool(item.inputs, ckpt.adapter, train_mode, rng, tape)

    return _run_stage(cfg, 2, ckpt, items, val_items, forward_row,
                      ckpt.adapter.params(), out_dir, resume, "stage2")
