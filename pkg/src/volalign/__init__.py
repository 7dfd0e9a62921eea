"""volalign: desk-scale contrastive image-text alignment for 2D images and
slice stacks, with an attention-based slice pooling adapter and a full
evaluation protocol (linear probing, top-1 matching, ablations)."""

__version__ = "0.1.0"

from .config import TrainConfig
from .contrastive import LossConfig, SimilarityMatrix, batch_loss, info_nce, similarity_matrix
from .datapipe import (Caption, ManifestEntry, SynthSpec, Volume, build_caption,
                       load_captions, load_manifest, load_volume, preprocess_volume,
                       resize_bilinear, save_manifest, save_volume, synth_dataset,
                       tokenize, zscore)
from .diffmath import Param, Tape, Tensor, grad_check, make_rng
from .encoders import (ImageEncoderParams, SliceStack, TextEncoderParams,
                       encode_image2d, encode_slices, encode_text,
                       init_image_encoder, init_text_encoder)
from .evalkit import (AblationData, AblationReport, EmbeddingRow, EmbeddingTable,
                      MatchReport, ProbeReport, export_embeddings_csv,
                      extract_embeddings, linear_probe_cv, read_embeddings_csv,
                      run_ablation, top1_match)
from .slice_pool import AdapterParams, attention_pool, gap_pool, init_adapter, pool
from .trainer import (Adam, Checkpoint, OptimizerState, cosine_lr, load_checkpoint,
                      make_initial_checkpoint, save_checkpoint, train_stage1,
                      train_stage2)
