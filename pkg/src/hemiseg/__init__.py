"""Cerebral hemisphere segmentation at desk scale.

A from-scratch reverse-mode tensor engine, an encoder/decoder segmentation
network with atrous pyramid and attention blocks, deep-supervision training,
volume I/O with a synthetic phantom generator, segmentation metrics, and the
midline/biomarker/grid-search analyses, all wired behind one CLI.
"""
from .analysis import (ALPHA_GRID, PERCENTILE_GRID, BiomarkerResult,
                       GridSearchResult, baseline_threshold_segment, bca_ci,
                       biomarker_analysis, cohens_d, dilate_inplane,
                       extract_midline, gridsearch, hemispheric_ratio,
                       midline_dice)
from .autodiff import Graph, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import (cross_entropy, deep_supervision_loss, dice_loss,
                     downsample_labels, one_hot)
from .metrics import (BinaryMask, MetricRow, boundary_voxels, dice,
                      evaluate_volume, hausdorff_mm, precision_recall)
from .model import (Model, NetworkConfig, SegmentationOutput, aspp_forward,
                    attention_block, build_model, count_parameters,
                    encoder_forward, ensemble_predict, segment)
from .nifti import read_labels, read_volume, write_labels, write_volume
from .optim import AdamState, TrainConfig, adam_step, train, train_ensemble
from .phantom import PhantomParams, generate_phantom
from .volumes import (LabelVolume, ManifestEntry, VolumeGrid, derive_regions,
                      read_manifest, split_dataset, standardize,
                      write_manifest)

__version__ = "0.1.0"
