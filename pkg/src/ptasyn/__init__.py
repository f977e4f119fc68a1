"""Unpaired low-field to high-field MRI synthesis at desk scale.

Pipeline: synthetic phantom data, contrastive slice-matching pretraining,
block-corruption pretext pretraining, cycle-consistent adversarial
training, and FID / IS / MS-SSIM evaluation, all bit-reproducible from
explicit seeds.
"""

__version__ = "0.1.0"

from .data import (
    PhantomConfig,
    Slice,
    SliceDataset,
    Volume,
    build_phantom_pair,
    degrade_to_lowfield,
    generate_phantom_volume,
    load_dataset,
    normalize_slice,
    save_dataset,
    shuffle_with_permutation,
)
from .corruption import (
    BlockGrid,
    CorruptionRecord,
    corrupt,
    invert_corruption,
    partition_blocks,
    rotate_block,
)
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    cosine_similarity,
    cycle_loss,
    lsc_loss,
    sgp_contrastive_loss,
    total_loss,
)
from .nets import NetworkBundle, NetworkConfig, gradcheck, load_checkpoint, save_checkpoint
from .training import (
    MatchAssignment,
    TrainConfig,
    match_slices,
    pretrain_lsc,
    pretrain_sgp,
    synthesize,
    train_pta,
)
from .metrics import (
    FeatureSet,
    MetricReport,
    evaluate,
    extract_features,
    fid,
    inception_score,
    matrix_sqrt_psd,
    ms_ssim,
)
