"""Self-supervised 3D pretraining by image restoration, at desk scale.

The package synthesizes volumetric phantoms, corrupts sub-volumes with
composable transformations (nonlinear intensity remap, local voxel shuffle,
inner and outer cutout), trains a small 3D encoder-decoder to restore the
originals, and transfers the encoder to labeled target tasks with repeated
seeded trials and significance tests.
"""

from .config import ConfigError, RunConfig, load_config, parse_config_text
from .evalstat import (
    AblationResult,
    SweepTable,
    TrialResult,
    TTestResult,
    ablation_matrix,
    annotation_sweep,
    auc,
    dice,
    iou,
    run_trials,
    ttest_independent,
)
from .model import (
    Checkpoint,
    CheckpointError,
    UNetConfig,
    attach_classification_head,
    attach_segmentation_head,
    build_restoration_unet,
    extract_encoder,
    load_checkpoint,
    receptive_field,
    restore,
    save_checkpoint,
)
from .sampler import SamplerConfig, SubVolume, crop_subvolumes, load_subvolumes, save_subvolumes
from .tasks import (
    DICE_THRESHOLD,
    PhantomTask,
    TaskConfig,
    TaskDataset,
    classification_dataset,
    paired_speedup,
    pretraining_volumes,
    scheme_presets,
    segmentation_dataset,
)
from .trainer import (
    AugmentConfig,
    ProxyTrainConfig,
    TargetTrainConfig,
    TrainLog,
    epochs_to_threshold,
    finetune,
    pretrain,
    subsample_indices,
)
from .transforms import (
    ALL_OUTCOMES,
    CutoutMode,
    SchedulerConfig,
    TransformSpec,
    apply_pipeline,
    bezier_lut,
    bezier_point,
    gen_cutout_mask,
    local_pixel_shuffle,
    outcome_probability,
    record_from_text,
    record_to_text,
    schedule,
)
from .volume import (
    IntensityDomain,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    generate_phantom,
    normalize_ct,
    normalize_minmax,
    phantom_blob_mask,
    read_mvol,
    read_nifti1,
    write_mvol,
)

__version__ = "0.1.0"
