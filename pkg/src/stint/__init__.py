"""Self-supervised temporal interpolation for spatiotemporal sequences."""

from .cycle import (
    LossWeights,
    StagePredictions,
    cc1_loss,
    cc2_loss,
    combined_loss,
    dual_cycle_forward,
    finetune_loss,
)
from .metrics import (
    MetricsReport,
    evaluate,
    linear_blend_oracle,
    psnr,
    scatter_index,
    ssim,
    trivial_copy_baseline,
    write_report_csv,
)
from .net import (
    DESK_CONFIG,
    PAPER_SCALE_CONFIG,
    FramePair,
    InterpolationNetwork,
    NetConfig,
    SqueezeExcite3d,
    build_network,
    count_parameters,
    interpolate,
    se_forward,
)
from .seqdata import (
    FrameSequence,
    QuadrupleSample,
    SequenceFormatError,
    SyntheticSpec,
    TripletSample,
    augment_reverse,
    denormalize,
    generate_synthetic,
    load_sequence,
    make_quadruples,
    make_triplets,
    normalize,
    save_sequence,
)
from .train import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    finetune,
    finetune_defaults,
    load_checkpoint,
    lr_schedule,
    pretrain,
    pretrain_defaults,
    save_checkpoint,
)

__version__ = "0.1.0"
