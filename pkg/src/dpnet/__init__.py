"""Part-based recognition head over precomputed CNN feature maps."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DpnetError,
    FormatError,
    TrainingError,
)
from .feature_store import (
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    Region,
    RegionSet,
    SamplerConfig,
    image_seed,
    load_manifest,
    pool_regions,
    read_feature_map,
    region_to_pixels,
    sample_and_pool,
    sample_regions,
    save_manifest,
    write_feature_map,
)
from .interpret import (
    DatasetBags,
    Explanation,
    PartStats,
    collect_bags,
    compute_stats,
    discriminative_power,
    explain,
    part_frequency,
    part_importance,
    top_regions_for_part,
    write_heat_pgm,
)
from .numerics import column_softmax, l2_normalize, matmul, matvec, softmax
from .objective import (
    BatchResult,
    LossBreakdown,
    LossWeights,
    assign_penalty,
    batch_loss_and_grads,
    cce,
    cs_penalty,
    orth_penalty,
    total_loss,
)
from .part_model import (
    ForwardTrace,
    PartModel,
    bag_of_parts,
    forward,
    init_u_from_descriptors,
    init_v,
    load_checkpoint,
    predict,
    save_checkpoint,
    score,
    spherical_kmeans_rows,
)
from .synth import SynthSpec, generate, true_parts
from .trainer import (
    AdamState,
    EpochMetrics,
    EvalResult,
    TrainConfig,
    adam_step,
    evaluate,
    init_model,
    lr_at,
    train,
    write_metrics_csv,
)

__version__ = "0.1.0"
