"""Soft-KNN routed classifier ensembles for online class-incremental
learning on precomputed embeddings."""

from .ensemble import (
    EnsembleConfig,
    EnsembleState,
    ForwardTrace,
    classifier_forward,
    forward,
    init_ensemble,
    predict_label,
    vote,
)
from .errors import ConfigError, DataError
from .metrics import (
    ExperimentReport,
    confusion,
    evaluate,
    final_average_accuracy,
    forgetting,
    read_report,
    write_report,
)
from .numerics import (
    cosine_similarity,
    draw_standard_normal,
    l2_normalize,
    log_sum_exp,
    make_rng,
)
from .runner import (
    DatasetSpec,
    RunConfig,
    run_config_from_dict,
    run_many,
    run_single,
)
from .soft_knn import (
    SoftKnnConfig,
    SoftKnnResult,
    build_cost_matrix,
    cosine_distances,
    hard_topk,
    sinkhorn_backward,
    sinkhorn_forward,
)
from .stream_data import (
    EmbeddingDataset,
    StreamPlan,
    SyntheticSpec,
    default_splits,
    generate_synthetic,
    generate_synthetic_pair,
    load_embeddings,
    make_stream,
    save_embeddings,
    split_test_sets,
)
from .training import (
    AdamState,
    GradientSet,
    TrainConfig,
    adam_key_step,
    backward,
    loss,
    one_hot,
    sign_step,
    train_batch,
)

__version__ = "0.1.0"
