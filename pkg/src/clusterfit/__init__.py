"""Cluster-and-refit representation learning pipeline.

Cluster a trained model's penultimate features with k-means, retrain a
fresh network on the cluster assignments as pseudo-labels, and measure
transfer quality with linear probes on fixed features.
"""

from .errors import (
    ClusterFitError,
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    FormatError,
    InfeasibleError,
    ShapeError,
    StageError,
    TruncationError,
    ValidationError,
)
from .harness import (
    BaselineSpec,
    ClusterfitSpec,
    ExperimentConfig,
    FileData,
    PretrainSpec,
    ProbeSpec,
    ResultsTable,
    SynthSpec,
    clusterfit_run,
    config_from_dict,
    sweep,
    synth_generate,
)
from .kmeans import (
    ClusterAssignment,
    KMeansConfig,
    TwoStageKMeans,
    kmeans_assign,
    kmeans_fit,
    load_centroids,
    save_centroids,
)
from .nnet import (
    DistillConfig,
    MlpClassifier,
    MlpModel,
    TrainConfig,
    extract_features,
    forward,
    init_model,
    load_model,
    loss_and_grad,
    save_model,
    train,
)
from .probe import LinearProbe, ProbeConfig, ProbeResult, probe_eval, probe_fit
from .relabel import (
    NoiseSpec,
    PerLabelPlan,
    inject_noise,
    per_label_plan,
    per_label_pseudo_labels,
    prototype_labels,
    pseudo_labels,
)
from .store import (
    Centroids,
    Dataset,
    FeatureMatrix,
    LabelVector,
    l2_normalize,
    read_features,
    read_labels,
    write_features,
    write_labels,
)

__version__ = "0.1.0"
