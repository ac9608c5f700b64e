"""Graph-aware missingness mechanisms, reference imputers and evaluation harness."""

from gamm.errors import (
    ConfigError,
    ExternalImputerError,
    GammError,
    GraphError,
    GraphFormatError,
    MaskFormatError,
    MetricError,
    SpecError,
    UnsupportedMechanismError,
)
from gamm.evaluation import (
    ComparisonTable,
    MetricSample,
    OutcomeSummary,
    build_comparison_table,
    degradation_pct,
    masked_mae_rmse,
)
from gamm.graph import (
    AttributedGraph,
    ColumnSplit,
    adjusted_homophily,
    k_hop_neighbors,
    load_graph,
    save_graph,
    structural_profile,
)
from gamm.imputers import (
    ImputationResult,
    ImputerConfig,
    ImputerMethod,
    impute,
    impute_feature_propagation,
    impute_graph_average,
    impute_tabular_mean,
    run_external_imputer,
)
from gamm.maskgen import (
    Mask,
    MechanismKind,
    MechanismSpec,
    Sign,
    build_driver,
    calibrate_bias,
    derive_seed,
    empirical_rate,
    generate_mask,
)
from gamm.stats import kde_export, mann_whitney_u, silverman_bandwidth
from gamm.synth import SynthSpec, column_independence_check, generate_sbm

__version__ = "0.1.0"
