"""Binary conductivity imaging from boundary electrode measurements."""

from .cli import RunConfig, load_config, parse_config, serialize_config
from .fem import (
    CemSystem,
    ExcitationScheme,
    SolverError,
    add_noise,
    load_measurements,
    save_measurements,
    simulate_measurements,
)
from .field import (
    BlendControl,
    SampleCollection,
    SampleParam,
    blend,
    l2_error,
    load_collection,
    load_mask_field,
    make_true_model,
    rasterize_sample,
    sample_random,
    save_collection,
)
from .geometry import (
    ElectrodeLayout,
    Mesh,
    build_disc_mesh,
    electrode_boundary_integral,
    load_mesh,
    place_electrodes,
    save_mesh,
)
from .grad import DegenerateDirectionError, KappaReport, kappa_test, spatial_gradient
from .opt import (
    CostEvaluator,
    FineControl,
    OptimizeSettings,
    RunTrace,
    optimize_coarse,
    optimize_fine,
    precompute_collection,
    rank_and_select,
    run_pipeline,
    seed_streams,
)

__all__ = [
    "BlendControl",
    "CemSystem",
    "CostEvaluator",
    "DegenerateDirectionError",
    "ElectrodeLayout",
    "ExcitationScheme",
    "FineControl",
    "KappaReport",
    "Mesh",
    "OptimizeSettings",
    "RunConfig",
    "RunTrace",
    "SampleCollection",
    "SampleParam",
    "SolverError",
    "add_noise",
    "blend",
    "build_disc_mesh",
    "electrode_boundary_integral",
    "kappa_test",
    "l2_error",
    "load_collection",
    "load_config",
    "load_mask_field",
    "load_measurements",
    "load_mesh",
    "make_true_model",
    "optimize_coarse",
    "optimize_fine",
    "parse_config",
    "place_electrodes",
    "precompute_collection",
    "rank_and_select",
    "rasterize_sample",
    "run_pipeline",
    "sample_random",
    "save_collection",
    "save_measurements",
    "save_mesh",
    "seed_streams",
    "serialize_config",
    "simulate_measurements",
]
