"""difftrack: nonlinear state estimation with classical Bayesian filters and a
measurement-conditioned diffusion filter, plus simulators and benchmarks."""

from .ssm import (
    MeasurementSpec,
    NoiseSpec,
    SsmSpec,
    Trajectory,
    TransitionSpec,
    lorenz_ssm,
    lorenz_transition_matrix,
    measure,
    q2_r2_from_db,
    sample_attractor_state,
    sample_noise,
    simulate_trajectory,
    wiener_ssm,
    wiener_velocity_model,
)
from .filters import (
    FilterConfig,
    GaussianBelief,
    ParticleSet,
    ekf_step,
    filter_trajectory,
    kf_oracle_step,
    numerical_jacobian,
    pf_step,
    ukf_step,
)
from .diffusion import (
    DiffusionSchedule,
    DiffusionTrajectory,
    GuidanceConfig,
    Normalization,
    build_schedule,
    denoise_step,
    guided_tau0,
    q_sample,
    track_step,
    track_trajectories,
    track_trajectory,
)
from .denoiser import (
    NetConfig,
    TrainConfig,
    forward,
    init_params,
    load_checkpoint,
    loss,
    parameter_count,
    save_checkpoint,
    train,
)
from .datasets import (
    DatasetManifest,
    WindowDataset,
    build_lorenz_dataset,
    load_manifest,
    load_split,
    load_windows,
    nclt_ingest,
    synthetic_nclt_session,
    windows_from_trajectories,
)
from .bench import (
    DiffusionModel,
    MseReport,
    ScenarioConfig,
    emit_report,
    load_model,
    mse_db,
    run_benchmark,
    run_mismatch_suite,
    run_nclt,
    table1_scenario,
)

__version__ = "0.1.0"
