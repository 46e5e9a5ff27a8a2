//! End-to-end driver: frame sampling, stage execution with artifact caching,
//! run configuration, ablation sweeps and report output.

mod ablation;
mod config;
mod stages;

pub use ablation::{run_ablation, write_ablation, AblationCell, AblationGrid, AblationRow, AblationTable};
pub use config::{
    replay_files, sample_frames_uniform, RunConfig, ServiceMode, Services, ServicesConfig,
    FRAME_SAMPLING_RULE,
};
pub use stages::{
    evaluate_rankings, fuse_all, write_report, Diagnostic, Pipeline, QueryDecomposition, RunOutput,
    RunReport, ScoredRun, UpstreamSettings, VideoTranscript,
};
