//! Autoregressive multi-agent motion forecasting over discrete motion
//! tokens: trajectory quantization, a small encoder-decoder sequence model,
//! joint/conditional rollouts, rollout aggregation, and evaluation metrics.

pub mod aggregate;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rollout;
pub mod scene;
pub mod tokenizer;

pub use aggregate::{
    aggregate_rollouts, ensemble_merge, joint_distance, kmeans_refine, nms_select,
    AggregateConfig, JointDistanceKind, JointMode, JointModeSet,
};
pub use error::{CoreError, Result};
pub use metrics::{EvalReport, GroundTruth, IntentBucket, IntentThresholds, MissThresholds};
pub use model::{Model, ModelConfig, ParamStore};
pub use rollout::{
    rollout_conditional, rollout_joint, run_rollout, sample_nucleus, JointRollout, RolloutConfig,
    RolloutMode, RolloutSet,
};
pub use scene::{
    from_agent_frame, infer_headings, load_scenarios, save_scenarios, to_agent_frame, AgentFrame,
    AgentHistory, AgentState, AgentType, Extent, Polyline, PolylineKind, Scenario, ScenarioSet,
    Waypoint,
};
pub use tokenizer::{
    bin_center, detokenize, quantize_delta, seed_from_history, tokenize_trajectory, verlet_decode,
    verlet_encode, MotionToken, MotionVocabulary, RawIndexPair, TokenRow, TokenSequence,
    Tokenization,
};
