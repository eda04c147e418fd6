//! Weight-space interpolation, activation interpolation and learned routing
//! over fine-tuned MLP experts.

pub mod interp;
pub mod merged;
pub mod router;

pub use interp::{lerp, lerp_models, slerp, slerp_models, COLINEAR_THRESHOLD};
pub use merged::{
    activation_interp_forward, build_merged, moe_forward, train_router, CurvePoint, LayerMixing, MergeMethod,
    MergeSpec, MergedForward, MergedModel, RouterTrainConfig,
};
pub use router::{route, route_tape, BoundRouter, ExpertRef, Router, RouterKind};
