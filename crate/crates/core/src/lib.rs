//! Fact-guided activation steering.
//!
//! Pipeline: annotations -> facts -> textual descriptions -> trusted/untrusted
//! activation pairs -> steering field and offset estimator -> edited forward
//! passes, scored with discriminative and generative metrics. A small
//! transformer harness makes every stage runnable offline.

pub mod activation_store;
pub mod annotations;
pub mod error;
pub mod facts;
pub mod harness;
pub mod metrics;
pub mod offset_estimator;
pub mod steering;
pub mod textualizer;

pub use activation_store::{
    pair_by_sample, read_records, write_records, ActivationFileHeader, ActivationRecord, Dims,
    PairedActivations, Pairing, Role, Unmatched, VectorPair,
};
pub use annotations::{
    load_annotation_set, validate, AnnotationSet, BoundingBox, ImageRecord, ObjectAnnotation,
    Polygon, Violation, ViolationKind,
};
pub use error::{Error, Result};
pub use facts::{build_fact_set, FactConfig, FactSet, Relation, ShapeClass};
pub use metrics::{
    accuracy_f1, chair_hal_cover, extract_mentions, Answer, EvalReport, MentionExtraction,
    SplitReport,
};
pub use offset_estimator::{
    build_offset_dataset, grad_check, train, AffineMap, OffsetEstimator, OffsetSample, TrainConfig,
};
pub use steering::{
    apply_edit, compute_general_field, pca_project_1d, rank_heads, EditMode, EditPlan,
    SteeringField,
};
pub use textualizer::{
    build_contrast_pairs, compose_description, generate_question_set, query_focus, Backend,
    ContrastPair, FactualDescription, Question, TaskKind,
};
