//! Geometric error, score-distribution distance, retrieval recall and the
//! landmark-based pose/expression fit.

pub mod icp;
pub mod landmarks;
pub mod metrics;
pub mod nn;

pub use icp::{crop_scan, icp_similarity, procrustes_similarity, IcpOptions, IcpResult, SimilarityTransform};
pub use landmarks::{fit_pose_expression, project_landmarks, FitOptions, LandmarkFit, LANDMARK_COUNT};
pub use metrics::{
    clustering_recall, cosine, emd_1d, emd_samples, similarity_stats, symmetric_point_to_plane,
    video_average_embeddings, video_average_results, Histogram1D, KeyedEmbedding, SimilarityStats,
};
pub use nn::PointGrid;
