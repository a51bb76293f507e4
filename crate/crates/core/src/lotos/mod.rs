//! Layer-wise orthogonalization of ensemble members.
//!
//! For a pair of corresponding layers with linear parts `A` and `B` and top
//! right singular vectors `v_i` (of `A`) and `v'_i` (of `B`), the penalty is
//!
//! ```text
//! S_k = sum_i w_i (relu(|A v'_i| - mal) + relu(|B v_i| - mal))
//! ```
//!
//! Singular vectors are treated as constants when differentiating. The
//! ensemble loss adds `lambda / (M N (N - 1))` times the sum of `S_k` over
//! unordered model pairs and the `M` selected layers to the mean cross-entropy.

mod config;
mod loss;
mod similarity;
mod train;

pub use config::{LayerSelection, LotosConfig};
pub use loss::{lotos_loss, lotos_loss_grad, LotosLoss, PairVectors, VectorSource};
pub use similarity::{pair_similarity, PairSimilarity};
pub use train::{
    random_vector_control, train_ensemble, EnsembleHistory, HistoryRecord, TrainMode,
    HISTORY_COLUMNS,
};
