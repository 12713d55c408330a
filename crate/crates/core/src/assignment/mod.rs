//! Optimal bipartite assignment and the matched set-prediction loss.

mod hungarian;
mod loss;

pub use hungarian::{brute_force_min_cost, hungarian, Assignment, CostMatrix};
pub use loss::{
    dice_loss, dice_loss_var, loss_for_assignment, mask_bce, pairwise_cost, training_loss,
    GroundTruthClip, GtInstance, LossOptions, LossWeights, PredictionValues, PredictionVars,
    DICE_EPS,
};
