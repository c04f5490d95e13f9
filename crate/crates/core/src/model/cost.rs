use crate::calibrate::{FactorSet, PruningVector};
use crate::error::Result;
use crate::factorize::{rank_for_factor, RankChoice};
use crate::model::{ModelWeights, TransformerConfig};

/// Parameter count of the whole model, or of the prunable projections only.
pub fn count_params(model: &ModelWeights, sites_only: bool) -> u64 {
    if sites_only {
        let c = &model.config;
        c.sites()
            .map(|s| {
                let (d_in, d_out) = c.site_dims(s.kind);
                (d_in * d_out) as u64
            })
            .sum()
    } else {
        model
            .tensors()
            .iter()
            .map(|(_, m)| (m.rows() * m.cols()) as u64)
            .sum()
    }
}

/// FLOPs per token of one projection: `2·d_in·d_out` dense, `2·R·(d_in+d_out)`
/// when factored at rank `R`.
pub fn site_flops(d_in: usize, d_out: usize, rank: Option<usize>) -> u64 {
    match rank {
        None => 2 * (d_in * d_out) as u64,
        Some(r) => 2 * (r * (d_in + d_out)) as u64,
    }
}

/// Projection FLOPs per token summed over all prunable sites.
pub fn estimate_flops_per_token(
    config: &TransformerConfig,
    pruning: Option<(&PruningVector, &FactorSet)>,
) -> Result<u64> {
    let mut total = 0;
    for site in config.sites() {
        let (d_in, d_out) = config.site_dims(site.kind);
        let rank = match pruning {
            None => None,
            Some((p, set)) => {
                let level = p.level(site.index(), set)?;
                match rank_for_factor(level, d_in, d_out)? {
                    RankChoice::Unpruned => None,
                    RankChoice::Rank { rank, .. } => Some(rank),
                }
            }
        };
        total += site_flops(d_in, d_out, rank);
    }
    Ok(total)
}
