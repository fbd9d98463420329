use std::collections::{HashMap, VecDeque};

use super::{Flattening, Role, StepDistribution};
use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::rvq::TokenGrid;

/// Add-one smoothed counts of the next symbol, keyed by the target layer and
/// the preceding `order` symbols of the role's flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    pub(crate) order: usize,
    pub(crate) codebook_size: usize,
    pub(crate) table: HashMap<(u16, Vec<u32>), Counts>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Counts {
    pub total: u64,
    /// `(symbol, count)`, sorted by symbol.
    pub sparse: Vec<(u32, u32)>,
}

impl ContextModel {
    pub(crate) fn empty(order: usize, codebook_size: usize) -> Self {
        Self {
            order,
            codebook_size,
            table: HashMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of distinct (layer, context) keys seen in training.
    pub fn contexts(&self) -> usize {
        self.table.len()
    }

    pub(crate) fn train(
        grids: &[TokenGrid],
        role: Role,
        order: usize,
        cfg: &CodecConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if order == 0 {
            return Err(CodecError::InvalidConfig(
                "context order must be at least 1".into(),
            ));
        }
        if grids.is_empty() || grids.iter().all(|g| g.n_frames() == 0) {
            return Err(CodecError::InsufficientData { needed: 1, got: 0 });
        }
        if role == Role::Fine && cfg.n_fine == 0 {
            return Err(CodecError::InvalidConfig(
                "fine model needs at least one fine layer".into(),
            ));
        }
        let flat = Flattening::new(role, cfg);
        let mut raw: HashMap<(u16, Vec<u32>), HashMap<u32, u32>> = HashMap::new();
        for g in grids {
            if g.config().codebook_size != cfg.codebook_size
                || g.config().n_coarse != cfg.n_coarse
                || (role == Role::Fine && g.config().n_fine != cfg.n_fine)
            {
                return Err(CodecError::ShapeError(format!(
                    "training grid geometry {:?} does not match {cfg:?}",
                    g.config()
                )));
            }
            let symbols = flat.flatten(g);
            for (i, &s) in symbols.iter().enumerate() {
                let layer = flat.position(i).1;
                if !flat.is_target(layer) {
                    continue;
                }
                let ctx = symbols[i.saturating_sub(order)..i].to_vec();
                *raw.entry((layer as u16, ctx))
                    .or_default()
                    .entry(s)
                    .or_default() += 1;
            }
        }
        let table = raw
            .into_iter()
            .map(|(k, v)| {
                let mut sparse: Vec<(u32, u32)> = v.into_iter().collect();
                sparse.sort_unstable();
                let total = sparse.iter().map(|&(_, c)| c as u64).sum();
                (k, Counts { total, sparse })
            })
            .collect();
        Ok(Self {
            order,
            codebook_size: cfg.codebook_size,
            table,
        })
    }

    pub(crate) fn session(&self) -> ContextSession<'_> {
        ContextSession {
            model: self,
            recent: VecDeque::with_capacity(self.order + 1),
        }
    }

    pub(crate) fn distribution(&self, layer: usize, ctx: &[u32]) -> Result<StepDistribution> {
        let mut weights = vec![1.0f64; self.codebook_size];
        if let Some(counts) = self.table.get(&(layer as u16, ctx.to_vec())) {
            for &(s, c) in &counts.sparse {
                weights[s as usize] += c as f64;
            }
        }
        StepDistribution::from_weights(&weights)
    }
}

pub(crate) struct ContextSession<'m> {
    model: &'m ContextModel,
    recent: VecDeque<u32>,
}

impl ContextSession<'_> {
    pub fn distribution(&mut self, layer: usize, codebook_size: usize) -> Result<StepDistribution> {
        debug_assert_eq!(codebook_size, self.model.codebook_size);
        let ctx: Vec<u32> = self.recent.iter().copied().collect();
        self.model.distribution(layer, &ctx)
    }

    pub fn push(&mut self, code: u32) {
        self.recent.push_back(code);
        if self.recent.len() > self.model.order {
            self.recent.pop_front();
        }
    }
}
