//! The full model: parameter layout, forward pass and losses, negative
//! sampling, training loop and checkpoints.

mod checkpoint;
mod data;
mod forward;
mod sampling;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::TrainContext;
pub use forward::{bpr_loss, fuse, Batch, Encoded, LossBreakdown, LossVars, Scorer};
pub use sampling::NegativeSampler;
pub use train::{fit, EpochRecord, FitResult, StepLog, TrainError, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Scenario;
use crate::intent::{EmbeddingTables, IntentGenerator};
use crate::nn::{uniform, Mlp};
use crate::propagation::DEFAULT_DEPTH;
use crate::tensor::{AdamWConfig, ParamId, ParamStore};

/// Widths of every learned component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub dim: usize,
    pub gen_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub depth: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            dim: 100,
            gen_hidden: vec![200, 100],
            head_hidden: vec![150, 75],
            depth: DEFAULT_DEPTH,
        }
    }
}

impl ModelDims {
    /// Same proportions as the default network at embedding size `dim`:
    /// generator `4d -> 2d -> d -> d`, heads `3d -> 1.5d -> 0.75d -> 1`.
    pub fn scaled(dim: usize) -> Self {
        Self {
            dim,
            gen_hidden: vec![2 * dim, dim],
            head_hidden: vec![(3 * dim / 2).max(1), (3 * dim / 4).max(1)],
            depth: DEFAULT_DEPTH,
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Rec edges and Rec scoring use one learned padding-query embedding
    /// instead of generated intents.
    pub no_dem_int_gen: bool,
    /// Propagation averages plain neighbor embeddings, no translation.
    pub no_int_trans: bool,
    /// Generated intents feed propagation, heads and the contrastive loss
    /// as constants; only the supervision loss trains the generator.
    pub detach_generated_intent: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn label(&self) -> &'static str {
        match (self.no_dem_int_gen, self.no_int_trans) {
            (false, false) => "full",
            (true, false) => "w/o DeIntGen",
            (false, true) => "w/o IntTrans",
            (true, true) => "w/o DeIntGen & IntTrans",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_epochs: u32,
    pub patience: u32,
    pub seed: u64,
    pub ablation: Ablation,
    /// Seed for the validation candidate lists used by early stopping.
    pub valid_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            lambda1: 1.5,
            lambda2: 0.2,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            ablation: Ablation::default(),
            valid_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err("lambda1 and lambda2 must be non-negative".into());
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err("lr must be positive and weight_decay non-negative".into());
        }
        if self.max_epochs == 0 {
            return Err("max_epochs must be positive".into());
        }
        Ok(())
    }
}

/// Parameter ids of every component, in the fixed store order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub n_users: usize,
    pub n_items: usize,
    pub vocab_size: usize,
    pub dims: ModelDims,
    pub tables: EmbeddingTables,
    pub generator: IntentGenerator,
    pub pad_query: ParamId,
    pub head_search: Mlp,
    pub head_rec: Mlp,
}

/// Parameters plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layout: ModelLayout,
    pub params: ParamStore,
    pub ablation: Ablation,
}

impl Model {
    pub fn init(n_users: usize, n_items: usize, vocab_size: usize, dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = dims.dim;
        let tables = EmbeddingTables::init(&mut params, n_users, n_items, vocab_size, d, &mut rng);
        let generator = IntentGenerator::init(&mut params, d, &dims.gen_hidden, &mut rng);
        let pad_query = params.add("pad_query", uniform(&mut rng, 1, d, 0.1 / (d as f64).sqrt()));
        let mut head_widths = vec![3 * d];
        head_widths.extend_from_slice(&dims.head_hidden);
        head_widths.push(1);
        let head_search = Mlp::init(&mut params, "head_s", &head_widths, &mut rng);
        let head_rec = Mlp::init(&mut params, "head_r", &head_widths, &mut rng);
        Self {
            layout: ModelLayout {
                n_users,
                n_items,
                vocab_size,
                dims,
                tables,
                generator,
                pad_query,
                head_search,
                head_rec,
            },
            params,
            ablation: Ablation::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn head(&self, scenario: Scenario) -> &Mlp {
        match scenario {
            Scenario::Search => &self.layout.head_search,
            Scenario::Rec => &self.layout.head_rec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_follow_network_configuration() {
        let m = Model::init(3, 4, 5, ModelDims::default(), 0);
        assert_eq!(m.layout.generator.mlp.widths, vec![400, 200, 100, 100]);
        assert_eq!(m.layout.head_search.widths, vec![300, 150, 75, 1]);
        assert_eq!(m.layout.head_rec.widths, vec![300, 150, 75, 1]);
        assert_eq!(m.layout.dims.depth, 2);
        assert_eq!(m.params.value(m.layout.tables.users).dim(), (3, 100));
    }

    #[test]
    fn scaled_dims() {
        let d = ModelDims::scaled(16);
        assert_eq!(d.gen_hidden, vec![32, 16]);
        assert_eq!(d.head_hidden, vec![24, 12]);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(3, 4, 5, ModelDims::scaled(4), 9);
        let b = Model::init(3, 4, 5, ModelDims::scaled(4), 9);
        let c = Model::init(3, 4, 5, ModelDims::scaled(4), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lambda1 = -0.1;
        assert!(c.validate().is_err());
    }
}
