//! Three-layer MLP classifier over max- and mean-pooled tokens.

use crate::backbone::Linear;
use crate::error::Result;
use crate::params::{Component, ParamStore};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::{NodeId, Scope, Tape};

pub const HEAD_HIDDEN: usize = 256;

#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

/// `(2d·256+256) + (256·256+256) + (256·C+C)`.
pub fn head_param_count(d: usize, classes: usize) -> usize {
    let h = HEAD_HIDDEN;
    (2 * d * h + h) + (h * h + h) + (h * classes + classes)
}

impl Head {
    pub fn build<T: Real>(store: &mut ParamStore<T>, d: usize, classes: usize, rng: &mut RngStream) -> Self {
        let c = Component::Head;
        Self {
            fc1: Linear::new(store, "head.fc1", 2 * d, HEAD_HIDDEN, true, c, rng),
            fc2: Linear::new(store, "head.fc2", HEAD_HIDDEN, HEAD_HIDDEN, true, c, rng),
            fc3: Linear::new(store, "head.fc3", HEAD_HIDDEN, classes, true, c, rng),
        }
    }

    /// Logits for one cloud. `dropout = Some((rate, rng))` enables training
    /// mode: inverted dropout after each hidden activation.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: NodeId,
        mut dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<NodeId> {
        let prev = tape.set_scope(Scope::Head);
        let max = tape.row_max_pool(tokens)?;
        let mean = tape.row_mean_pool(tokens)?;
        let mut x = tape.concat_cols(&[max, mean])?;
        for layer in [&self.fc1, &self.fc2] {
            x = layer.apply(tape, store, x)?;
            x = tape.act(x);
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    let keep = 1.0 - *rate;
                    let scale = T::lit(1.0 / keep);
                    let mask = (0..tape.value(x).len())
                        .map(|_| if rng.uniform(0.0, 1.0) < keep { scale } else { T::zero() })
                        .collect();
                    x = tape.dropout(x, mask)?;
                }
            }
        }
        let logits = self.fc3.apply(tape, store, x);
        tape.set_scope(prev);
        logits
    }
}
