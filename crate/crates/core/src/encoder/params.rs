use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{check_probability, LpdError, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_length: usize,
    pub vocab_size: usize,
    pub dropout_internal: f64,
    /// Share the token embedding matrix with the MLM output projection.
    #[serde(default)]
    pub tie_mlm_head: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_length: 64,
            vocab_size: 0,
            dropout_internal: 0.1,
            tie_mlm_head: false,
            init_std: default_init_std(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_length", self.max_length),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LpdError::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(LpdError::invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        check_probability("dropout_internal", self.dropout_internal)?;
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(LpdError::invalid("init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn representation_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Declared tensor order of the flat parameter vector. Checkpoints store
/// tensors in exactly this order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub mlm_w: Option<Slot>,
    pub mlm_b: Slot,
    tensors: Vec<(String, Vec<usize>, Slot, Init)>,
    total: usize,
}

struct Builder {
    tensors: Vec<(String, Vec<usize>, Slot, Init)>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { offset: self.total, len };
        self.total += len;
        self.tensors.push((name, shape.to_vec(), slot, init));
        slot
    }
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let (h, f, v) = (cfg.hidden, cfg.ffn_dim, cfg.vocab_size);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok_emb = b.add("tok_emb".into(), &[v, h], Init::Normal);
        let pos_emb = b.add("pos_emb".into(), &[cfg.max_length, h], Init::Normal);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut add = |n: &str, shape: &[usize], init| b.add(format!("layer{l}.{n}"), shape, init);
                LayerSlots {
                    ln1_g: add("ln1_g", &[h], Init::Ones),
                    ln1_b: add("ln1_b", &[h], Init::Zeros),
                    wq: add("wq", &[h, h], Init::Normal),
                    bq: add("bq", &[h], Init::Zeros),
                    wk: add("wk", &[h, h], Init::Normal),
                    bk: add("bk", &[h], Init::Zeros),
                    wv: add("wv", &[h, h], Init::Normal),
                    bv: add("bv", &[h], Init::Zeros),
                    wo: add("wo", &[h, h], Init::Normal),
                    bo: add("bo", &[h], Init::Zeros),
                    ln2_g: add("ln2_g", &[h], Init::Ones),
                    ln2_b: add("ln2_b", &[h], Init::Zeros),
                    w1: add("w1", &[h, f], Init::Normal),
                    b1: add("b1", &[f], Init::Zeros),
                    w2: add("w2", &[f, h], Init::Normal),
                    b2: add("b2", &[h], Init::Zeros),
                }
            })
            .collect();
        let lnf_g = b.add("lnf_g".into(), &[h], Init::Ones);
        let lnf_b = b.add("lnf_b".into(), &[h], Init::Zeros);
        let mlm_w = (!cfg.tie_mlm_head).then(|| b.add("mlm_w".into(), &[h, v], Init::Normal));
        let mlm_b = b.add("mlm_b".into(), &[v], Init::Zeros);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            mlm_w,
            mlm_b,
            tensors: b.tensors,
            total: b.total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// (name, shape, slot) for every tensor in declared order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], Slot)> {
        self.tensors.iter().map(|(n, s, slot, _)| (n.as_str(), s.as_slice(), *slot))
    }
}

/// All trainable weights as one flat vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut data = vec![T::zero(); layout.total()];
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| LpdError::invalid(e.to_string()))?;
        let mut rng = seeded(seed);
        for (_, _, slot, init) in &layout.tensors {
            let dst = &mut data[slot.range()];
            match init {
                Init::Normal => dst.iter_mut().for_each(|v| *v = T::of(normal.sample(&mut rng))),
                Init::Zeros => {}
                Init::Ones => dst.iter_mut().for_each(|v| *v = T::one()),
            }
        }
        Ok(ParameterSet { layout, data })
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn slot(&self, slot: Slot) -> &[T] {
        &self.data[slot.range()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
