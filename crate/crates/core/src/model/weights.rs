use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AttentionKind, ModelConfig};
use crate::attention::{HeadTables, ProjectionWeights, RelativeEmbeddingTable, TableMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm gain and offset, each of length `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attention: ProjectionWeights,
    pub tables: HeadTables,
    pub norm1: NormWeights,
    pub norm2: NormWeights,
    pub ffn: FeedForwardWeights,
}

/// First-layer timing and pitch tables, one pair per head.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTimeWeights {
    pub time: Vec<Tensor>,
    pub pitch: Vec<Tensor>,
}

/// Every learned tensor of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    /// `V × embedding_width`.
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub pitch_time: Option<PitchTimeWeights>,
    pub final_norm: NormWeights,
    /// `D × V`.
    pub w_out: Tensor,
    pub b_out: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

fn tables(cfg: &ModelConfig, mut make: impl FnMut(&[usize]) -> Tensor) -> HeadTables {
    if !cfg.use_relative {
        return HeadTables::None;
    }
    let dh = cfg.head_dim();
    match cfg.attention {
        AttentionKind::Global => HeadTables::Global(
            (0..cfg.heads)
                .map(|_| {
                    RelativeEmbeddingTable::new(TableMode::Global, make(&[cfg.global_table_rows(), dh]))
                        .expect("table shape")
                })
                .collect(),
        ),
        AttentionKind::Local => {
            let (l, r) = cfg.local_table_rows();
            let mut left = Vec::new();
            let mut right = Vec::new();
            for _ in 0..cfg.heads {
                left.push(RelativeEmbeddingTable::new(TableMode::LocalLeft, make(&[l, dh])).expect("table shape"));
                right.push(RelativeEmbeddingTable::new(TableMode::Global, make(&[r, dh])).expect("table shape"));
            }
            HeadTables::Local { left, right }
        }
    }
}

macro_rules! visit_slots {
    ($self:ident, $f:ident, $($ref:tt)+) => {{
        $f("embedding", $($ref)+ $self.embedding);
        for (i, layer) in ($($ref)+ $self.layers).iter_mut_or_ref().enumerate() {
            let p = format!("layers.{i}");
            $f(&format!("{p}.attention.wq"), $($ref)+ layer.attention.wq);
            $f(&format!("{p}.attention.wk"), $($ref)+ layer.attention.wk);
            $f(&format!("{p}.attention.wv"), $($ref)+ layer.attention.wv);
            $f(&format!("{p}.attention.wo"), $($ref)+ layer.attention.wo);
            match $($ref)+ layer.tables {
                HeadTables::None => {}
                HeadTables::Global(t) => {
                    for (h, t) in t.iter_mut_or_ref().enumerate() {
                        $f(&format!("{p}.relative.global.{h}"), t.embeddings_mut_or_ref());
                    }
                }
                HeadTables::Local { left, right } => {
                    for (h, t) in left.iter_mut_or_ref().enumerate() {
                        $f(&format!("{p}.relative.left.{h}"), t.embeddings_mut_or_ref());
                    }
                    for (h, t) in right.iter_mut_or_ref().enumerate() {
                        $f(&format!("{p}.relative.right.{h}"), t.embeddings_mut_or_ref());
                    }
                }
            }
            $f(&format!("{p}.norm1.gain"), $($ref)+ layer.norm1.gain);
            $f(&format!("{p}.norm1.bias"), $($ref)+ layer.norm1.bias);
            $f(&format!("{p}.norm2.gain"), $($ref)+ layer.norm2.gain);
            $f(&format!("{p}.norm2.bias"), $($ref)+ layer.norm2.bias);
            $f(&format!("{p}.ffn.w1"), $($ref)+ layer.ffn.w1);
            $f(&format!("{p}.ffn.b1"), $($ref)+ layer.ffn.b1);
            $f(&format!("{p}.ffn.w2"), $($ref)+ layer.ffn.w2);
            $f(&format!("{p}.ffn.b2"), $($ref)+ layer.ffn.b2);
        }
        if let Some(pt) = $($ref)+ $self.pitch_time {
            for (h, t) in ($($ref)+ pt.time).iter_mut_or_ref().enumerate() {
                $f(&format!("pitch_time.time.{h}"), t);
            }
            for (h, t) in ($($ref)+ pt.pitch).iter_mut_or_ref().enumerate() {
                $f(&format!("pitch_time.pitch.{h}"), t);
            }
        }
        $f("final_norm.gain", $($ref)+ $self.final_norm.gain);
        $f("final_norm.bias", $($ref)+ $self.final_norm.bias);
        $f("output.weight", $($ref)+ $self.w_out);
        $f("output.bias", $($ref)+ $self.b_out);
    }};
}

// Adapters so one macro body serves both the shared and the mutable walk.
trait IterEither<'a, T: 'a> {
    type Iter: Iterator;
    fn iter_mut_or_ref(self) -> Self::Iter;
}

impl<'a, T: 'a> IterEither<'a, T> for &'a Vec<T> {
    type Iter = std::slice::Iter<'a, T>;
    fn iter_mut_or_ref(self) -> Self::Iter {
        self.iter()
    }
}

impl<'a, T: 'a> IterEither<'a, T> for &'a mut Vec<T> {
    type Iter = std::slice::IterMut<'a, T>;
    fn iter_mut_or_ref(self) -> Self::Iter {
        self.iter_mut()
    }
}

trait TableEither<'a> {
    type Out;
    fn embeddings_mut_or_ref(self) -> Self::Out;
}

impl<'a> TableEither<'a> for &'a RelativeEmbeddingTable {
    type Out = &'a Tensor;
    fn embeddings_mut_or_ref(self) -> &'a Tensor {
        self.embeddings()
    }
}

impl<'a> TableEither<'a> for &'a mut RelativeEmbeddingTable {
    type Out = &'a mut Tensor;
    fn embeddings_mut_or_ref(self) -> &'a mut Tensor {
        self.embeddings_mut()
    }
}

impl ModelWeights {
    /// Builds weights whose every slot is produced by `make(shape, kind)`.
    fn build(cfg: &ModelConfig, mut make: impl FnMut(&[usize], Slot) -> Tensor) -> Result<Self> {
        cfg.validate()?;
        let (v, d, f) = (cfg.vocab_size, cfg.depth, cfg.feedforward_size);
        let embedding = make(&[v, cfg.embedding_width()], Slot::Embedding);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let attention = ProjectionWeights {
                wq: make(&[d, d], Slot::Dense(d)),
                wk: make(&[d, d], Slot::Dense(d)),
                wv: make(&[d, d], Slot::Dense(d)),
                wo: make(&[d, d], Slot::Dense(d)),
            };
            let tables = tables(cfg, |s| make(s, Slot::Embedding));
            let ffn = FeedForwardWeights {
                w1: make(&[d, f], Slot::Dense(d)),
                b1: make(&[f], Slot::Bias),
                w2: make(&[f, d], Slot::Dense(f)),
                b2: make(&[d], Slot::Bias),
            };
            layers.push(LayerWeights {
                attention,
                tables,
                norm1: NormWeights { gain: make(&[d], Slot::Gain), bias: make(&[d], Slot::Bias) },
                norm2: NormWeights { gain: make(&[d], Slot::Gain), bias: make(&[d], Slot::Bias) },
                ffn,
            });
        }
        let pitch_time = cfg.use_pitch_time_relative.then(|| {
            let dh = cfg.head_dim();
            let time = (0..cfg.heads).map(|_| make(&[cfg.pitch_time.time_rows(), dh], Slot::Embedding)).collect();
            let pitch = (0..cfg.heads).map(|_| make(&[cfg.pitch_time.pitch_rows(), dh], Slot::Embedding)).collect();
            PitchTimeWeights { time, pitch }
        });
        Ok(Self {
            embedding,
            layers,
            pitch_time,
            final_norm: NormWeights { gain: make(&[d], Slot::Gain), bias: make(&[d], Slot::Bias) },
            w_out: make(&[d, v], Slot::Dense(d)),
            b_out: make(&[v], Slot::Bias),
        })
    }

    /// Fan-in uniform init for dense maps, small uniform noise for every
    /// embedding table, unit gains and zero offsets. Seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = cfg.init_scale;
        Self::build(cfg, |shape, slot| match slot {
            Slot::Dense(fan_in) => uniform(&mut rng, shape, 1.0 / (fan_in as f64).sqrt()),
            Slot::Embedding => uniform(&mut rng, shape, scale),
            Slot::Gain => Tensor::full(shape, 1.0),
            Slot::Bias => Tensor::zeros(shape),
        })
    }

    /// All slots zero, including gains. Used for gradients and optimizer moments.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, |shape, _| Tensor::zeros(shape))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    /// Every slot with its name, in a fixed order.
    pub fn slots(&self) -> Vec<(String, &Tensor)> {
        fn go<'a>(w: &'a ModelWeights) -> Vec<(String, &'a Tensor)> {
            let mut out = Vec::new();
            let mut f = |n: &str, t: &'a Tensor| out.push((n.to_string(), t));
            visit_slots!(w, f, &);
            out
        }
        go(self)
    }

    pub fn slots_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn go<'a>(w: &'a mut ModelWeights) -> Vec<(String, &'a mut Tensor)> {
            let mut out = Vec::new();
            let mut f = |n: &str, t: &'a mut Tensor| out.push((n.to_string(), t));
            visit_slots!(w, f, &mut);
            out
        }
        go(self)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in self.slots() {
            f(&n, t);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in self.slots_mut() {
            f(&n, t);
        }
    }

    /// `(name, shape)` of every slot in visiting order.
    pub fn slot_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.shape().to_vec())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn sum_squares(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.sum_squares());
        s
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= k));
    }

    /// `self += other`, slot by slot.
    pub fn accumulate(&mut self, other: &ModelWeights) -> Result<()> {
        let src = other.slots();
        let dst = self.slots_mut();
        if src.len() != dst.len() {
            return Err(Error::State("slot count mismatch".into()));
        }
        for ((name, d), (_, s)) in dst.into_iter().zip(src) {
            if d.shape() != s.shape() {
                return Err(Error::State(format!("slot {name} does not line up")));
            }
            for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.data().iter().all(|x| x.is_finite()));
        ok
    }

    pub fn bitwise_eq(&self, other: &ModelWeights) -> bool {
        let mut a = Vec::new();
        self.visit(&mut |n, t| {
            a.push((n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
        });
        let mut b = Vec::new();
        other.visit(&mut |n, t| {
            b.push((n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
        });
        a == b
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Dense(usize),
    Embedding,
    Gain,
    Bias,
}
