//! Randomized equivalence suites for the skew transforms.
//!
//! Each suite compares a skew output with an independent oracle bitwise:
//! the index map `S[i][j] = M[i][j - i + L - 1]` (global) or
//! `S[i][j] = M[i][j - i + N - 1]` (local), and the explicit gather of
//! relative embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{naive_srel_global, skew_global, skew_local, RelativeEmbeddingTable, TableMode};
use crate::error::Result;
use crate::tensor::{dot, matmul_nt, Tensor};

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Slice the reshaped matrix one row too early.
    OffByOne,
}

#[derive(Clone, Debug)]
pub struct SkewCheckOptions {
    pub max_len: usize,
    pub max_block: usize,
    /// Random instances per length.
    pub trials: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SkewCheckOptions {
    fn default() -> Self {
        Self { max_len: 64, max_block: 32, trials: 200, head_dim: 4, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub entries_compared: u64,
    pub mismatches: u64,
    pub first_mismatch: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SkewCheckReport {
    pub suites: Vec<SuiteResult>,
    pub vacuous: bool,
}

impl SkewCheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.mismatches == 0)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn faulty_skew_global(qe: &Tensor) -> Result<Tensor> {
    let l = qe.rows();
    let padded = qe.pad(&[(0, 0), (1, 0)])?;
    padded.reshape(&[l + 1, l])?.slice(&[0..l, 0..l])
}

fn faulty_skew_local(qe: &Tensor) -> Result<Tensor> {
    let n = qe.rows();
    let w = 2 * n - 1;
    let flat = qe.pad(&[(0, 0), (0, 1)])?.reshape(&[2 * n * n])?.pad(&[(0, n - 1)])?;
    flat.reshape(&[n + 1, w])?.slice(&[1..n + 1, n - 1..w])
}

struct Tally {
    result: SuiteResult,
}

impl Tally {
    fn new(name: &str) -> Self {
        Self {
            result: SuiteResult {
                name: name.into(),
                instances: 0,
                entries_compared: 0,
                mismatches: 0,
                first_mismatch: None,
            },
        }
    }

    fn compare(&mut self, got: f64, want: f64, at: impl FnOnce() -> String) {
        self.result.entries_compared += 1;
        if got.to_bits() != want.to_bits() {
            self.result.mismatches += 1;
            if self.result.first_mismatch.is_none() {
                self.result.first_mismatch = Some(format!("{}: got {got}, expected {want}", at()));
            }
        }
    }
}

/// Runs the global and local suites. With `trials == 0` nothing is compared
/// and the report is marked vacuous.
pub fn run_skew_check(opts: &SkewCheckOptions) -> Result<SkewCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let global = |qe: &Tensor| match opts.fault {
        Some(Fault::OffByOne) => faulty_skew_global(qe),
        None => skew_global(qe),
    };
    let local = |qe: &Tensor| match opts.fault {
        Some(Fault::OffByOne) => faulty_skew_local(qe),
        None => skew_local(qe),
    };

    let mut index_map = Tally::new("global index map");
    let mut gather = Tally::new("global gather");
    for l in 1..=opts.max_len {
        for _ in 0..opts.trials {
            let qe = random(&mut rng, &[l, l]);
            let s = global(&qe)?;
            for i in 0..l {
                for j in 0..=i {
                    index_map.compare(s.get(i, j), qe.get(i, j + l - 1 - i), || format!("L={l} ({i},{j})"));
                }
            }
            index_map.result.instances += 1;

            let q = random(&mut rng, &[l, opts.head_dim]);
            let table = RelativeEmbeddingTable::new(TableMode::Global, random(&mut rng, &[l, opts.head_dim]))?;
            let oracle = naive_srel_global(&q, &table)?;
            let s = global(&matmul_nt(&q, table.embeddings())?)?;
            for i in 0..l {
                for j in 0..=i {
                    gather.compare(s.get(i, j), oracle.get(i, j), || format!("L={l} ({i},{j})"));
                }
            }
            gather.result.instances += 1;
        }
    }

    let mut local_map = Tally::new("local index map");
    let mut local_gather = Tally::new("local gather");
    for n in 1..=opts.max_block {
        for _ in 0..opts.trials {
            let qe = random(&mut rng, &[n, 2 * n - 1]);
            let s = local(&qe)?;
            for i in 0..n {
                for j in 0..n {
                    local_map.compare(s.get(i, j), qe.get(i, j + n - 1 - i), || format!("N={n} ({i},{j})"));
                }
            }
            local_map.result.instances += 1;

            let q = random(&mut rng, &[n, opts.head_dim]);
            let table =
                RelativeEmbeddingTable::new(TableMode::LocalLeft, random(&mut rng, &[2 * n - 1, opts.head_dim]))?;
            let s = local(&matmul_nt(&q, table.embeddings())?)?;
            for i in 0..n {
                for j in 0..n {
                    let d = j as isize - n as isize - i as isize;
                    let want = dot(q.row(i), table.embeddings().row(table.row_for_distance(d)));
                    local_gather.compare(s.get(i, j), want, || format!("N={n} ({i},{j})"));
                }
            }
            local_gather.result.instances += 1;
        }
    }

    Ok(SkewCheckReport {
        suites: vec![index_map.result, gather.result, local_map.result, local_gather.result],
        vacuous: opts.trials == 0 || (opts.max_len == 0 && opts.max_block == 0),
    })
}
