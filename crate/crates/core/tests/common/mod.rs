//! Shared fixtures for the integration tests: a random graph generator with
//! a central-difference oracle, and small data helpers.

#![allow(dead_code)]

use pmp_core::autodiff::{Graph, Tensor, Var};
use pmp_core::data::{blocks_from_documents, markov_documents, PackedBlock};
use pmp_core::quantgeom::SeededStream;
use pmp_core::Result;

/// One op applied to the running activation `h` of shape `[rows, cols]`.
#[derive(Clone, Debug)]
enum Step {
    Linear(usize),
    Bias(usize),
    Hadamard(usize),
    RmsNorm(usize),
    Silu,
    Gelu,
    Softmax,
    Scale(f64),
    Transpose,
    /// `softmax(causal(h·hᵀ))·h`.
    SelfAttend,
    Rope,
    /// Concatenate a parameter block along columns, then keep a window.
    ConcatSlice(usize, usize),
    /// `[r, c] -> [r, c/2, 2] -> [c/2, r, 2] -> [c/2, 2r]`.
    Shuffle,
}

#[derive(Clone, Debug)]
enum Start {
    Input(Vec<f64>),
    Param(usize),
    Embedding(usize, Vec<usize>),
}

#[derive(Clone, Debug)]
enum Finish {
    Weighted(Vec<f64>),
    CrossEntropy(Vec<usize>),
}

/// A replayable random computation with at most `max_params` parameters.
#[derive(Clone, Debug)]
pub struct Recipe {
    rows: usize,
    cols: usize,
    start: Start,
    steps: Vec<Step>,
    finish: Finish,
    pub shapes: Vec<Vec<usize>>,
    pub init: Vec<Vec<f64>>,
}

fn uniform(s: &mut SeededStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (2.0 * s.next_f64() - 1.0)).collect()
}

impl Recipe {
    pub fn n_params(&self) -> usize {
        self.init.iter().map(Vec::len).sum()
    }

    fn add_param(&mut self, s: &mut SeededStream, shape: Vec<usize>, scale: f64, budget: usize) -> Option<usize> {
        let n: usize = shape.iter().product();
        if self.n_params() + n > budget {
            return None;
        }
        self.init.push(uniform(s, n, scale));
        self.shapes.push(shape);
        Some(self.init.len() - 1)
    }

    /// Draws a recipe whose inputs and parameters lie in `[-3, 3]`.
    pub fn random(seed: u64, max_params: usize) -> Recipe {
        let mut s = SeededStream::new(seed);
        let rows = 2 + s.below(3) as usize;
        let cols = 2 * (1 + s.below(3) as usize);
        let mut r = Recipe {
            rows,
            cols,
            start: Start::Input(Vec::new()),
            steps: Vec::new(),
            finish: Finish::Weighted(Vec::new()),
            shapes: Vec::new(),
            init: Vec::new(),
        };
        if s.below(3) == 0 {
            let vocab = 3 + s.below(4) as usize;
            let table = r.add_param(&mut s, vec![vocab, cols], 3.0, max_params).expect("fits");
            let ids = (0..rows).map(|_| s.below(vocab as u64) as usize).collect();
            r.start = Start::Embedding(table, ids);
        } else {
            r.start = Start::Input(uniform(&mut s, rows * cols, 3.0));
        }
        let (mut h_rows, mut h_cols) = (rows, cols);
        let n_steps = 2 + s.below(5) as usize;
        while r.steps.len() < n_steps {
            let step = match s.below(13) {
                0 => {
                    let out = 2 * (1 + s.below(3) as usize);
                    let scale = 1.0 / (h_cols as f64).sqrt();
                    r.add_param(&mut s, vec![h_cols, out], scale.min(1.0) * 3.0, max_params).map(|p| {
                        h_cols = out;
                        Step::Linear(p)
                    })
                }
                1 => r.add_param(&mut s, vec![h_cols], 3.0, max_params).map(Step::Bias),
                2 => r.add_param(&mut s, vec![h_rows, h_cols], 1.0, max_params).map(Step::Hadamard),
                3 => r.add_param(&mut s, vec![h_cols], 3.0, max_params).map(Step::RmsNorm),
                4 => Some(Step::Silu),
                5 => Some(Step::Gelu),
                6 => Some(Step::Softmax),
                7 => Some(Step::Scale(uniform(&mut s, 1, 2.0)[0])),
                8 => {
                    std::mem::swap(&mut h_rows, &mut h_cols);
                    Some(Step::Transpose)
                }
                9 => Some(Step::SelfAttend),
                10 => (h_cols % 2 == 0).then_some(Step::Rope),
                11 => {
                    let extra = 1 + s.below(3) as usize;
                    let start = s.below(extra as u64 + 1) as usize;
                    r.add_param(&mut s, vec![h_rows, extra], 3.0, max_params)
                        .map(|p| Step::ConcatSlice(p, start))
                }
                _ => (h_cols % 2 == 0).then(|| {
                    let (nr, nc) = (h_cols / 2, 2 * h_rows);
                    h_rows = nr;
                    h_cols = nc;
                    Step::Shuffle
                }),
            };
            if let Some(step) = step {
                r.steps.push(step);
            } else if r.n_params() >= max_params {
                break;
            }
        }
        if let (0, Start::Input(x)) = (r.n_params(), &r.start) {
            r.shapes.push(vec![rows, cols]);
            r.init.push(x.clone());
            r.start = Start::Param(0);
        }
        r.finish = if s.below(2) == 0 {
            Finish::Weighted(uniform(&mut s, h_rows * h_cols, 1.0))
        } else {
            Finish::CrossEntropy((0..h_rows).map(|_| s.below(h_cols as u64) as usize).collect())
        };
        r
    }

    /// Builds the graph for the given parameter values and returns the
    /// scalar loss and the parameter handles.
    pub fn build(&self, g: &mut Graph<f64>, values: &[Vec<f64>]) -> Result<(Var, Vec<Var>)> {
        let params: Vec<Var> = values
            .iter()
            .zip(&self.shapes)
            .enumerate()
            .map(|(i, (v, s))| g.param(&format!("p{i}"), Tensor::from_f64(s.clone(), v)?))
            .collect::<Result<_>>()?;
        let mut h = match &self.start {
            Start::Input(x) => g.input(Tensor::from_f64(vec![self.rows, self.cols], x)?)?,
            Start::Param(p) => params[*p],
            Start::Embedding(t, ids) => g.embedding(params[*t], ids)?,
        };
        for step in &self.steps {
            h = match *step {
                Step::Linear(p) => g.matmul(h, params[p])?,
                Step::Bias(p) => g.add(h, params[p])?,
                Step::Hadamard(p) => g.mul(h, params[p])?,
                Step::RmsNorm(p) => g.rms_norm(h, params[p], 1e-5)?,
                Step::Silu => g.silu(h)?,
                Step::Gelu => g.gelu(h)?,
                Step::Softmax => g.softmax(h)?,
                Step::Scale(c) => g.scale(h, c)?,
                Step::Transpose => g.transpose(h, 0, 1)?,
                Step::SelfAttend => {
                    let n = g.shape(h)[0];
                    let ht = g.transpose(h, 0, 1)?;
                    let scores = g.matmul(h, ht)?;
                    let scores = g.scale(scores, 0.25)?;
                    let masked = g.causal_mask_fill(scores, n)?;
                    let att = g.softmax(masked)?;
                    g.matmul(att, h)?
                }
                Step::Rope => {
                    let s = g.shape(h).to_vec();
                    let x = g.reshape(h, &[s[0], 1, s[1]])?;
                    let x = g.rope(x, 10_000.0)?;
                    g.reshape(x, &s)?
                }
                Step::ConcatSlice(p, start) => {
                    let c = g.shape(h)[1];
                    let cat = g.concat(&[h, params[p]], 1)?;
                    g.slice(cat, 1, start, start + c)?
                }
                Step::Shuffle => {
                    let s = g.shape(h).to_vec();
                    let x = g.reshape(h, &[s[0], s[1] / 2, 2])?;
                    let x = g.permute(x, &[1, 0, 2])?;
                    g.reshape(x, &[s[1] / 2, 2 * s[0]])?
                }
            };
        }
        let loss = match &self.finish {
            Finish::Weighted(w) => {
                let wv = g.input(Tensor::from_f64(g.shape(h).to_vec(), w)?)?;
                let p = g.mul(h, wv)?;
                g.sum(p)?
            }
            Finish::CrossEntropy(t) => g.cross_entropy_mean(h, t)?,
        };
        Ok((loss, params))
    }

    pub fn loss_at(&self, values: &[Vec<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let (l, _) = self.build(&mut g, values)?;
        Ok(g.value(l).item())
    }

    pub fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let (l, _) = self.build(&mut g, &self.init)?;
        let grads = g.backward(l)?;
        (0..self.init.len())
            .map(|i| {
                grads
                    .get(&format!("p{i}"))
                    .map(|t| t.to_f64())
                    .ok_or_else(|| pmp_core::PmpError::State(format!("missing gradient p{i}")))
            })
            .collect()
    }

    /// Central differences with step `h` on every parameter coordinate.
    pub fn numeric(&self, h: f64) -> Result<Vec<Vec<f64>>> {
        let mut vals = self.init.clone();
        let mut out = Vec::with_capacity(vals.len());
        for p in 0..vals.len() {
            let mut gp = Vec::with_capacity(vals[p].len());
            for i in 0..vals[p].len() {
                let x0 = vals[p][i];
                vals[p][i] = x0 + h;
                let up = self.loss_at(&vals)?;
                vals[p][i] = x0 - h;
                let down = self.loss_at(&vals)?;
                vals[p][i] = x0;
                gp.push((up - down) / (2.0 * h));
            }
            out.push(gp);
        }
        Ok(out)
    }
}

/// Largest relative disagreement between analytic and numeric gradients;
/// entries with both magnitudes under `floor` are compared absolutely.
pub fn max_relative_error(a: &[Vec<f64>], n: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Synthetic Markov pre-training stream of `block_len`-token blocks.
pub fn markov_blocks(n_docs: usize, block_len: usize, seed: u64, shuffle: bool) -> Vec<PackedBlock> {
    let docs = markov_documents(n_docs, 50, 400, seed);
    blocks_from_documents(docs, block_len, shuffle.then_some((1024, seed))).expect("nonempty corpus")
}
