//! Named parameter storage and the layers built on the autodiff tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mat, Tape, Var};

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.values.iter_mut()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Pushes every parameter onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`Params`] set, valid for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn uniform_init(rng: &mut impl Rng, shape: (usize, usize), bound: f64) -> Mat {
    Mat::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn normal_init(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Mat {
    Mat::from_shape_fn(shape, |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

/// Affine layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            input,
            output,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let bound = 1.0 / (self.input as f64).sqrt();
        params.insert(&self.weight, uniform_init(rng, (self.input, self.output), bound));
        params.insert(&self.bias, Mat::zeros((1, self.output)));
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let xw = tape.matmul(x, bound.var(&self.weight));
        tape.add_row(xw, bound.var(&self.bias))
    }
}

/// Gated recurrent cell with fused gate weights laid out as `[reset | update | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_input: String,
    pub w_hidden: String,
    pub b_input: String,
    pub b_hidden: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_input: format!("{prefix}.w_input"),
            w_hidden: format!("{prefix}.w_hidden"),
            b_input: format!("{prefix}.b_input"),
            b_hidden: format!("{prefix}.b_hidden"),
            input,
            hidden,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let k = 1.0 / (self.hidden as f64).sqrt();
        let h3 = 3 * self.hidden;
        params.insert(&self.w_input, uniform_init(rng, (self.input, h3), k));
        params.insert(&self.w_hidden, uniform_init(rng, (self.hidden, h3), k));
        params.insert(&self.b_input, uniform_init(rng, (1, h3), k));
        params.insert(&self.b_hidden, uniform_init(rng, (1, h3), k));
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.leaf(Mat::zeros((batch, self.hidden)))
    }

    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Var {
        self.fused(tape, bound, x, h, None)
    }

    /// Step that leaves rows with `keep == 0` at their previous state.
    pub fn masked_step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var, keep: Rc<Mat>) -> Var {
        self.fused(tape, bound, x, h, Some(keep))
    }

    fn fused(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var, keep: Option<Rc<Mat>>) -> Var {
        tape.gru(
            x,
            h,
            bound.var(&self.w_input),
            bound.var(&self.w_hidden),
            bound.var(&self.b_input),
            bound.var(&self.b_hidden),
            keep,
        )
    }

    /// The same step built from elementary tape operations.
    pub fn composed_step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = tape.matmul(x, bound.var(&self.w_input));
        let gx = tape.add_row(gx, bound.var(&self.b_input));
        let gh = tape.matmul(h, bound.var(&self.w_hidden));
        let gh = tape.add_row(gh, bound.var(&self.b_hidden));

        let rx = tape.slice_cols(gx, 0, hd);
        let rh = tape.slice_cols(gh, 0, hd);
        let r = tape.add(rx, rh);
        let r = tape.sigmoid(r);

        let ux = tape.slice_cols(gx, hd, 2 * hd);
        let uh = tape.slice_cols(gh, hd, 2 * hd);
        let u = tape.add(ux, uh);
        let u = tape.sigmoid(u);

        let nx = tape.slice_cols(gx, 2 * hd, 3 * hd);
        let nh = tape.slice_cols(gh, 2 * hd, 3 * hd);
        let rnh = tape.mul(r, nh);
        let n = tape.add(nx, rnh);
        let n = tape.tanh(n);

        // h' = n + u * (h - n)
        let diff = tape.sub(h, n);
        let gated = tape.mul(u, diff);
        tape.add(n, gated)
    }
}

/// Broadcasts a per-row 0/1 flag to a `rows x cols` constant.
pub fn row_mask(flags: &[bool], cols: usize) -> Rc<Mat> {
    Rc::new(Mat::from_shape_fn((flags.len(), cols), |(r, _)| {
        if flags[r] {
            1.0
        } else {
            0.0
        }
    }))
}
