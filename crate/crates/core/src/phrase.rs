//! Bidirectional GRU over the encoder outputs.

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng::{normal_vec, SeededRng, INIT_STD};
use crate::tensor::{Parameter, Tensor, TensorError};

/// Gate parameters for one direction.
#[derive(Debug, Clone)]
pub struct GruDirection {
    pub w_z: Parameter,
    pub w_r: Parameter,
    pub w_h: Parameter,
    pub u_z: Parameter,
    pub u_r: Parameter,
    pub u_h: Parameter,
    pub b_z: Parameter,
    pub b_r: Parameter,
    pub b_h: Parameter,
}

impl GruDirection {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut w = |n: &str, rows: usize| {
            Parameter::new(format!("{name}.{n}"), &[rows, hidden], normal_vec(rng, rows * hidden, INIT_STD))
        };
        let (w_z, w_r, w_h) = (w("w_z", input)?, w("w_r", input)?, w("w_h", input)?);
        let (u_z, u_r, u_h) = (w("u_z", hidden)?, w("u_r", hidden)?, w("u_h", hidden)?);
        let b = |n: &str| Parameter::new(format!("{name}.{n}"), &[hidden], vec![0.0; hidden]);
        Ok(Self { w_z, w_r, w_h, u_z, u_r, u_h, b_z: b("b_z")?, b_r: b("b_r")?, b_h: b("b_h")? })
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    /// One step for a batch: `x` is `(B, D)`, `h` is `(B, H_g)`.
    pub fn cell(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let rows = x.shape()[0];
        if x.shape() != [rows, self.input_dim()] || h.shape() != [rows, self.hidden_dim()] {
            return Err(Error::Usage(format!(
                "gru cell expects ({rows}, {}) input and ({rows}, {}) state, got {:?} and {:?}",
                self.input_dim(),
                self.hidden_dim(),
                x.shape(),
                h.shape()
            )));
        }
        let gate = |w: &Parameter, u: &Parameter, b: &Parameter, hh: &Tensor| -> Result<Tensor> {
            Ok(x.matmul(w.tensor())?.add(&hh.matmul(u.tensor())?)?.add_row(b.tensor())?)
        };
        let z = gate(&self.w_z, &self.u_z, &self.b_z, h)?.sigmoid();
        let r = gate(&self.w_r, &self.u_r, &self.b_r, h)?.sigmoid();
        let candidate = gate(&self.w_h, &self.u_h, &self.b_h, &r.mul(h)?)?.tanh();
        Ok(h.add(&z.mul(&candidate.sub(h)?)?)?)
    }

    /// Runs over all time steps of `x` `(B*L, D)`; returns per-step outputs `(B, H_g)`
    /// indexed by position.
    fn run(&self, x: &Tensor, mask: &[f64], b: usize, l: usize, reverse: bool) -> Result<Vec<Tensor>> {
        let hg = self.hidden_dim();
        let w = Tensor::concat(&[self.w_z.tensor().clone(), self.w_r.tensor().clone(), self.w_h.tensor().clone()], 1)?;
        let bias = Tensor::concat(&[self.b_z.tensor().clone(), self.b_r.tensor().clone(), self.b_h.tensor().clone()], 0)?;
        let u_zr = Tensor::concat(&[self.u_z.tensor().clone(), self.u_r.tensor().clone()], 1)?;
        let projected = x.matmul(&w)?.add_row(&bias)?;
        let mut h = Tensor::zeros(&[b, hg]);
        let mut outputs = vec![None; l];
        let steps: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in steps {
            let rows: Vec<usize> = (0..b).map(|i| i * l + t).collect();
            let xt = projected.gather_rows(&rows)?;
            let hu = h.matmul(&u_zr)?;
            let z = xt.narrow(0, hg)?.add(&hu.narrow(0, hg)?)?.sigmoid();
            let r = xt.narrow(hg, hg)?.add(&hu.narrow(hg, hg)?)?.sigmoid();
            let candidate = xt.narrow(2 * hg, hg)?.add(&r.mul(&h)?.matmul(self.u_h.tensor())?)?.tanh();
            let h_new = h.add(&z.mul(&candidate.sub(&h)?)?)?;
            let m: Vec<f64> = rows.iter().map(|&r| mask[r]).collect();
            if m.iter().all(|&v| v == 1.0) {
                h = h_new;
                outputs[t] = Some(h.clone());
            } else {
                let mt = Tensor::new(&[b, hg], m.iter().flat_map(|&v| std::iter::repeat_n(v, hg)).collect())?;
                h = h.add(&mt.mul(&h_new.sub(&h)?)?)?;
                outputs[t] = Some(mt.mul(&h)?);
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("every step visited")).collect())
    }
}

impl Module for GruDirection {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

/// Forward and backward GRUs whose outputs are concatenated per position.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

impl BiGru {
    pub fn new(input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("gru input and hidden sizes must be positive".into()));
        }
        Ok(Self {
            forward: GruDirection::new("phrase.forward", input, hidden, rng)?,
            backward: GruDirection::new("phrase.backward", input, hidden, rng)?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim()
    }

    /// `h` is `(B, L, D)`, `mask` `(B, L)`. Returns `(B, L, 2 H_g)`, zero at masked positions.
    ///
    /// Masked positions leave the state untouched, so with right padding the
    /// forward direction stops at the last valid token and the backward
    /// direction starts there.
    pub fn forward(&self, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let shape = h.shape();
        if shape.len() != 3 || mask.shape() != [shape[0], shape[1]] || shape[2] != self.forward.input_dim() {
            return Err(Error::Usage(format!(
                "bigru expects (B, L, {}) input with (B, L) mask, got {shape:?} and {:?}",
                self.forward.input_dim(),
                mask.shape()
            )));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        check_rows(mask)?;
        let x = h.reshape(&[b * l, d])?;
        let hg = self.hidden_dim();
        let stack = |steps: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::concat(&steps, 1)?.reshape(&[b, l, hg])?) };
        let fwd = stack(self.forward.run(&x, mask.data(), b, l, false)?)?;
        let bwd = stack(self.backward.run(&x, mask.data(), b, l, true)?)?;
        Ok(Tensor::concat(&[fwd, bwd], 2)?)
    }
}

impl Module for BiGru {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.forward.parameters();
        p.extend(self.backward.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.forward.parameters_mut();
        p.extend(self.backward.parameters_mut());
        p
    }
}

fn check_rows(mask: &Tensor) -> Result<()> {
    let l = mask.shape()[1];
    for (row, m) in mask.data().chunks(l).enumerate() {
        if m.iter().all(|&v| v == 0.0) {
            return Err(TensorError::NoValidPositions { row }.into());
        }
    }
    Ok(())
}

/// `[forward state at the last valid position, backward state at the first]`, `(B, 2 H_g)`.
pub fn final_repr(g: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shape = g.shape();
    if shape.len() != 3 || mask.shape() != [shape[0], shape[1]] || shape[2] % 2 != 0 {
        return Err(Error::Usage(format!("final_repr: output {shape:?} does not match mask {:?}", mask.shape())));
    }
    check_rows(mask)?;
    let (b, l, two_hg) = (shape[0], shape[1], shape[2]);
    let hg = two_hg / 2;
    let mut last = Vec::with_capacity(b);
    let mut first = Vec::with_capacity(b);
    for (i, m) in mask.data().chunks(l).enumerate() {
        let valid: Vec<usize> = (0..l).filter(|&t| m[t] != 0.0).collect();
        last.push(i * l + valid[valid.len() - 1]);
        first.push(i * l + valid[0]);
    }
    let flat = g.reshape(&[b * l, two_hg])?;
    let fwd = flat.gather_rows(&last)?.narrow(0, hg)?;
    let bwd = flat.gather_rows(&first)?.narrow(hg, hg)?;
    Ok(Tensor::concat(&[fwd, bwd], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::testing::check_grads;
    use rand::RngExt;

    fn random(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// Direction with all parameters drawn uniformly from `(-scale, scale)`.
    fn random_direction(rng: &mut SeededRng, d: usize, hg: usize, scale: f64) -> GruDirection {
        let mut dir = GruDirection::new("t", d, hg, rng).unwrap();
        for p in dir.parameters_mut() {
            let n = p.values().len();
            p.set_values(random(rng, n, scale)).unwrap();
        }
        dir
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-by-scalar evaluation of one step for a single sample.
    fn cell_oracle(dir: &GruDirection, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (d, hg) = (dir.input_dim(), dir.hidden_dim());
        let lin = |w: &Parameter, u: &Parameter, b: &Parameter, hh: &[f64], j: usize| {
            let mut acc = b.values()[j];
            for k in 0..d {
                acc += x[k] * w.values()[k * hg + j];
            }
            for k in 0..hg {
                acc += hh[k] * u.values()[k * hg + j];
            }
            acc
        };
        let z: Vec<f64> = (0..hg).map(|j| sig(lin(&dir.w_z, &dir.u_z, &dir.b_z, h, j))).collect();
        let r: Vec<f64> = (0..hg).map(|j| sig(lin(&dir.w_r, &dir.u_r, &dir.b_r, h, j))).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        (0..hg)
            .map(|j| {
                let cand = lin(&dir.w_h, &dir.u_h, &dir.b_h, &rh, j).tanh();
                (1.0 - z[j]) * h[j] + z[j] * cand
            })
            .collect()
    }

    #[test]
    fn zero_parameters_keep_zero_state() {
        let mut rng = seeded(1);
        let mut dir = GruDirection::new("t", 3, 2, &mut rng).unwrap();
        for p in dir.parameters_mut() {
            let n = p.values().len();
            p.set_values(vec![0.0; n]).unwrap();
        }
        let x = Tensor::new(&[1, 3], vec![0.4, -1.0, 2.0]).unwrap();
        let h = dir.cell(&x, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_gives_candidate() {
        let mut rng = seeded(2);
        let mut dir = GruDirection::new("t", 2, 2, &mut rng).unwrap();
        for p in dir.parameters_mut() {
            let n = p.values().len();
            p.set_values(vec![0.0; n]).unwrap();
        }
        dir.b_z.set_values(vec![50.0, 50.0]).unwrap();
        dir.b_h.set_values(vec![0.3, -0.8]).unwrap();
        let h = dir.cell(&Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(), &Tensor::zeros(&[1, 2])).unwrap();
        assert!((h.data()[0] - 0.3f64.tanh()).abs() < 1e-12);
        assert!((h.data()[1] - (-0.8f64).tanh()).abs() < 1e-12);
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = seeded(3);
        let dir = random_direction(&mut rng, 4, 3, 0.8);
        let x = random(&mut rng, 2 * 4, 1.0);
        let h = random(&mut rng, 2 * 3, 0.9);
        let out = dir.cell(&Tensor::new(&[2, 4], x.clone()).unwrap(), &Tensor::new(&[2, 3], h.clone()).unwrap()).unwrap();
        for b in 0..2 {
            let expect = cell_oracle(&dir, &x[b * 4..(b + 1) * 4], &h[b * 3..(b + 1) * 3]);
            for j in 0..3 {
                assert!((out.data()[b * 3 + j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let mut rng = seeded(4);
        let dir = GruDirection::new("t", 4, 3, &mut rng).unwrap();
        assert!(dir.cell(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).is_err());
    }

    fn random_bigru(rng: &mut SeededRng, d: usize, hg: usize) -> BiGru {
        BiGru { forward: random_direction(rng, d, hg, 0.7), backward: random_direction(rng, d, hg, 0.7) }
    }

    fn mask_for(lens: &[usize], l: usize) -> Tensor {
        let data = lens.iter().flat_map(|&n| (0..l).map(move |i| if i < n { 1.0 } else { 0.0 })).collect();
        Tensor::new(&[lens.len(), l], data).unwrap()
    }

    #[test]
    fn bigru_matches_cell_loop() {
        let mut rng = seeded(5);
        let (d, hg, l) = (4, 3, 5);
        let gru = random_bigru(&mut rng, d, hg);
        let lens = [5, 2, 1];
        let h = Tensor::new(&[3, l, d], random(&mut rng, 3 * l * d, 1.0)).unwrap();
        let g = gru.forward(&h, &mask_for(&lens, l)).unwrap();
        assert_eq!(g.shape(), &[3, l, 2 * hg]);
        for (b, &n) in lens.iter().enumerate() {
            let xs: Vec<&[f64]> = (0..n).map(|t| &h.data()[(b * l + t) * d..(b * l + t + 1) * d]).collect();
            let mut state = vec![0.0; hg];
            let mut fwd = Vec::new();
            for x in &xs {
                state = cell_oracle(&gru.forward, x, &state);
                fwd.push(state.clone());
            }
            let mut state = vec![0.0; hg];
            let mut bwd = vec![Vec::new(); n];
            for t in (0..n).rev() {
                state = cell_oracle(&gru.backward, xs[t], &state);
                bwd[t] = state.clone();
            }
            for t in 0..l {
                let row = &g.data()[(b * l + t) * 2 * hg..(b * l + t + 1) * 2 * hg];
                for j in 0..hg {
                    let (ef, eb) = if t < n { (fwd[t][j], bwd[t][j]) } else { (0.0, 0.0) };
                    assert!((row[j] - ef).abs() < 1e-12, "fwd b{b} t{t}");
                    assert!((row[hg + j] - eb).abs() < 1e-12, "bwd b{b} t{t}");
                }
            }
        }
    }

    #[test]
    fn single_token_gives_one_nonzero_row() {
        let mut rng = seeded(6);
        let gru = random_bigru(&mut rng, 3, 2);
        let h = Tensor::new(&[1, 4, 3], random(&mut rng, 12, 1.0)).unwrap();
        let mask = mask_for(&[1], 4);
        let g = gru.forward(&h, &mask).unwrap();
        let nonzero_rows = g.data().chunks(4).filter(|r| r.iter().any(|&v| v != 0.0)).count();
        assert_eq!(nonzero_rows, 1);
        let f = final_repr(&g, &mask).unwrap();
        assert_eq!(f.data(), &g.data()[0..4]);
    }

    #[test]
    fn padding_invariance() {
        let mut rng = seeded(7);
        let (d, hg) = (4, 3);
        let gru = random_bigru(&mut rng, d, hg);
        let valid = random(&mut rng, 3 * d, 1.0);
        let unpadded = Tensor::new(&[1, 3, d], valid.clone()).unwrap();
        let short = final_repr(&gru.forward(&unpadded, &mask_for(&[3], 3)).unwrap(), &mask_for(&[3], 3)).unwrap();
        let mut padded = valid;
        padded.extend(random(&mut rng, 125 * d, 5.0));
        let padded = Tensor::new(&[1, 128, d], padded).unwrap();
        let mask = mask_for(&[3], 128);
        let long = final_repr(&gru.forward(&padded, &mask).unwrap(), &mask).unwrap();
        for (a, b) in short.data().iter().zip(long.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_empty_rows_and_mismatched_masks() {
        let mut rng = seeded(8);
        let gru = random_bigru(&mut rng, 2, 2);
        let h = Tensor::zeros(&[2, 3, 2]);
        assert!(gru.forward(&h, &mask_for(&[2, 0], 3)).is_err());
        assert!(gru.forward(&h, &mask_for(&[2], 3)).is_err());
        let g = Tensor::zeros(&[2, 3, 4]);
        assert!(final_repr(&g, &mask_for(&[2, 2], 4)).is_err());
    }

    #[test]
    fn unrolled_gradients_match_finite_differences() {
        let mut rng = seeded(9);
        let (d, hg, l) = (3, 2, 4);
        let gru = random_bigru(&mut rng, d, hg);
        let h = Tensor::leaf(&[1, l, d], random(&mut rng, l * d, 1.0)).unwrap();
        let mut inputs = vec![h];
        inputs.extend(gru.parameters().iter().map(|p| p.tensor().clone()));
        let weights = random(&mut rng, 2 * hg, 1.0);
        check_grads(&inputs, |v| {
            let mut g2 = gru.clone();
            for (p, t) in g2.parameters_mut().into_iter().zip(&v[1..]) {
                *p = p.replaced(t.clone());
            }
            let g = g2.forward(&v[0], &mask_for(&[l], l)).unwrap();
            let f = final_repr(&g, &mask_for(&[l], l)).unwrap();
            f.mul(&Tensor::new(&[1, 2 * hg], weights.clone()).unwrap()).unwrap().sum_all()
        });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn state_stays_bounded(seed in 0u64..500, h0 in proptest::collection::vec(-3.0f64..3.0, 3)) {
                let mut rng = seeded(seed);
                let dir = random_direction(&mut rng, 2, 3, 2.0);
                let x = Tensor::new(&[1, 2], random(&mut rng, 2, 3.0)).unwrap();
                let out = dir.cell(&x, &Tensor::new(&[1, 3], h0.clone()).unwrap()).unwrap();
                for (o, h) in out.data().iter().zip(&h0) {
                    prop_assert!(o.abs() <= h.abs().max(1.0) + 1e-12);
                }
            }
        }
    }
}
