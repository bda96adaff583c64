use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::EncoderConfig;
use crate::error::Result;
use crate::model::Ctx;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::TokenBatch;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Direction {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

impl Direction {
    fn new<F: Real>(params: &mut ParamStore<F>, name: &str, input: usize, h: usize, rng: &mut Xoshiro256pp) -> Self {
        let wx = params.normal(format!("{name}.wx"), &[input, 4 * h], (1.0 / input as f64).sqrt(), rng);
        let wh = params.normal(format!("{name}.wh"), &[h, 4 * h], (1.0 / h as f64).sqrt(), rng);
        let mut bias = Tensor::zeros(&[4 * h]);
        for v in &mut bias.data_mut()[h..2 * h] {
            *v = F::one();
        }
        let b = params.add(format!("{name}.bias"), bias);
        Self { wx, wh, b }
    }
}

/// Bidirectional LSTM; each direction has width `d/2`, concatenated per
/// token. Padded steps carry the previous state through unchanged and emit
/// zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmEncoder {
    layers: Vec<[Direction; 2]>,
    d: usize,
    dropout: f64,
}

impl LstmEncoder {
    pub fn new<F: Real>(config: &EncoderConfig, params: &mut ParamStore<F>, rng: &mut Xoshiro256pp) -> Self {
        let h = config.d / 2;
        let layers = (0..config.n_layers)
            .map(|i| {
                [
                    Direction::new(params, &format!("encoder.lstm{i}.fwd"), config.d, h, rng),
                    Direction::new(params, &format!("encoder.lstm{i}.bwd"), config.d, h, rng),
                ]
            })
            .collect();
        Self {
            layers,
            d: config.d,
            dropout: config.dropout_prob,
        }
    }

    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        embeddings: Var,
        batch: &TokenBatch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let (rows, m, h) = (batch.rows, batch.seq_len, self.d / 2);
        let mut keep = Vec::with_capacity(m);
        let mut hold = Vec::with_capacity(m);
        for t in 0..m {
            let mut k = Tensor::<F>::zeros(&[rows, h]);
            let mut c = Tensor::<F>::zeros(&[rows, h]);
            for r in 0..rows {
                let on = batch.mask[r * m + t] != 0;
                k.row_mut(r).fill(if on { F::one() } else { F::zero() });
                c.row_mut(r).fill(if on { F::zero() } else { F::one() });
            }
            keep.push(k);
            hold.push(c);
        }
        let gather: Vec<usize> = (0..rows * m).map(|i| (i % m) * rows + i / m).collect();

        let mut x = tape.dropout(embeddings, self.dropout, ctx.rng())?;
        for layer in &self.layers {
            let mut sides = Vec::with_capacity(2);
            for (dir, reverse) in layer.iter().zip([false, true]) {
                let wx = params.on_tape(tape, dir.wx);
                let wh = params.on_tape(tape, dir.wh);
                let b = params.on_tape(tape, dir.b);
                let xw = tape.matmul(x, wx)?;
                let xw = tape.add_row(xw, b)?;
                let mut hs = tape.constant(Tensor::zeros(&[rows, h]));
                let mut cs = tape.constant(Tensor::zeros(&[rows, h]));
                let mut outs = vec![hs; m];
                let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
                for t in order {
                    let ids: Vec<usize> = (0..rows).map(|r| r * m + t).collect();
                    let xt = tape.gather_rows(xw, &ids)?;
                    let hw = tape.matmul(hs, wh)?;
                    let z = tape.add(xt, hw)?;
                    let zi = tape.slice_cols(z, 0, h)?;
                    let zf = tape.slice_cols(z, h, 2 * h)?;
                    let zg = tape.slice_cols(z, 2 * h, 3 * h)?;
                    let zo = tape.slice_cols(z, 3 * h, 4 * h)?;
                    let i = tape.sigmoid(zi);
                    let f = tape.sigmoid(zf);
                    let g = tape.tanh(zg);
                    let o = tape.sigmoid(zo);
                    let fc = tape.mul(f, cs)?;
                    let ig = tape.mul(i, g)?;
                    let c_new = tape.add(fc, ig)?;
                    let tc = tape.tanh(c_new);
                    let h_new = tape.mul(o, tc)?;

                    let c_on = tape.mul_const(c_new, keep[t].clone())?;
                    let c_off = tape.mul_const(cs, hold[t].clone())?;
                    cs = tape.add(c_on, c_off)?;
                    let h_on = tape.mul_const(h_new, keep[t].clone())?;
                    let h_off = tape.mul_const(hs, hold[t].clone())?;
                    hs = tape.add(h_on, h_off)?;
                    outs[t] = h_on;
                }
                let stacked = tape.concat_rows(&outs)?;
                sides.push(tape.gather_rows(stacked, &gather)?);
            }
            let y = tape.concat_cols(&sides)?;
            x = tape.dropout(y, self.dropout, ctx.rng())?;
        }
        Ok(x)
    }
}
