//! Bidirectional GRU layer.
//!
//! Gate parameterization uses two bias vectors per gate (input-side and
//! hidden-side), i.e. 3 * (d_in*h + h^2 + 2h) trainable scalars per
//! direction:
//!
//! ```text
//! r_t = sigmoid(W_ir x_t + b_ir + W_hr h_{t-1} + b_hr)
//! z_t = sigmoid(W_iz x_t + b_iz + W_hz h_{t-1} + b_hz)
//! n_t = tanh(W_in x_t + b_in + r_t o (W_hn h_{t-1} + b_hn))
//! h_t = (1 - z_t) o n_t + z_t o h_{t-1}
//! ```
//!
//! Padded time steps (mask 0) hold the hidden state, so the backward
//! direction is unaffected by trailing padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter vars of one GRU direction. Weight shapes: `w_i*: [h, d_in]`,
/// `w_h*: [h, h]`, all biases `[h]`.
#[derive(Clone, Copy)]
pub struct GruDirParams {
    pub w_ir: Var,
    pub w_iz: Var,
    pub w_in: Var,
    pub w_hr: Var,
    pub w_hz: Var,
    pub w_hn: Var,
    pub b_ir: Var,
    pub b_iz: Var,
    pub b_in: Var,
    pub b_hr: Var,
    pub b_hz: Var,
    pub b_hn: Var,
}

/// Run one direction over `x: [B, T, d_in]`, returning per-step states
/// `[B, h]` indexed by absolute time position.
fn gru_direction<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GruDirParams,
    mask: &Tensor<T>,
    reverse: bool,
) -> Result<Vec<Var>> {
    let xs = tape.val(x).shape().to_vec();
    let (b, t) = (xs[0], xs[1]);
    if t == 0 {
        return Err(Error::Invalid("GRU input has zero time steps".into()));
    }
    let h = tape.val(p.w_ir).shape()[0];

    // Input projections for all steps at once.
    let gx_r = ops::linear_time(tape, x, p.w_ir, Some(p.b_ir))?;
    let gx_z = ops::linear_time(tape, x, p.w_iz, Some(p.b_iz))?;
    let gx_n = ops::linear_time(tape, x, p.w_in, Some(p.b_in))?;

    let mut state = tape.constant(Tensor::zeros(&[b, h]));
    let mut out: Vec<Option<Var>> = vec![None; t];
    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for ti in order {
        let xr = ops::select_time(tape, gx_r, ti)?;
        let xz = ops::select_time(tape, gx_z, ti)?;
        let xn = ops::select_time(tape, gx_n, ti)?;
        let hr = ops::linear(tape, state, p.w_hr, Some(p.b_hr))?;
        let hz = ops::linear(tape, state, p.w_hz, Some(p.b_hz))?;
        let hn = ops::linear(tape, state, p.w_hn, Some(p.b_hn))?;
        let pre_r = ops::add(tape, xr, hr)?;
        let r = ops::sigmoid(tape, pre_r);
        let pre_z = ops::add(tape, xz, hz)?;
        let z = ops::sigmoid(tape, pre_z);
        let gated = ops::mul(tape, r, hn)?;
        let pre_n = ops::add(tape, xn, gated)?;
        let n = ops::tanh_op(tape, pre_n);
        let keep = ops::mul(tape, z, state)?;
        let zc = ops::one_minus(tape, z);
        let fresh = ops::mul(tape, zc, n)?;
        let candidate = ops::add(tape, fresh, keep)?;
        let step_mask = Tensor::new(
            &[b],
            (0..b).map(|bi| mask.at2(bi, ti)).collect(),
        )?;
        state = ops::mask_blend(tape, candidate, state, &step_mask)?;
        out[ti] = Some(state);
    }
    Ok(out.into_iter().map(|v| v.expect("all steps visited")).collect())
}

/// Bidirectional GRU: `x: [B, T, d_in] -> [B, T, 2h]` with forward and
/// backward states concatenated per time step.
pub fn bigru_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    fwd: &GruDirParams,
    bwd: &GruDirParams,
    mask: &Tensor<T>,
) -> Result<Var> {
    let t = tape.val(x).shape()[1];
    let fwd_states = gru_direction(tape, x, fwd, mask, false)?;
    let bwd_states = gru_direction(tape, x, bwd, mask, true)?;
    let mut steps = Vec::with_capacity(t);
    for ti in 0..t {
        steps.push(ops::concat(tape, &[fwd_states[ti], bwd_states[ti]], 1)?);
    }
    ops::stack_time(tape, &steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ParamStore;
    use alloc::format;
    use alloc::string::String;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn add_dir_params(
        store: &mut ParamStore<f64>,
        prefix: &str,
        d_in: usize,
        h: usize,
        rng: &mut impl Rng,
    ) -> Vec<String> {
        let mut names = Vec::new();
        for (name, rows, cols) in [
            ("w_ir", h, d_in),
            ("w_iz", h, d_in),
            ("w_in", h, d_in),
            ("w_hr", h, h),
            ("w_hz", h, h),
            ("w_hn", h, h),
        ] {
            let full = format!("{prefix}.{name}");
            let t = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-0.8..0.8));
            store.add(&full, t).unwrap();
            names.push(full);
        }
        for name in ["b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn"] {
            let full = format!("{prefix}.{name}");
            let t = Tensor::from_fn(&[h], |_| rng.gen_range(-0.5..0.5));
            store.add(&full, t).unwrap();
            names.push(full);
        }
        names
    }

    fn bind_dir(
        store: &ParamStore<f64>,
        bound: &crate::tape::BoundParams,
        names: &[String],
    ) -> GruDirParams {
        let v = |i: usize| bound.get(store.lookup(&names[i]).unwrap());
        GruDirParams {
            w_ir: v(0),
            w_iz: v(1),
            w_in: v(2),
            w_hr: v(3),
            w_hz: v(4),
            w_hn: v(5),
            b_ir: v(6),
            b_iz: v(7),
            b_in: v(8),
            b_hr: v(9),
            b_hz: v(10),
            b_hn: v(11),
        }
    }

    /// Independent scalar-loop GRU used as the oracle.
    fn gru_oracle(
        x: &[Vec<f64>],           // T x d_in (one batch row)
        w: &ParamStore<f64>,
        prefix: &str,
        h: usize,
        reverse: bool,
    ) -> Vec<Vec<f64>> {
        let t_len = x.len();
        let d_in = x[0].len();
        let get = |n: &str| w.get(&format!("{prefix}.{n}")).unwrap();
        let matvec = |m: &Tensor<f64>, v: &[f64], cols: usize| -> Vec<f64> {
            (0..h)
                .map(|i| (0..cols).map(|j| m.data()[i * cols + j] * v[j]).sum())
                .collect()
        };
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut state = vec![0.0; h];
        let mut out = vec![vec![0.0; h]; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for ti in order {
            let xr = matvec(get("w_ir"), &x[ti], d_in);
            let xz = matvec(get("w_iz"), &x[ti], d_in);
            let xn = matvec(get("w_in"), &x[ti], d_in);
            let hr = matvec(get("w_hr"), &state, h);
            let hz = matvec(get("w_hz"), &state, h);
            let hn = matvec(get("w_hn"), &state, h);
            let mut next = vec![0.0; h];
            for i in 0..h {
                let r = sigmoid(xr[i] + get("b_ir").data()[i] + hr[i] + get("b_hr").data()[i]);
                let z = sigmoid(xz[i] + get("b_iz").data()[i] + hz[i] + get("b_hz").data()[i]);
                let n = (xn[i] + get("b_in").data()[i] + r * (hn[i] + get("b_hn").data()[i]))
                    .tanh();
                next[i] = (1.0 - z) * n + z * state[i];
            }
            state = next;
            out[ti] = state.clone();
        }
        out
    }

    #[test]
    fn all_zero_parameters_give_zero_states() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let names = add_dir_params(&mut store, "g", 2, 3, &mut rng);
        for i in 0..store.len() {
            store.value_mut(i).fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let fwd = bind_dir(&store, &bound, &names);
        let x = tape.constant(Tensor::from_fn(&[1, 4, 2], |i| i as f64));
        let mask = Tensor::full(&[1, 4], 1.0);
        let y = bigru_layer(&mut tape, x, &fwd, &fwd, &mask).unwrap();
        // z = r = 0.5, n = 0, h0 = 0 -> h_t = 0 by induction.
        assert!(tape.val(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_step_by_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t_len, d_in, h) = (3, 2, 2);
        let mut store = ParamStore::new();
        let fwd_names = add_dir_params(&mut store, "f", d_in, h, &mut rng);
        let bwd_names = add_dir_params(&mut store, "b", d_in, h, &mut rng);
        let x_rows: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let fwd = bind_dir(&store, &bound, &fwd_names);
        let bwd = bind_dir(&store, &bound, &bwd_names);
        let flat: Vec<f64> = x_rows.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new(&[1, t_len, d_in], flat).unwrap());
        let mask = Tensor::full(&[1, t_len], 1.0);
        let y = bigru_layer(&mut tape, x, &fwd, &bwd, &mask).unwrap();

        let of = gru_oracle(&x_rows, &store, "f", h, false);
        let ob = gru_oracle(&x_rows, &store, "b", h, true);
        for ti in 0..t_len {
            for i in 0..h {
                assert_abs_diff_eq!(tape.val(y).at3(0, ti, i), of[ti][i], epsilon = 1e-12);
                assert_abs_diff_eq!(tape.val(y).at3(0, ti, h + i), ob[ti][i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_step_directions_see_the_same_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let names = add_dir_params(&mut store, "g", 2, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let dir = bind_dir(&store, &bound, &names);
        let x = tape.constant(Tensor::new(&[1, 1, 2], vec![0.3, -0.7]).unwrap());
        let mask = Tensor::full(&[1, 1], 1.0);
        // Same params for both directions: with T = 1 the two halves agree.
        let y = bigru_layer(&mut tape, x, &dir, &dir, &mask).unwrap();
        let v = tape.val(y);
        assert_abs_diff_eq!(v.at3(0, 0, 0), v.at3(0, 0, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(v.at3(0, 0, 1), v.at3(0, 0, 3), epsilon = 1e-15);
    }

    #[test]
    fn time_reversed_input_swaps_direction_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t_len, d_in, h) = (4, 2, 3);
        let mut store = ParamStore::new();
        let names = add_dir_params(&mut store, "g", d_in, h, &mut rng);
        let x_data: Vec<f64> = (0..t_len * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rev_data: Vec<f64> = (0..t_len)
            .rev()
            .flat_map(|ti| x_data[ti * d_in..(ti + 1) * d_in].to_vec())
            .collect();

        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let bound = tape.bind(&store);
            let dir = bind_dir(&store, &bound, &names);
            let x = tape.constant(Tensor::new(&[1, t_len, d_in], data).unwrap());
            let mask = Tensor::full(&[1, t_len], 1.0);
            let y = bigru_layer(&mut tape, x, &dir, &dir, &mask).unwrap();
            tape.val(y).clone()
        };
        let fwd = run(x_data);
        let rev = run(rev_data);
        // Forward half on x equals backward half on reversed x (and vice
        // versa), read at mirrored time positions.
        for ti in 0..t_len {
            for i in 0..h {
                assert_abs_diff_eq!(
                    fwd.at3(0, ti, i),
                    rev.at3(0, t_len - 1 - ti, h + i),
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    fwd.at3(0, ti, h + i),
                    rev.at3(0, t_len - 1 - ti, i),
                    epsilon = 1e-12
                );
            }
        }
    }
}
