use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

const SUM_FLOOR: f64 = 1e-12;

/// Radial-basis soft counts averaged over space.
///
/// For input `[N, C, H, W]` with `centers` and `log_widths` of shape `[C, B]`
/// the output is `[N, C*B]` with entry `c*B + b` equal to the spatial mean
/// of `exp(-exp(log_widths[c,b]) * (x - centers[c,b])^2)`. In normalised
/// mode the memberships at each position are divided by their sum over bins.
pub fn rbf_soft_counts<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    centers: Var,
    log_widths: Var,
    normalized: bool,
) -> Result<Var> {
    let &[n, c, h, w] = tape.shape(x) else {
        return Err(shape_err!("soft counts need [N, C, H, W], got {:?}", tape.shape(x)));
    };
    let &[cc, bins] = tape.shape(centers) else {
        return Err(shape_err!("bin centers must be [C, B], got {:?}", tape.shape(centers)));
    };
    if cc != c || tape.shape(log_widths) != [c, bins] {
        return Err(shape_err!(
            "bins {:?}/{:?} do not match {c} channels",
            tape.shape(centers),
            tape.shape(log_widths)
        ));
    }
    let hw = h * w;
    let inv_hw = S::one() / S::from_usize(hw);
    let xs = tape.value(x).data();
    let mu = tape.value(centers).data();
    let gamma: Vec<S> = tape.value(log_widths).data().iter().map(|v| v.exp()).collect();

    let mut out = vec![S::zero(); n * c * bins];
    let mut u = vec![S::zero(); bins];
    for b in 0..n {
        for ch in 0..c {
            let plane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let acc = &mut out[(b * c + ch) * bins..(b * c + ch + 1) * bins];
            for &v in plane {
                let mut total = S::zero();
                for k in 0..bins {
                    let d = v - mu[ch * bins + k];
                    u[k] = (-gamma[ch * bins + k] * d * d).exp();
                    total += u[k];
                }
                let scale = if normalized { S::one() / total.max(S::c(SUM_FLOOR)) } else { S::one() };
                for k in 0..bins {
                    acc[k] += u[k] * scale;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv_hw);
        }
    }
    let out = Tensor::from_parts(vec![n, c * bins], out);

    Ok(tape.record(&[x, centers, log_widths], out, move |ctx| {
        let g = ctx.grad.data();
        let xs = ctx.inputs[0].data();
        let mu = ctx.inputs[1].data();
        let gamma: Vec<S> = ctx.inputs[2].data().iter().map(|v| v.exp()).collect();
        let mut dx = vec![S::zero(); xs.len()];
        let mut dmu = vec![S::zero(); c * bins];
        let mut dlw = vec![S::zero(); c * bins];
        let mut u = vec![S::zero(); bins];
        let mut gu = vec![S::zero(); bins];
        let two = S::c(2.0);
        for b in 0..n {
            for ch in 0..c {
                let gout = &g[(b * c + ch) * bins..(b * c + ch + 1) * bins];
                for p in 0..hw {
                    let xi = (b * c + ch) * hw + p;
                    let v = xs[xi];
                    let mut total = S::zero();
                    for k in 0..bins {
                        let d = v - mu[ch * bins + k];
                        u[k] = (-gamma[ch * bins + k] * d * d).exp();
                        total += u[k];
                    }
                    if normalized {
                        let t = total.max(S::c(SUM_FLOOR));
                        // out_k = u_k / t  =>  d/du_j = (g_j - sum_k g_k u_k / t) / t
                        let dotp: S = (0..bins).map(|k| gout[k] * u[k]).sum::<S>() / t;
                        for k in 0..bins {
                            gu[k] = (gout[k] - dotp) / t * inv_hw;
                        }
                    } else {
                        for k in 0..bins {
                            gu[k] = gout[k] * inv_hw;
                        }
                    }
                    for k in 0..bins {
                        let idx = ch * bins + k;
                        let d = v - mu[idx];
                        let common = gu[k] * u[k];
                        dx[xi] -= common * two * gamma[idx] * d;
                        dmu[idx] += common * two * gamma[idx] * d;
                        dlw[idx] -= common * gamma[idx] * d * d;
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
            Some(Tensor::from_parts(vec![c, bins], dmu)),
            Some(Tensor::from_parts(vec![c, bins], dlw)),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_membership_at_center() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], -0.5));
        let mu = tape.constant(Tensor::new([1, 4], vec![-0.5, 0.0, 0.5, 1.0]).unwrap());
        let lw = tape.constant(Tensor::zeros([1, 4]));
        let y = rbf_soft_counts(&mut tape, x, mu, lw, false).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&m| m < 1.0 && m > 0.0));
    }

    #[test]
    fn normalised_counts_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 1, 2, 2], |i| i as f64 * 0.1));
        let mu = tape.constant(Tensor::new([1, 3], vec![0.0, 0.3, 0.6]).unwrap());
        let lw = tape.constant(Tensor::zeros([1, 3]));
        let y = rbf_soft_counts(&mut tape, x, mu, lw, true).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
