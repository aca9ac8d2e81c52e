//! Independent objective in 128-bit arithmetic, used as the finite-difference
//! oracle for the analytic gradient.

use std::collections::HashMap;

use astro_float::{BigFloat, Consts, RoundingMode};
use mixlaw_core::dlc::DlcFeatures;
use mixlaw_core::model::DataPoint;

const P: usize = 128;
const RM: RoundingMode = RoundingMode::ToEven;
/// Spacing of the cached exponentials used to reduce logarithms.
const GRID: f64 = 1024.0;

fn big(x: f64) -> BigFloat {
    BigFloat::from_f64(x, P)
}

fn add(a: &BigFloat, b: &BigFloat) -> BigFloat {
    a.add(b, P, RM)
}

fn sub(a: &BigFloat, b: &BigFloat) -> BigFloat {
    a.sub(b, P, RM)
}

fn mul(a: &BigFloat, b: &BigFloat) -> BigFloat {
    a.mul(b, P, RM)
}

fn div(a: &BigFloat, b: &BigFloat) -> BigFloat {
    a.div(b, P, RM)
}

pub fn to_f64(x: &BigFloat) -> f64 {
    format!("{x}").parse().expect("finite value")
}

/// Distinct values of one coordinate and the index of each point's value.
fn distinct(values: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<usize>) {
    let mut seen = HashMap::new();
    let mut uniq = Vec::new();
    let idx = values
        .map(|v| {
            *seen.entry(v.to_bits()).or_insert_with(|| {
                uniq.push(v);
                uniq.len() - 1
            })
        })
        .collect();
    (uniq, idx)
}

pub struct Reference {
    cc: Consts,
    grid: HashMap<i64, BigFloat>,
    n: (Vec<f64>, Vec<usize>),
    d: (Vec<f64>, Vec<usize>),
    r: (Vec<f64>, Vec<usize>),
    ln_n: Vec<BigFloat>,
    ln_d: Vec<BigFloat>,
    ln_r: Vec<Option<BigFloat>>,
    ln_loss: Vec<BigFloat>,
    groups: Vec<usize>,
    features: Vec<DlcFeatures>,
    d_min: f64,
    delta: f64,
}

impl Reference {
    /// `features` empty means the plain law; otherwise the cross-domain
    /// law with K4 weights.
    pub fn new(points: &[DataPoint], groups: &[u32], features: Vec<DlcFeatures>, d_min: f64, delta: f64) -> Self {
        let mut cc = Consts::new().expect("constants cache");
        let n = distinct(points.iter().map(|p| p.n));
        let d = distinct(points.iter().map(|p| p.d));
        let r = distinct(points.iter().map(|p| p.r));
        let ln_n = n.0.iter().map(|&x| big(x).ln(P, RM, &mut cc)).collect();
        let ln_d = d.0.iter().map(|&x| big(x).ln(P, RM, &mut cc)).collect();
        let ln_r = r.0.iter().map(|&x| (x > 0.0).then(|| big(x).ln(P, RM, &mut cc))).collect();
        let ln_loss = points.iter().map(|p| big(p.loss).ln(P, RM, &mut cc)).collect();
        Reference {
            cc,
            grid: HashMap::new(),
            n,
            d,
            r,
            ln_n,
            ln_d,
            ln_r,
            ln_loss,
            groups: groups.iter().map(|&g| g as usize).collect(),
            features,
            d_min,
            delta,
        }
    }

    fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(P, RM, &mut self.cc)
    }

    fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(P, RM, &mut self.cc)
    }

    /// `ln x` for `x > 0` given an f64 approximation `approx`: reduce by a
    /// cached `exp(-k/GRID)` and sum the `ln(1+z)` series.
    fn ln_fast(&mut self, x: &BigFloat, approx: f64) -> BigFloat {
        let k = (approx.ln() * GRID).round() as i64;
        if !self.grid.contains_key(&k) {
            let e = self.exp(&big(-(k as f64) / GRID));
            self.grid.insert(k, e);
        }
        let z = sub(&mul(x, &self.grid[&k]), &big(1.0));
        assert!(to_f64(&z).abs() < 1e-3, "logarithm reduction out of range");
        let mut term = z.clone();
        let mut sum = z.clone();
        for j in 2..=14 {
            term = mul(&term, &z);
            let t = div(&term, &big(j as f64));
            sum = if j % 2 == 0 { sub(&sum, &t) } else { add(&sum, &t) };
        }
        add(&big(k as f64 / GRID), &sum)
    }

    /// Mean Huber loss of the log residuals at a fitting-coordinate vector.
    pub fn objective(&mut self, v: &[f64]) -> BigFloat {
        let gamma = self.exp(&big(v[6]));
        let eta = add(&big(1.0), &self.exp(&big(v[7])));
        let eps = v[8].clamp(1e-4, 1.0);
        let b = self.exp(&big(v[1]));
        let beta = big(v[5]);

        // C = B eta (1+eps)^(gamma+1) / (gamma d_min^beta) + exp(c1)
        let ln_1eps = self.ln(&big(1.0 + eps));
        let pow_eps = self.exp(&mul(&add(&gamma, &big(1.0)), &ln_1eps));
        let ln_dmin = self.ln(&big(self.d_min));
        let pow_dmin = self.exp(&mul(&beta, &ln_dmin));
        let c0 = div(&mul(&mul(&b, &eta), &pow_eps), &mul(&gamma, &pow_dmin));
        let c = add(&c0, &self.exp(&big(v[2])));
        let ln_c = self.ln(&c);

        let e = self.exp(&big(v[3]));
        let a_term: Vec<BigFloat> = (0..self.ln_n.len())
            .map(|i| {
                let x = sub(&big(v[0]), &mul(&big(v[4]), &self.ln_n[i]));
                self.exp(&x)
            })
            .collect();
        let d_term: Vec<BigFloat> = (0..self.ln_d.len())
            .map(|i| {
                let x = mul(&beta, &self.ln_d[i]).neg();
                self.exp(&x)
            })
            .collect();
        let mut b_term = Vec::new();
        let mut c_term = Vec::new();
        for i in 0..self.r.0.len() {
            b_term.push(match self.ln_r[i].clone() {
                Some(l) => {
                    let x = add(&big(v[1]), &mul(&eta, &l));
                    self.exp(&x)
                }
                None => big(0.0),
            });
            let l = self.ln(&add(&big(self.r.0[i]), &big(eps)));
            let x = sub(&ln_c, &mul(&gamma, &l));
            c_term.push(self.exp(&x));
        }
        let f_term: Vec<BigFloat> = (0..self.features.len())
            .map(|g| {
                let f = self.features[g];
                let k = add(
                    &add(&div(&big(v[11]), &big(f.k1)), &mul(&big(v[12]), &big(f.k2))),
                    &div(&big(v[13]), &big(f.k3)),
                );
                let ln_k = self.ln(&k);
                let x = sub(&big(v[9]), &mul(&big(v[10]), &ln_k));
                self.exp(&x)
            })
            .collect();

        let delta = big(self.delta);
        let half = big(0.5);
        let mut total = big(0.0);
        let count = self.ln_loss.len();
        for i in 0..count {
            let (ni, di, ri) = (self.n.1[i], self.d.1[i], self.r.1[i]);
            let mut s = add(&e, &a_term[ni]);
            s = add(&s, &mul(&b_term[ri], &d_term[di]));
            s = add(&s, &c_term[ri]);
            if !self.features.is_empty() {
                s = add(&s, &f_term[self.groups[i]]);
            }
            let approx = to_f64(&s);
            let res = sub(&self.ln_fast(&s, approx), &self.ln_loss[i]);
            let abs = res.abs();
            let h = if abs.cmp(&delta) != Some(1) {
                mul(&half, &mul(&res, &res))
            } else {
                mul(&delta, &sub(&abs, &mul(&half, &delta)))
            };
            total = add(&total, &h);
        }
        div(&total, &big(count as f64))
    }

    /// Central difference of the objective in coordinate `k` with step
    /// `1e-6 |v_k|` (or `1e-6` at zero).
    pub fn central_difference(&mut self, v: &[f64], k: usize) -> f64 {
        let h = 1e-6 * if v[k] != 0.0 { v[k].abs() } else { 1.0 };
        let (mut vp, mut vm) = (v.to_vec(), v.to_vec());
        vp[k] += h;
        vm[k] -= h;
        let num = sub(&self.objective(&vp), &self.objective(&vm));
        to_f64(&div(&num, &sub(&big(vp[k]), &big(vm[k]))))
    }
}
