//! Per-sample scalar-loop reference for the fixed-threshold backward pass.

use lifnet::bptt::{backward, BpttOptions};
use lifnet::model::{forward_sequence, Mode, Network};
use lifnet::{Rng, Tensor};

pub struct Reference {
    weights: Vec<Vec<Vec<f64>>>,
    tau: f64,
    th: f64,
    kappa: f64,
    t_steps: usize,
    detach_reset: bool,
}

pub struct RefGrads {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub tau: Vec<f64>,
    pub spikes: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Reference {
    pub fn from_net(net: &Network, detach_reset: bool) -> Self {
        let weights = (0..net.num_layers())
            .map(|l| {
                let w = net.weight(l).unwrap();
                let (r, c) = (w.shape()[0], w.shape()[1]);
                (0..r).map(|i| w.data()[i * c..(i + 1) * c].to_vec()).collect()
            })
            .collect();
        Reference {
            weights,
            tau: net.lif(0).unwrap().tau(),
            th: net.config().lif.v_th_init,
            kappa: net.config().kappa,
            t_steps: net.timesteps(),
            detach_reset,
        }
    }

    fn h(&self, u: f64) -> f64 {
        if (u - self.th).abs() <= self.kappa / 2.0 {
            1.0 / self.kappa
        } else {
            0.0
        }
    }

    /// Forward and backward for each sample separately, summing the gradients.
    pub fn run(&self, x: &[Vec<f64>], d_logits: &[Vec<f64>]) -> RefGrads {
        let n_layers = self.weights.len();
        let hidden = n_layers - 1;
        let big_t = self.t_steps;
        let mut gw: Vec<Vec<Vec<f64>>> = self
            .weights
            .iter()
            .map(|w| w.iter().map(|r| vec![0.0; r.len()]).collect())
            .collect();
        let mut gtau = vec![0.0; hidden];
        let mut all_spikes = Vec::new();

        for (xb, db) in x.iter().zip(d_logits) {
            // u[l][t][j], s[l][t][j], input[l][t][i]
            let mut u = vec![vec![Vec::new(); big_t]; hidden];
            let mut s = vec![vec![Vec::new(); big_t]; hidden];
            let mut inp = vec![vec![Vec::new(); big_t]; n_layers];
            for t in 0..big_t {
                let mut a = xb.clone();
                for l in 0..hidden {
                    inp[l][t] = a.clone();
                    let w = &self.weights[l];
                    let mut ul = vec![0.0; w.len()];
                    let mut sl = vec![0.0; w.len()];
                    for j in 0..w.len() {
                        let mut cur = 0.0;
                        for i in 0..a.len() {
                            cur += w[j][i] * a[i];
                        }
                        let carry = if t == 0 {
                            0.0
                        } else {
                            self.tau * u[l][t - 1][j] * (1.0 - s[l][t - 1][j])
                        };
                        ul[j] = carry + cur;
                        sl[j] = if ul[j] >= self.th { 1.0 } else { 0.0 };
                    }
                    u[l][t] = ul;
                    a = sl.clone();
                    s[l][t] = sl;
                }
                inp[hidden][t] = a;
            }

            let w_out = &self.weights[hidden];
            for c in 0..w_out.len() {
                for j in 0..w_out[c].len() {
                    let acc: f64 = inp[hidden].iter().map(|row| row[j]).sum();
                    gw[hidden][c][j] += db[c] * (acc / big_t as f64);
                }
            }
            let mut up: Vec<Vec<f64>> = (0..big_t)
                .map(|_| {
                    (0..w_out[0].len())
                        .map(|j| (0..w_out.len()).map(|c| db[c] * w_out[c][j]).sum::<f64>() / big_t as f64)
                        .collect()
                })
                .collect();

            for l in (0..hidden).rev() {
                let w = &self.weights[l];
                let n = w.len();
                let mut du_next = vec![0.0; n];
                let mut down = vec![vec![0.0; w[0].len()]; big_t];
                for t in (0..big_t).rev() {
                    let mut du = vec![0.0; n];
                    for j in 0..n {
                        let mut ds = up[t][j];
                        if !self.detach_reset && t + 1 < big_t {
                            ds += du_next[j] * (-self.tau * u[l][t][j]);
                        }
                        du[j] = ds * self.h(u[l][t][j]);
                        if t + 1 < big_t {
                            du[j] += du_next[j] * self.tau * (1.0 - s[l][t][j]);
                        }
                        if t > 0 {
                            gtau[l] += du[j] * u[l][t - 1][j] * (1.0 - s[l][t - 1][j]);
                        }
                        for i in 0..w[j].len() {
                            gw[l][j][i] += du[j] * inp[l][t][i];
                            down[t][i] += du[j] * w[j][i];
                        }
                    }
                    du_next = du;
                }
                up = down;
            }
            all_spikes.push(s);
        }
        RefGrads {
            weights: gw,
            tau: gtau,
            spikes: all_spikes,
        }
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

/// Max |analytic - reference| over all weight and tau gradients; also checks spikes agree.
pub fn compare(net: &mut Network, x: &Tensor, d_logits: &Tensor, opts: &BpttOptions) -> f64 {
    let (trace, _) = forward_sequence(net, x, Mode::Train, opts).unwrap();
    let g = backward(net, &trace, d_logits, opts).unwrap();
    let r = Reference::from_net(net, opts.detach_reset).run(&rows(x), &rows(d_logits));

    for (b, per_sample) in r.spikes.iter().enumerate() {
        for (l, per_layer) in per_sample.iter().enumerate() {
            for (t, s) in per_layer.iter().enumerate() {
                assert_eq!(trace.lif(l, t).unwrap().spikes.row(b), s.as_slice(), "spikes l={l} t={t} b={b}");
            }
        }
    }
    let mut worst = 0.0f64;
    for (l, gl) in r.weights.iter().enumerate() {
        let got = g.weights[l].as_ref().unwrap();
        for (j, row) in gl.iter().enumerate() {
            for (i, &want) in row.iter().enumerate() {
                worst = worst.max((got.data()[j * row.len() + i] - want).abs());
            }
        }
    }
    for (l, &want) in r.tau.iter().enumerate() {
        worst = worst.max((g.tau[l].unwrap() - want).abs());
    }
    worst
}

#[allow(dead_code)]
pub fn dyadic(rng: &mut Rng, shape: &[usize], denom: f64, span: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let steps = (span * denom) as i64;
    let data = (0..n)
        .map(|_| ((rng.uniform() * (2 * steps + 1) as f64) as i64 - steps) as f64 / denom)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

