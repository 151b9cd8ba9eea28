//! ARIMA(p,d,q) fitted by conditional sum of squares, and the step-level
//! length predictor built on top of it.

use serde::{Deserialize, Serialize};

use super::LengthDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArimaOrder {
    fn default() -> Self {
        ArimaOrder { p: 1, d: 1, q: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arima {
    pub order: ArimaOrder,
    pub constant: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    series: Vec<f64>,
}

fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut w = x.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    w
}

/// One-step residuals of an ARMA model on `w`; pre-sample values are zero.
fn residuals(w: &[f64], c: f64, ar: &[f64], ma: &[f64]) -> Vec<f64> {
    let p = ar.len();
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut pred = c;
        for (i, a) in ar.iter().enumerate() {
            pred += a * w[t - 1 - i];
        }
        for (j, m) in ma.iter().enumerate() {
            if t > j {
                pred += m * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

fn css(w: &[f64], params: &[f64], p: usize) -> f64 {
    let (c, rest) = params.split_first().expect("constant term");
    let (ar, ma) = rest.split_at(p);
    // stationarity / invertibility box
    if ar.iter().map(|a| a.abs()).sum::<f64>() >= 0.99 || ma.iter().map(|m| m.abs()).sum::<f64>() >= 0.99 {
        return f64::INFINITY;
    }
    residuals(w, *c, ar, ma).iter().skip(p).map(|e| e * e).sum()
}

/// Nelder–Mead minimiser over an unconstrained parameter vector.
fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, start: &[f64], scale: &[f64], iters: usize) -> Vec<f64> {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += scale[i];
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..iters {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() <= 1e-12 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> =
                        (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    vals[i] = f(&shrunk);
                    simplex[i] = shrunk;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    simplex.swap_remove(best)
}

impl Arima {
    /// Fits the model to `series`. Orders too rich for the available data
    /// degrade to a constant-drift model on the differenced series.
    pub fn fit(series: &[f64], order: ArimaOrder) -> Arima {
        let w = difference(series, order.d);
        let mean = if w.is_empty() { 0.0 } else { w.iter().sum::<f64>() / w.len() as f64 };
        let var = if w.is_empty() {
            0.0
        } else {
            w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64
        };
        let trivial = Arima {
            order,
            constant: mean,
            ar: vec![0.0; order.p],
            ma: vec![0.0; order.q],
            series: series.to_vec(),
        };
        if var == 0.0 || w.len() < order.p + order.q + 3 {
            return trivial;
        }
        let k = 1 + order.p + order.q;
        let mut start = vec![0.0; k];
        start[0] = mean;
        let mut scale = vec![0.1; k];
        scale[0] = var.sqrt().max(1e-9) * 0.5;
        let best = nelder_mead(|x| css(&w, x, order.p), &start, &scale, 400 * k);
        let (c, rest) = best.split_first().unwrap();
        let (ar, ma) = rest.split_at(order.p);
        Arima { order, constant: *c, ar: ar.to_vec(), ma: ma.to_vec(), series: series.to_vec() }
    }

    /// `h`-step-ahead forecasts on the original (undifferenced) scale.
    pub fn forecast(&self, h: usize) -> Vec<f64> {
        if self.series.is_empty() {
            return vec![0.0; h];
        }
        let d = self.order.d;
        let mut levels: Vec<Vec<f64>> = vec![self.series.clone()];
        for _ in 0..d {
            let next = difference(levels.last().unwrap(), 1);
            levels.push(next);
        }
        let mut w = levels[d].clone();
        let mut e = residuals(&w, self.constant, &self.ar, &self.ma);
        let mut out = Vec::with_capacity(h);
        for _ in 0..h {
            let t = w.len();
            let mut pred = self.constant;
            for (i, a) in self.ar.iter().enumerate() {
                if t > i {
                    pred += a * w[t - 1 - i];
                }
            }
            for (j, m) in self.ma.iter().enumerate() {
                if t > j {
                    pred += m * e[t - 1 - j];
                }
            }
            w.push(pred);
            e.push(0.0);
            // integrate back through each differencing level
            let mut value = pred;
            for lvl in (0..d).rev() {
                value += *levels[lvl].last().unwrap();
                levels[lvl].push(value);
            }
            if d == 0 {
                out.push(pred);
            } else {
                out.push(value);
            }
        }
        out
    }
}

/// Forecast of next step's response-length distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    /// Set when there was too little history to fit and the last
    /// observation is carried forward instead.
    pub fallback: bool,
    pub bucket_width: u32,
    frequencies: Vec<f64>,
    mean: f64,
}

impl Predictor {
    /// Normalised per-bucket frequencies (non-negative, summing to 1 unless empty).
    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn forecast_mean(&self) -> f64 {
        self.mean
    }

    /// Scales the forecast frequencies to a histogram of `total` requests
    /// using largest-remainder rounding.
    pub fn forecast_distribution(&self, total: u64) -> LengthDistribution {
        let mut d = LengthDistribution::empty(self.bucket_width);
        if self.frequencies.is_empty() || total == 0 {
            return d;
        }
        let raw: Vec<f64> = self.frequencies.iter().map(|f| f * total as f64).collect();
        let mut counts: Vec<u64> = raw.iter().map(|r| r.floor() as u64).collect();
        let mut left = total - counts.iter().sum::<u64>();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if self.frequencies[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        d.counts = counts;
        d.total = total;
        d
    }
}

/// Fits per-bucket frequency and step-mean models over `history`
/// (oldest first). Fewer than three steps fall back to the last observation.
pub fn fit_predictor(history: &[LengthDistribution], order: ArimaOrder) -> Predictor {
    let width = history.first().map_or(super::DEFAULT_BUCKET_WIDTH, |d| d.bucket_width);
    let Some(last) = history.last() else {
        return Predictor { fallback: true, bucket_width: width, frequencies: Vec::new(), mean: 0.0 };
    };
    if history.len() < 3 {
        return Predictor {
            fallback: true,
            bucket_width: width,
            frequencies: last.frequencies(),
            mean: last.mean(),
        };
    }
    let n_buckets = history.iter().map(|d| d.counts.len()).max().unwrap_or(0);
    let freq_series: Vec<Vec<f64>> = history
        .iter()
        .map(|d| {
            let mut f = d.frequencies();
            f.resize(n_buckets, 0.0);
            f
        })
        .collect();
    let mut freqs: Vec<f64> = (0..n_buckets)
        .map(|b| {
            let s: Vec<f64> = freq_series.iter().map(|f| f[b]).collect();
            Arima::fit(&s, order).forecast(1)[0].max(0.0)
        })
        .collect();
    let sum: f64 = freqs.iter().sum();
    if sum > 0.0 {
        freqs.iter_mut().for_each(|f| *f /= sum);
    } else {
        freqs = last.frequencies();
        freqs.resize(n_buckets, 0.0);
    }
    let means: Vec<f64> = history.iter().map(LengthDistribution::mean).collect();
    let mean = Arima::fit(&means, order).forecast(1)[0].max(0.0);
    Predictor { fallback: false, bucket_width: width, frequencies: freqs, mean }
}
