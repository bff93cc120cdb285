//! Adaptive rejection sampling for log-concave univariate densities.
//!
//! Tangent-based construction: an upper hull of tangent lines at a growing
//! set of abscissae bounds the log-density from above, and chords between
//! abscissae squeeze it from below. Proposals come from the normalized
//! piecewise-exponential upper hull; rejected proposals refine the hull, so
//! acceptance improves as the sampler runs. Draws are exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::ArsError;
use crate::numeric::log1mexp;

const HULL_TOL: f64 = 1e-8;
const MAX_POINTS: usize = 64;
const MAX_REJECTIONS: usize = 1000;

/// Piecewise-linear upper/lower hull state over sorted abscissae.
pub struct ArsEnvelope {
    lo: f64,
    hi: f64,
    xs: Vec<f64>,
    hs: Vec<f64>,
    dhs: Vec<f64>,
    /// Segment boundaries, length xs.len() + 1, zs[0] = lo, zs[last] = hi.
    zs: Vec<f64>,
    /// Log-mass of each tangent segment.
    seg: Vec<f64>,
}

impl ArsEnvelope {
    fn build(
        xs: Vec<f64>,
        hs: Vec<f64>,
        dhs: Vec<f64>,
        lo: f64,
        hi: f64,
    ) -> Result<Self, ArsError> {
        let mut env = ArsEnvelope {
            lo,
            hi,
            xs,
            hs,
            dhs,
            zs: Vec::new(),
            seg: Vec::new(),
        };
        env.recompute()?;
        Ok(env)
    }

    fn recompute(&mut self) -> Result<(), ArsError> {
        let m = self.xs.len();
        self.zs.clear();
        self.zs.push(self.lo);
        for i in 0..m - 1 {
            let (x0, h0, s0) = (self.xs[i], self.hs[i], self.dhs[i]);
            let (x1, h1, s1) = (self.xs[i + 1], self.hs[i + 1], self.dhs[i + 1]);
            // Concavity requires nonincreasing slopes.
            if s1 > s0 + HULL_TOL * (1.0 + s0.abs()) {
                return Err(ArsError::NonLogConcave {
                    x: x1,
                    excess: s1 - s0,
                });
            }
            let z = if (s0 - s1).abs() < 1e-12 * (1.0 + s0.abs()) {
                0.5 * (x0 + x1)
            } else {
                ((h1 - s1 * x1) - (h0 - s0 * x0)) / (s0 - s1)
            };
            // Tangent intersections must interleave the abscissae; the
            // slack only absorbs roundoff, genuine concavity violations
            // show up orders of magnitude larger.
            let slack = 1e-6 * (1.0 + x0.abs().max(x1.abs()));
            if z < x0 - slack || z > x1 + slack {
                return Err(ArsError::NonLogConcave {
                    x: z,
                    excess: (z - x1).max(x0 - z),
                });
            }
            self.zs.push(z.clamp(x0, x1));
        }
        self.zs.push(self.hi);

        self.seg.clear();
        for i in 0..m {
            self.seg.push(self.segment_log_mass(i)?);
        }
        Ok(())
    }

    /// log of the integral of exp(tangent_i) over [zs[i], zs[i+1]].
    fn segment_log_mass(&self, i: usize) -> Result<f64, ArsError> {
        let (a, b) = (self.zs[i], self.zs[i + 1]);
        let (x, h, s) = (self.xs[i], self.hs[i], self.dhs[i]);
        if a >= b {
            return Ok(f64::NEG_INFINITY);
        }
        if !a.is_finite() && s <= 0.0 || !b.is_finite() && s >= 0.0 {
            return Err(ArsError::InvalidEnvelope(format!(
                "unbounded tangent mass at segment {i} (slope {s})"
            )));
        }
        let lm = if s.abs() < 1e-12 {
            // Flat tangent over a finite segment.
            h + s * (0.5 * (a + b) - x) + (b - a).ln()
        } else if s > 0.0 {
            h + s * (b - x) + log1mexp(s * (a - b)) - s.ln()
        } else {
            h + s * (a - x) + log1mexp(s * (b - a)) - (-s).ln()
        };
        if lm.is_nan() {
            return Err(ArsError::InvalidEnvelope(format!(
                "segment {i} mass is NaN"
            )));
        }
        Ok(lm)
    }

    /// Upper-hull value at x in segment i.
    fn upper_at(&self, i: usize, x: f64) -> f64 {
        self.hs[i] + (x - self.xs[i]) * self.dhs[i]
    }

    /// Lower (chord) hull value at x; -inf outside the abscissa range.
    fn lower_at(&self, x: f64) -> f64 {
        let m = self.xs.len();
        if x < self.xs[0] || x > self.xs[m - 1] {
            return f64::NEG_INFINITY;
        }
        let j = match self.xs.partition_point(|&xi| xi <= x) {
            0 => 0,
            k => k - 1,
        };
        let j = j.min(m - 2);
        let (x0, x1) = (self.xs[j], self.xs[j + 1]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        self.hs[j] + t * (self.hs[j + 1] - self.hs[j])
    }

    /// Sample from the normalized piecewise-exponential hull.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(f64, usize), ArsError> {
        let total = crate::numeric::logsumexp(&self.seg);
        if !total.is_finite() {
            return Err(ArsError::InvalidEnvelope("hull has zero mass".into()));
        }
        let u: f64 = rng.random();
        let target = total + u.ln();
        let mut acc = f64::NEG_INFINITY;
        let mut pick = self.seg.len() - 1;
        for (i, &lm) in self.seg.iter().enumerate() {
            acc = if acc.is_finite() || lm.is_finite() {
                crate::numeric::logsumexp(&[acc, lm])
            } else {
                lm
            };
            if acc >= target {
                pick = i;
                break;
            }
        }

        let (a, b) = (self.zs[pick], self.zs[pick + 1]);
        let s = self.dhs[pick];
        let v: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let x = if s.abs() < 1e-12 {
            a + v * (b - a)
        } else if s > 0.0 {
            // Factor out the right endpoint; works for a = -inf.
            b + (v + (1.0 - v) * (s * (a - b)).exp()).ln() / s
        } else {
            // Factor out the left endpoint; works for b = +inf.
            a + ((1.0 - v) + v * (s * (b - a)).exp()).ln() / s
        };
        if !x.is_finite() {
            return Err(ArsError::InvalidEnvelope("sampled point not finite".into()));
        }
        Ok((x.clamp(self.lo, self.hi), pick))
    }

    fn insert(&mut self, x: f64, h: f64, dh: f64) -> Result<(), ArsError> {
        if self.xs.len() >= MAX_POINTS {
            return Ok(()); // envelope is already fine-grained
        }
        let pos = self.xs.partition_point(|&xi| xi < x);
        // Skip near-duplicate abscissae; they add nothing and hurt the
        // intersection arithmetic.
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        if (pos > 0 && near(self.xs[pos - 1], x))
            || (pos < self.xs.len() && near(self.xs[pos], x))
        {
            return Ok(());
        }
        self.xs.insert(pos, x);
        self.hs.insert(pos, h);
        self.dhs.insert(pos, dh);
        self.recompute()
    }
}

/// One exact draw from the normalized density `exp(log_density)` on
/// `support`, where `f` returns (log-density, derivative) up to an additive
/// constant and must be concave. `init_points` need at least two distinct
/// points inside the support; for an infinite bound the matching extreme
/// point is pushed outward by doubling until the hull mass is finite.
pub fn ars_sample<F>(
    f: F,
    support: (f64, f64),
    init_points: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64, ArsError>
where
    F: Fn(f64) -> (f64, f64),
{
    let (lo, hi) = support;
    let mut pts: Vec<f64> = init_points
        .iter()
        .copied()
        .filter(|&x| x > lo && x < hi)
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 2 {
        return Err(ArsError::InvalidEnvelope(
            "need at least two initial points inside the support".into(),
        ));
    }

    // Expand the extreme points until the envelope has finite mass:
    // positive slope at the left end when lo = -inf, negative at the right
    // end when hi = +inf.
    let mut evals: Vec<(f64, f64, f64)> = pts.iter().map(|&x| pack(&f, x)).collect();
    if lo == f64::NEG_INFINITY {
        let mut step = (evals[1].0 - evals[0].0).max(1.0);
        let mut k = 0;
        while evals[0].2 <= 0.0 {
            let x = evals[0].0 - step;
            evals.insert(0, pack(&f, x));
            step *= 2.0;
            k += 1;
            if k > 60 {
                return Err(ArsError::InvalidEnvelope(
                    "could not find a positive left slope; density may not be integrable".into(),
                ));
            }
        }
    }
    if hi == f64::INFINITY {
        let n = evals.len();
        let mut step = (evals[n - 1].0 - evals[n - 2].0).max(1.0);
        let mut k = 0;
        while evals.last().unwrap().2 >= 0.0 {
            let x = evals.last().unwrap().0 + step;
            evals.push(pack(&f, x));
            step *= 2.0;
            k += 1;
            if k > 60 {
                return Err(ArsError::InvalidEnvelope(
                    "could not find a negative right slope; density may not be integrable".into(),
                ));
            }
        }
    }

    // Shift log-densities near zero for stable exponentials.
    let hmax = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let xs: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let hs: Vec<f64> = evals.iter().map(|e| e.1 - hmax).collect();
    let dhs: Vec<f64> = evals.iter().map(|e| e.2).collect();
    let mut env = ArsEnvelope::build(xs, hs, dhs, lo, hi)?;

    for _ in 0..MAX_REJECTIONS {
        let (x, seg) = env.sample(rng)?;
        let upper = env.upper_at(seg, x);
        let lower = env.lower_at(x);
        let w: f64 = rng.random();
        let logw = w.ln();
        if logw <= lower - upper {
            return Ok(x); // squeeze acceptance, no density evaluation
        }
        let (hx, dhx) = f(x);
        let hx = hx - hmax;
        if hx > upper + HULL_TOL {
            return Err(ArsError::NonLogConcave {
                x,
                excess: hx - upper,
            });
        }
        if lower > hx + HULL_TOL {
            return Err(ArsError::NonLogConcave {
                x,
                excess: lower - hx,
            });
        }
        let accept = logw <= hx - upper;
        env.insert(x, hx, dhx)?;
        if accept {
            return Ok(x);
        }
    }
    Err(ArsError::InvalidEnvelope(format!(
        "no acceptance within {MAX_REJECTIONS} proposals"
    )))
}

fn pack<F: Fn(f64) -> (f64, f64)>(f: &F, x: f64) -> (f64, f64, f64) {
    let (h, dh) = f(x);
    (x, h, dh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::normal_cdf;
    use crate::rng::RngStream;

    fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let n = sorted.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in sorted.iter().enumerate() {
            let fx = cdf(x);
            d = d.max((fx - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - fx).abs());
        }
        d
    }

    #[test]
    fn standard_normal_moments_and_ks() {
        let mut rng = RngStream::new(2024, 0).rng();
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| {
                ars_sample(
                    |x| (-0.5 * x * x, -x),
                    (f64::NEG_INFINITY, f64::INFINITY),
                    &[-2.0, 0.0, 2.0],
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");

        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = ks_statistic(&draws, normal_cdf);
        // KS critical value at level 1e-3 for n = 1e5.
        let crit = (f64::ln(2.0 / 1e-3) / (2.0 * n as f64)).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }

    #[test]
    fn half_normal_mean_and_ks() {
        let mut rng = RngStream::new(2025, 0).rng();
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| {
                ars_sample(
                    |x| (-0.5 * x * x, -x),
                    (0.0, f64::INFINITY),
                    &[0.5, 1.0, 2.0],
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let want = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() < 0.02, "mean {mean} vs {want}");

        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = ks_statistic(&draws, |x| 2.0 * normal_cdf(x) - 1.0);
        let crit = (f64::ln(2.0 / 1e-3) / (2.0 * n as f64)).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }

    #[test]
    fn logistic_gaussian_mean_matches_quadrature() {
        // A one-item posterior slice: logistic log-likelihood plus a
        // Gaussian prior, the exact shape the Gibbs sweep samples.
        let (d, a, y) = (0.3, 1.2, 1.0);
        let logf = move |x: f64| {
            let eta = d + a * x;
            let l = y * eta - crate::numeric::softplus(eta) - 0.5 * x * x;
            let dl = a * (y - crate::numeric::sigmoid(eta)) - x;
            (l, dl)
        };

        // Adaptive Simpson for the normalizing constant and the mean.
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let x = a + i as f64 * h;
                s += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        }
        let dens = move |x: f64| logf(x).0.exp();
        let z = simpson(&|x| dens(x), -10.0, 10.0, 4000);
        let m1 = simpson(&|x| x * dens(x), -10.0, 10.0, 4000);
        let want = m1 / z;

        let mut rng = RngStream::new(77, 0).rng();
        let n = 100_000;
        let mean = (0..n)
            .map(|_| {
                ars_sample(
                    logf,
                    (f64::NEG_INFINITY, f64::INFINITY),
                    &[-2.0, 0.0, 2.0],
                    &mut rng,
                )
                .unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - want).abs() < 0.02, "mean {mean} vs {want}");
    }

    #[test]
    fn rejects_non_log_concave() {
        // Bimodal: log f = -(x^2-1)^2 is not concave.
        let mut rng = RngStream::new(5, 0).rng();
        let mut failed = false;
        for _ in 0..200 {
            let r = ars_sample(
                |x| {
                    let u = x * x - 1.0;
                    (-u * u, -4.0 * x * u)
                },
                (f64::NEG_INFINITY, f64::INFINITY),
                &[-1.5, 0.1, 1.5],
                &mut rng,
            );
            if matches!(r, Err(ArsError::NonLogConcave { .. })) {
                failed = true;
                break;
            }
        }
        assert!(failed, "concavity violation was never detected");
    }

    #[test]
    fn bad_init_points_are_expanded() {
        // Both initial points on one side of the mode; expansion must fix
        // the slope signs rather than erroring.
        let mut rng = RngStream::new(6, 0).rng();
        let x = ars_sample(
            |x| (-0.5 * (x - 5.0) * (x - 5.0), -(x - 5.0)),
            (f64::NEG_INFINITY, f64::INFINITY),
            &[-8.0, -7.0],
            &mut rng,
        )
        .unwrap();
        assert!(x.is_finite());
    }

    #[test]
    fn deterministic_given_stream() {
        let draw = |seed: u64| {
            let mut rng = RngStream::new(seed, 1).rng();
            ars_sample(
                |x| (-0.5 * x * x, -x),
                (f64::NEG_INFINITY, f64::INFINITY),
                &[-2.0, 0.0, 2.0],
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }
}
