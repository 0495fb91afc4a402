//! Evaluation metrics: macro-F1, concordance index, Kaplan-Meier and the
//! log-rank test.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1. A class absent from both predictions and
/// labels scores zero.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::Invalid("need at least one class".into()));
    }
    if let Some(&bad) = labels.iter().chain(preds).find(|&&c| c >= n_classes) {
        return Err(Error::OutOfRange {
            index: bad,
            len: n_classes,
        });
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Harrell's C over pairs where `i` has an event and `times[i] < times[j]`.
/// Risk ties earn half credit.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_lengths("c_index", risks.len(), times.len())?;
    check_lengths("c_index", risks.len(), events.len())?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut comparable = 0u64;
    // counted in half units so the result is an exact ratio of integers
    let mut credit = 0u64;
    for (pos, &i) in order.iter().enumerate() {
        if !events[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if times[j] <= times[i] {
                continue;
            }
            comparable += 1;
            credit += match risks[i].partial_cmp(&risks[j]) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    if comparable == 0 {
        return Err(Error::Invalid("no comparable pairs for the concordance index".into()));
    }
    Ok(credit as f64 / (2 * comparable) as f64)
}

/// One step of the Kaplan-Meier estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KmPoint {
    pub t: f64,
    pub survival: f64,
    /// Subjects at risk just before `t`.
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Product-limit estimate at every distinct observed time.
///
/// Between censorings the product telescopes to `remaining / at_start`, which
/// is what gets evaluated, so with no censoring the curve is exactly the
/// empirical survival fraction.
pub fn km_curve(times: &[f64], events: &[bool]) -> Result<Vec<KmPoint>> {
    check_lengths("km_curve", times.len(), events.len())?;
    if times.is_empty() {
        return Err(Error::Invalid("km_curve needs at least one subject".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = Vec::new();
    let mut at_risk = times.len();
    let mut base = 1.0;
    let mut segment_start = at_risk;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut d = 0;
        let mut c = 0;
        while i < order.len() && times[order[i]] == t {
            if events[order[i]] {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        let after_events = at_risk - d;
        let survival = base * after_events as f64 / segment_start as f64;
        out.push(KmPoint {
            t,
            survival,
            at_risk,
            events: d,
            censored: c,
        });
        at_risk = after_events - c;
        if c > 0 {
            base = survival;
            segment_start = at_risk;
        }
        if at_risk == 0 {
            break;
        }
    }
    Ok(out)
}

pub fn km_csv(points: &[KmPoint]) -> String {
    let mut s = String::from("t,S_hat,n_at_risk\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.t, p.survival, p.at_risk);
    }
    s
}

/// Step plot of one or more labelled curves.
pub fn km_svg(curves: &[(&str, &[KmPoint])]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let t_max = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.t))
        .fold(1.0, f64::max);
    let x = |t: f64| PAD + t / t_max * (W - 2.0 * PAD);
    let y = |s: f64| H - PAD - s * (H - 2.0 * PAD);
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - PAD,
        r = W - PAD
    );
    for (ci, (label, pts)) in curves.iter().enumerate() {
        let colour = colours[ci % colours.len()];
        let mut path = format!("M{:.2},{:.2}", x(0.0), y(1.0));
        let mut s = 1.0;
        for p in pts.iter() {
            let _ = write!(path, " H{:.2} V{:.2}", x(p.t), y(p.survival));
            s = p.survival;
        }
        let _ = write!(path, " H{:.2}", x(t_max));
        let _ = writeln!(
            svg,
            "<path d=\"{path}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" fill=\"{colour}\" font-size=\"12\">{label}</text>",
            W - PAD - 60.0,
            y(s) - 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with one degree of freedom.
pub fn logrank(a_times: &[f64], a_events: &[bool], b_times: &[f64], b_events: &[bool]) -> Result<LogRank> {
    check_lengths("logrank", a_times.len(), a_events.len())?;
    check_lengths("logrank", b_times.len(), b_events.len())?;
    if a_times.is_empty() || b_times.is_empty() {
        return Err(Error::Invalid("log-rank needs two non-empty groups".into()));
    }
    let mut all: Vec<(f64, bool, bool)> = a_times
        .iter()
        .zip(a_events)
        .map(|(&t, &e)| (t, e, true))
        .chain(b_times.iter().zip(b_events).map(|(&t, &e)| (t, e, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut n_a = a_times.len() as f64;
    let mut n = all.len() as f64;
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (mut d, mut d_a, mut leave, mut leave_a) = (0.0, 0.0, 0.0, 0.0);
        while i < all.len() && all[i].0 == t {
            let (_, event, in_a) = all[i];
            leave += 1.0;
            if in_a {
                leave_a += 1.0;
            }
            if event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            i += 1;
        }
        if d > 0.0 {
            let frac = n_a / n;
            observed += d_a;
            expected += d * frac;
            if n > 1.0 {
                variance += d * frac * (1.0 - frac) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    let chi2 = if variance > 0.0 {
        (observed - expected).powi(2) / variance
    } else {
        0.0
    };
    Ok(LogRank {
        chi2,
        p: chi2_sf(chi2, 1.0),
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof / 2.0, x / 2.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let prefix = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        // series for P
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (1.0 - sum * prefix).clamp(0.0, 1.0)
    } else {
        // Lentz continued fraction for Q
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (prefix * h).clamp(0.0, 1.0)
    }
}
