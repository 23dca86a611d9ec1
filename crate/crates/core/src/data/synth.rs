use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use super::{DataError, Label, LabeledSet, Samples};
use crate::rng;

/// Two isotropic unit-variance Gaussians at `+mu` and `-mu`, with `mu` along
/// the all-ones direction and `|2 mu| = separation`. Positives come first.
pub fn synth_two_gaussians(
    n_pos: usize,
    n_neg: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledSet, DataError> {
    if n_pos == 0 || n_neg == 0 || dim == 0 {
        return Err(DataError::InvalidArgument(format!(
            "counts and dimension must be positive (n_pos={n_pos}, n_neg={n_neg}, dim={dim})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::InvalidArgument(format!(
            "separation {separation} must be finite and >= 0"
        )));
    }
    let shift = separation / 2.0 / (dim as f64).sqrt();
    let mut r = rng::stream(seed, "two-gaussians");
    let mut data = Vec::with_capacity((n_pos + n_neg) * dim);
    let mut labels = Vec::with_capacity(n_pos + n_neg);
    for (count, label) in [(n_pos, Label::Positive), (n_neg, Label::Negative)] {
        for _ in 0..count {
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(&mut r);
                data.push(z + label.sign() * shift);
            }
            labels.push(label);
        }
    }
    LabeledSet::new(Samples::new(vec![dim], data)?, labels)
}

/// Best achievable accuracy for the two-Gaussian model with positive prior
/// `prior`: threshold the projection on the mean direction at the
/// prior-weighted likelihood-ratio point.
pub fn bayes_accuracy(separation: f64, prior: f64) -> f64 {
    let half = separation / 2.0;
    if half == 0.0 {
        return prior.max(1.0 - prior);
    }
    let t = ((1.0 - prior) / prior).ln() / (2.0 * half);
    prior * normal_cdf(half - t) + (1.0 - prior) * normal_cdf(t + half)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One row per sample: features, then the label as `1` or `-1`.
pub fn write_csv(set: &LabeledSet, w: impl Write) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let d = set.samples.sample_len();
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    wr.write_record(&header)?;
    for (i, label) in set.labels.iter().enumerate() {
        let mut row: Vec<String> = set.samples.get(i).iter().map(f64::to_string).collect();
        row.push(format!("{}", label.sign() as i32));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bayes_reference_values() {
        assert!((bayes_accuracy(0.0, 0.5) - 0.5).abs() < 1e-15);
        // Phi(2)
        let b = bayes_accuracy(4.0, 0.5);
        assert!((b - 0.977_249_868_051_820_8).abs() < 1e-9, "{b:e}");
        // unequal priors never do worse than the equal-prior threshold
        assert!(bayes_accuracy(3.0, 0.4) >= bayes_accuracy(3.0, 0.5));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = synth_two_gaussians(10, 15, 3, 2.0, 5).unwrap();
        let b = synth_two_gaussians(10, 15, 3, 2.0, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count_positive(), 10);
        assert_eq!(a.samples.sample_shape(), &[3]);
    }

    #[test]
    fn class_means_are_separated() {
        let set = synth_two_gaussians(4000, 4000, 2, 4.0, 1).unwrap();
        let mut mp = [0.0; 2];
        let mut mn = [0.0; 2];
        for i in 0..set.len() {
            let s = set.samples.get(i);
            let m = if set.labels[i] == Label::Positive {
                &mut mp
            } else {
                &mut mn
            };
            m[0] += s[0] / 4000.0;
            m[1] += s[1] / 4000.0;
        }
        let dist = ((mp[0] - mn[0]).powi(2) + (mp[1] - mn[1]).powi(2)).sqrt();
        assert!((dist - 4.0).abs() < 0.1, "{dist}");
    }

    #[test]
    fn nonpositive_counts_rejected() {
        assert!(synth_two_gaussians(0, 5, 2, 1.0, 0).is_err());
        assert!(synth_two_gaussians(5, 5, 2, -1.0, 0).is_err());
    }

    #[test]
    fn csv_export() {
        let set = synth_two_gaussians(1, 1, 2, 1.0, 0).unwrap();
        let mut buf = Vec::new();
        write_csv(&set, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,label");
        assert!(lines[1].ends_with(",1") && lines[2].ends_with(",-1"));
    }
}
