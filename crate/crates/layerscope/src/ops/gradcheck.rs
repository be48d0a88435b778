//! Central-difference gradient checking.
//!
//! The harness perturbs one coordinate at a time, so it stays independent
//! of whatever analytic path produced the gradients under test.

/// Max over coordinates of `|analytic - central_diff| / max(1, |analytic|)`.
///
/// `buffer` is perturbed in place and restored after each probe. `loss`
/// must be a pure function of the buffer contents.
pub fn max_rel_error<F>(buffer: &mut [f64], analytic: &[f64], epsilon: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    max_rel_error_sampled(buffer, analytic, epsilon, buffer.len(), &mut loss)
}

/// Same check over at most `max_coords` evenly spaced coordinates.
pub fn max_rel_error_sampled<F>(
    buffer: &mut [f64],
    analytic: &[f64],
    epsilon: f64,
    max_coords: usize,
    loss: &mut F,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(buffer.len(), analytic.len());
    assert!(epsilon > 0.0);
    let n = buffer.len();
    let step = if max_coords == 0 || max_coords >= n {
        1
    } else {
        n.div_ceil(max_coords)
    };

    let mut worst = 0.0f64;
    let mut i = 0;
    while i < n {
        let saved = buffer[i];
        buffer[i] = saved + epsilon;
        let up = loss(buffer);
        buffer[i] = saved - epsilon;
        let down = loss(buffer);
        buffer[i] = saved;

        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / f64::max(1.0, analytic[i].abs());
        if err > worst {
            worst = err;
        }
        i += step;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_functions() {
        // f(x) = 3x0 - 2x1 + 0.5x2
        let coeffs = [3.0, -2.0, 0.5];
        let mut x = [1.0, 2.0, -0.5];
        let analytic = coeffs;
        let err = max_rel_error(&mut x, &analytic, 1e-4, |b| {
            b.iter().zip(&coeffs).map(|(v, c)| v * c).sum()
        });
        assert!(err <= 1e-9, "linear map should check exactly, got {err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let mut x = [1.0, 2.0];
        let analytic = [2.0, 100.0]; // second entry is wrong for f = x0^2 + x1^2
        let err = max_rel_error(&mut x, &analytic, 1e-4, |b| b.iter().map(|v| v * v).sum());
        assert!(err > 0.5);
    }

    #[test]
    fn quadratic_within_central_difference_accuracy() {
        let mut x = [0.3, -1.2, 2.0, 0.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = max_rel_error(&mut x, &analytic, 1e-4, |b| b.iter().map(|v| v * v).sum());
        assert!(err <= 1e-8, "quadratic rel err {err}");
    }

    #[test]
    fn sampling_probes_a_subset() {
        let mut calls = 0usize;
        let mut x = vec![1.0; 100];
        let analytic = vec![1.0; 100];
        let mut f = |b: &[f64]| {
            calls += 1;
            b.iter().sum()
        };
        let err = max_rel_error_sampled(&mut x, &analytic, 1e-4, 10, &mut f);
        assert!(err <= 1e-9);
        assert!(calls <= 2 * 10);
    }
}
