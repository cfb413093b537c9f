use rand::Rng;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// ε-greedy distribution over the actions of one q-value row.
pub fn epsilon_greedy(q_row: &[f64], epsilon: f64) -> Vec<f64> {
    let n = q_row.len() as f64;
    let mut p = vec![epsilon / n; q_row.len()];
    p[argmax(q_row)] = 1.0 - epsilon + epsilon / n;
    p
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_greedy_cases() {
        let q = [0.1, 0.5, 0.5, -2.0];
        assert_eq!(epsilon_greedy(&q, 0.0), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(epsilon_greedy(&q, 1.0), vec![0.25; 4]);
        let p = epsilon_greedy(&q, 0.2);
        assert!((p[1] - 0.85).abs() < 1e-15);
        for i in [0, 2, 3] {
            assert!((p[i] - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturates() {
        let p = softmax(&[100.0, 0.0, 0.0, 0.0]);
        assert!(p[0] > 1.0 - 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
