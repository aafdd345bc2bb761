use rand::Rng;

use super::{Columns, LmModel, Subject};

/// Draws an index from a discrete distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a latent path from an initial distribution and row-major
/// `k * k` transition matrices.
pub fn sample_latent_path<R: Rng + ?Sized>(initial: &[f64], transitions: &[Vec<f64>], rng: &mut R) -> Vec<usize> {
    let k = initial.len();
    let mut path = Vec::with_capacity(transitions.len() + 1);
    path.push(sample_categorical(initial, rng));
    for tr in transitions {
        let from = *path.last().unwrap();
        path.push(sample_categorical(&tr[from * k..(from + 1) * k], rng));
    }
    path
}

/// Samples a latent path and responses for a subject template. Channels that
/// are `None` in the template stay missing; the others are overwritten.
pub fn simulate_responses<R: Rng + ?Sized>(
    model: &LmModel,
    cols: &Columns,
    template: &Subject,
    rng: &mut R,
) -> (Vec<usize>, Subject) {
    let (initial, transitions) = model.latent_chain(cols, template);
    let path = sample_latent_path(&initial, &transitions, rng);
    let mut subject = template.clone();
    for (j, ch) in subject.responses.iter_mut().enumerate() {
        if ch.is_some() {
            let phi = &model.params.phi[j];
            let ys = path
                .iter()
                .map(|&u| {
                    let probs: Vec<f64> = phi.iter().map(|row| row[u]).collect();
                    sample_categorical(&probs, rng) as u8
                })
                .collect();
            *ch = Some(ys);
        }
    }
    (path, subject)
}
