//! Two-level codebook quantisation.
//!
//! Level-1 codes are chosen per node from a temperature-scaled softmax over
//! cosine similarities (sampled during training, argmax otherwise). The
//! temperature decays geometrically per epoch down to a floor. Level-2 codes
//! cluster the level-1 codes: each selected level-1 code is mapped to its
//! most similar level-2 code by argmax, never annealed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Result, Tape, Var};
use crate::tensor::{cosine, Matrix};

/// Codebook rows drawn from `N(0, 1/d)`.
pub fn init_codebook<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std-dev");
    Matrix::from_fn(size, dim, |_, _| normal.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    Sample,
    Argmax,
}

/// Temperature schedule `T_k = max(γ^k · T_0, ε)`.
///
/// The state keeps the step count and evaluates the closed form, which is the
/// recurrence `T_k = max(γ · T_{k-1}, ε)` unrolled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub temperature: f64,
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
    pub step: u64,
    pub mode: SelectMode,
}

impl AnnealState {
    pub fn new(initial: f64, decay: f64, floor: f64) -> Self {
        assert!(initial > 0.0 && floor > 0.0, "temperatures must be positive");
        assert!((0.0..=1.0).contains(&decay), "decay must lie in [0, 1]");
        Self {
            temperature: initial.max(floor),
            initial,
            decay,
            floor,
            step: 0,
            mode: SelectMode::Sample,
        }
    }

    pub fn with_mode(mut self, mode: SelectMode) -> Self {
        self.mode = mode;
        self
    }

    /// Temperature after `k` decay steps.
    pub fn closed_form(initial: f64, decay: f64, floor: f64, k: u64) -> f64 {
        let k = i32::try_from(k).unwrap_or(i32::MAX);
        (decay.powi(k) * initial).max(floor)
    }
}

/// One epoch's temperature decay.
pub fn anneal_step(st: &AnnealState) -> AnnealState {
    let step = st.step + 1;
    AnnealState {
        step,
        temperature: AnnealState::closed_form(st.initial, st.decay, st.floor, step),
        ..*st
    }
}

/// Code choices for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub level1: Vec<usize>,
    pub level2: Vec<usize>,
    /// `N×M` selection probabilities when level 1 was sampled.
    pub probabilities: Option<Matrix>,
}

/// Cosine similarity of every row of `h` against every code. Zero rows score
/// 0 against everything.
pub fn similarity_scores(h: &Matrix, codebook: &Matrix) -> Matrix {
    assert_eq!(h.cols(), codebook.cols(), "embedding and code widths differ");
    let normalize = |m: &Matrix| {
        let norms = m.row_norms();
        let mut out = m.clone();
        for (r, n) in norms.into_iter().enumerate() {
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        out
    };
    normalize(h).matmul_t(&normalize(codebook))
}

/// Row-wise `softmax(scores / T)`.
pub fn selection_probabilities(scores: &Matrix, temperature: f64) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(r);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(row) {
            *d = ((s - max) / temperature).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Lowest index among maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Picks one code per row. Sampling draws from `softmax(s / T)` by inverse
/// CDF with one uniform per row; argmax ignores the temperature.
pub fn select_codes<R: Rng + ?Sized>(scores: &Matrix, st: &AnnealState, rng: &mut R) -> (Vec<usize>, Option<Matrix>) {
    match st.mode {
        SelectMode::Argmax => ((0..scores.rows()).map(|r| argmax(scores.row(r))).collect(), None),
        SelectMode::Sample => {
            let probs = selection_probabilities(scores, st.temperature);
            let picks = (0..probs.rows())
                .map(|r| {
                    let u: f64 = rng.random();
                    let row = probs.row(r);
                    let mut acc = 0.0;
                    for (i, p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return i;
                        }
                    }
                    // rounding left u above the final partial sum
                    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
                })
                .collect();
            (picks, Some(probs))
        }
    }
}

/// Level-2 code of each level-1 code (argmax cosine).
pub fn cluster_codes(cb1: &Matrix, cb2: &Matrix) -> Vec<usize> {
    let s = similarity_scores(cb1, cb2);
    (0..s.rows()).map(|r| argmax(s.row(r))).collect()
}

/// Selects codes for `h` and returns the straight-through quantised rows.
pub fn quantize<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    h: Var,
    cb1: &Matrix,
    cb2: &Matrix,
    st: &AnnealState,
    rng: &mut R,
) -> Result<(Var, Assignment)> {
    let scores = similarity_scores(tape.value(h), cb1);
    let (level1, probabilities) = select_codes(&scores, st, rng);
    let clusters = cluster_codes(cb1, cb2);
    let level2 = level1.iter().map(|&k| clusters[k]).collect();
    let e1 = cb1.gather_rows(&level1);
    let q = tape.straight_through(h, e1)?;
    Ok((
        q,
        Assignment {
            level1,
            level2,
            probabilities,
        },
    ))
}

/// Values standing in for stop-gradient targets: constants taken at a fixed
/// parameter point, so the losses become ordinary differentiable functions.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    pub h: Matrix,
    pub e1: Matrix,
    pub e2: Matrix,
}

/// Symmetric commitment/codebook loss between `a` and `b`:
/// `mean_i(‖sg[b_i] − a_i‖² + ‖sg[a_i] − b_i‖²)`.
fn paired_vq_loss<'a>(tape: &mut Tape<'a>, a: Var, b: Var, frozen: Option<(&Matrix, &Matrix)>) -> Result<Var> {
    let n = tape.value(a).rows().max(1) as f64;
    let (a_sg, b_sg) = match frozen {
        Some((fa, fb)) => (tape.constant(fa.clone())?, tape.constant(fb.clone())?),
        None => (tape.detach(a)?, tape.detach(b)?),
    };
    let d1 = tape.sub(b_sg, a)?;
    let d2 = tape.sub(a_sg, b)?;
    let sq1 = tape.mul(d1, d1)?;
    let sq2 = tape.mul(d2, d2)?;
    let t1 = tape.sum(sq1)?;
    let t2 = tape.sum(sq2)?;
    let both = tape.add(t1, t2)?;
    tape.scale(both, 1.0 / n)
}

/// `(L_vq1, L_vq2)` for an assignment. `cb1`/`cb2` are the codebook
/// parameters on the tape. H only receives gradient from the first term of
/// `L_vq1`; `L_vq2` touches the codebooks only.
pub fn vq_losses<'a>(tape: &mut Tape<'a>, h: Var, cb1: Var, cb2: Var, asn: &Assignment) -> Result<(Var, Var)> {
    vq_losses_with(tape, h, cb1, cb2, asn, None)
}

/// [`vq_losses`] with optional constants in place of the stop-gradient
/// targets.
pub fn vq_losses_with<'a>(
    tape: &mut Tape<'a>,
    h: Var,
    cb1: Var,
    cb2: Var,
    asn: &Assignment,
    frozen: Option<&FrozenTargets>,
) -> Result<(Var, Var)> {
    let e1 = tape.gather_rows(cb1, &asn.level1)?;
    let e2 = tape.gather_rows(cb2, &asn.level2)?;
    let l1 = paired_vq_loss(tape, h, e1, frozen.map(|f| (&f.h, &f.e1)))?;
    let l2 = paired_vq_loss(tape, e1, e2, frozen.map(|f| (&f.e1, &f.e2)))?;
    Ok((l1, l2))
}

/// Fraction of a codebook selected at least once.
pub fn utilization(indices: &[usize], level_size: usize) -> f64 {
    if level_size == 0 {
        return 0.0;
    }
    let mut used = vec![false; level_size];
    for &i in indices {
        used[i] = true;
    }
    used.iter().filter(|&&u| u).count() as f64 / level_size as f64
}

/// `Σ_i cos(e1[level1_i], e2[level2_i])`, i.e. each level-1 code's cosine to
/// its cluster centre weighted by how many nodes selected it.
pub fn second_layer_objective(cb1: &Matrix, cb2: &Matrix, asn: &Assignment) -> f64 {
    asn.level1
        .iter()
        .zip(&asn.level2)
        .map(|(&a, &b)| cosine(cb1.row(a), cb2.row(b)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, ParamId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn cosine_scores() {
        let s = similarity_scores(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 3.0]]));
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.70710678).abs() < 1e-8);
        assert_eq!(s[(0, 2)], 0.0);
        let z = similarity_scores(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0]]));
        assert_eq!(z[(0, 0)], 0.0);
    }

    #[test]
    fn softmax_probabilities_hand_case() {
        let p = selection_probabilities(&m(&[&[1.0, 0.5, 0.0]]), 0.5);
        // softmax(2, 1, 0)
        let z: f64 = [2f64, 1.0, 0.0].iter().map(|v| v.exp()).sum();
        let expect = [2f64.exp() / z, 1f64.exp() / z, 1.0 / z];
        for k in 0..3 {
            assert!((p[(0, k)] - expect[k]).abs() < 1e-15);
        }
        assert!((p[(0, 0)] - 0.6652).abs() < 1e-4);
        assert!((p[(0, 1)] - 0.2447).abs() < 1e-4);
        assert!((p[(0, 2)] - 0.0900).abs() < 1e-4);
    }

    #[test]
    fn argmax_mode_breaks_ties_low() {
        let st = AnnealState::new(1.0, 0.9, 1e-4).with_mode(SelectMode::Argmax);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (idx, probs) = select_codes(&m(&[&[0.2, 0.7, 0.7], &[0.0, 0.0, 0.0]]), &st, &mut rng);
        assert_eq!(idx, vec![1, 0]);
        assert!(probs.is_none());
    }

    #[test]
    fn anneal_examples() {
        let st = AnnealState::new(1.0, 0.9, 0.01);
        assert_eq!(anneal_step(&st).temperature, 0.9);
        let st = AnnealState::new(0.011, 0.5, 0.01);
        assert_eq!(anneal_step(&st).temperature, 0.01);
        let mut st = AnnealState::new(0.7, 1.0, 0.01);
        for _ in 0..1000 {
            st = anneal_step(&st);
        }
        assert_eq!(st.temperature, 0.7);
    }

    #[test]
    fn zero_decay_drops_to_floor() {
        let st = anneal_step(&AnnealState::new(1.0, 0.0, 1e-4));
        assert_eq!(st.temperature, 1e-4);
    }

    #[test]
    fn quantize_exact_codes() {
        let cb1 = m(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.5]]);
        let cb2 = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let h = m(&[&[0.0, 1.0], &[-1.0, 0.5], &[1.0, 0.0]]);
        let st = AnnealState::new(1.0, 0.9, 1e-4).with_mode(SelectMode::Argmax);
        let mut t = Tape::new(false);
        let hv = t.constant(h.clone()).unwrap();
        let (q, asn) = quantize(&mut t, hv, &cb1, &cb2, &st, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(asn.level1, vec![1, 2, 0]);
        assert_eq!(t.value(q), &h);
    }

    #[test]
    fn level_two_hand_case() {
        let s = 1.0 / (0.81f64 + 0.01).sqrt();
        let cb1 = m(&[&[1.0, 0.0], &[0.9 * s, 0.1 * s], &[0.0, 1.0]]);
        let cb2 = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        // brute force cosine comparisons
        let brute: Vec<usize> = (0..3)
            .map(|i| if cosine(cb1.row(i), cb2.row(0)) >= cosine(cb1.row(i), cb2.row(1)) { 0 } else { 1 })
            .collect();
        assert_eq!(brute, vec![0, 0, 1]);
        assert_eq!(cluster_codes(&cb1, &cb2), brute);
    }

    #[test]
    fn vq_loss_values() {
        let mut t = Tape::new(false);
        let h = t.param(ParamId(0), m(&[&[0.0, 0.0]])).unwrap();
        let cb1 = t.param(ParamId(1), m(&[&[1.0, 0.0]])).unwrap();
        let cb2 = t.param(ParamId(2), m(&[&[1.0, 0.0]])).unwrap();
        let asn = Assignment {
            level1: vec![0],
            level2: vec![0],
            probabilities: None,
        };
        let (l1, l2) = vq_losses(&mut t, h, cb1, cb2, &asn).unwrap();
        assert_eq!(t.value(l1).item(), 2.0);
        assert_eq!(t.value(l2).item(), 0.0);

        let mut t = Tape::new(false);
        let h = t.param(ParamId(0), m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let cb1 = t.param(ParamId(1), m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        let cb2 = t.param(ParamId(2), m(&[&[1.0, 0.0]])).unwrap();
        let asn = Assignment {
            level1: vec![1, 0],
            level2: vec![0, 0],
            probabilities: None,
        };
        let (l1, _) = vq_losses(&mut t, h, cb1, cb2, &asn).unwrap();
        assert_eq!(t.value(l1).item(), 0.0);
    }

    /// Each parameter group must only see gradient from its non-stopped
    /// side. The oracle rebuilds each loss with the stopped operand as a
    /// constant and differentiates numerically.
    #[test]
    fn vq_gradient_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let cb1 = init_codebook(4, 3, &mut rng);
        let cb2 = init_codebook(2, 3, &mut rng);
        let asn = Assignment {
            level1: vec![0, 3, 3, 1, 2],
            level2: vec![1, 0, 0, 1, 1],
            probabilities: None,
        };
        let grads = |which: usize| {
            let mut t = Tape::new(false);
            let hv = t.param(ParamId(0), h.clone()).unwrap();
            let c1 = t.param(ParamId(1), cb1.clone()).unwrap();
            let c2 = t.param(ParamId(2), cb2.clone()).unwrap();
            let (l1, l2) = vq_losses(&mut t, hv, c1, c2, &asn).unwrap();
            let g = t.backward(if which == 1 { l1 } else { l2 }).unwrap();
            (0..3).map(|i| g.param(ParamId(i)).cloned()).collect::<Vec<_>>()
        };
        let e1 = cb1.gather_rows(&asn.level1);
        let e2 = cb2.gather_rows(&asn.level2);
        let sq_mean = |t: &mut Tape<'_>, a: Var, b: Var| -> Result<Var> {
            let d = t.sub(a, b)?;
            let s = t.mul(d, d)?;
            let s = t.sum(s)?;
            t.scale(s, 1.0 / 5.0)
        };

        let g1 = grads(1);
        // ∂L_vq1/∂H = ∂/∂H mean‖e1 − h‖² with e1 fixed
        let e1c = e1.clone();
        let err = finite_diff_check(
            |t, p| {
                let c = t.constant(e1c.clone())?;
                sq_mean(t, c, p[0])
            },
            &[h.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
        let mut t = Tape::new(false);
        let hv = t.param(ParamId(0), h.clone()).unwrap();
        let c = t.constant(e1.clone()).unwrap();
        let l = sq_mean(&mut t, c, hv).unwrap();
        let direct = t.backward(l).unwrap().param(ParamId(0)).unwrap().clone();
        assert_eq!(g1[0].as_ref().unwrap(), &direct);
        // ∂L_vq1/∂cb1 with h fixed, numerically
        let asn1 = asn.level1.clone();
        let hc = h.clone();
        let err = finite_diff_check(
            |t, p| {
                let e = t.gather_rows(p[0], &asn1)?;
                let c = t.constant(hc.clone())?;
                sq_mean(t, c, e)
            },
            &[cb1.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
        assert!(g1[2].is_none());

        let g2 = grads(2);
        assert!(g2[0].is_none(), "H must receive no gradient from L_vq2");
        let mut t = Tape::new(false);
        let c1 = t.param(ParamId(1), cb1.clone()).unwrap();
        let e = t.gather_rows(c1, &asn.level1).unwrap();
        let c = t.constant(e2.clone()).unwrap();
        let l = sq_mean(&mut t, c, e).unwrap();
        let direct = t.backward(l).unwrap().param(ParamId(1)).unwrap().clone();
        let got = g2[1].as_ref().unwrap();
        assert!(got.as_slice().iter().zip(direct.as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&[0, 0, 1], 4), 0.5);
        assert_eq!(utilization(&[2; 10], 8), 1.0 / 8.0);
    }

    #[test]
    fn objective_examples() {
        let cb1 = m(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let cb2 = m(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let asn = Assignment {
            level1: vec![0, 1, 1],
            level2: vec![0, 1, 1],
            probabilities: None,
        };
        assert!((second_layer_objective(&cb1, &cb2, &asn) - 3.0).abs() < 1e-15);
        let scaled = cb1.map(|v| v * 7.5);
        assert!((second_layer_objective(&scaled, &cb2, &asn) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_clustering_maximises_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let cb1 = init_codebook(5, 3, &mut rng);
            let cb2 = init_codebook(3, 3, &mut rng);
            let clusters = cluster_codes(&cb1, &cb2);
            // brute force over every per-code choice: 3^5 assignments
            let mut best = f64::NEG_INFINITY;
            for code in 0..3usize.pow(5) {
                let mut c = code;
                let mut total = 0.0;
                for i in 0..5 {
                    total += cosine(cb1.row(i), cb2.row(c % 3));
                    c /= 3;
                }
                best = best.max(total);
            }
            let level1: Vec<usize> = (0..5).collect();
            let asn = Assignment {
                level2: clusters.clone(),
                level1,
                probabilities: None,
            };
            assert!((second_layer_objective(&cb1, &cb2, &asn) - best).abs() < 1e-12);
        }
    }
}
