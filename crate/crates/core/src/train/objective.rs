use super::{LossKind, Result, TrainError};
use crate::ingest::{TokenSequence, MASK_ID};
use protgo_tensor::{Tape, Var};
use rand::Rng;

/// A masked position and the id it held.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskTarget {
    pub position: usize,
    pub id: u32,
}

/// Selects each residue position independently with probability `p` and
/// replaces it by MASK. If nothing is selected one position is chosen
/// uniformly so every sequence contributes a target.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    p: f64,
    rng: &mut R,
) -> (TokenSequence, Vec<MaskTarget>) {
    let candidates: Vec<usize> = tokens.interior_positions().collect();
    let mut masked = tokens.clone();
    let mut targets: Vec<MaskTarget> = candidates
        .iter()
        .filter(|_| rng.random::<f64>() < p)
        .map(|&position| MaskTarget {
            position,
            id: tokens.ids[position],
        })
        .collect();
    if targets.is_empty() && !candidates.is_empty() {
        let position = candidates[rng.random_range(0..candidates.len())];
        targets.push(MaskTarget {
            position,
            id: tokens.ids[position],
        });
    }
    for t in &targets {
        masked.ids[t.position] = MASK_ID;
    }
    (masked, targets)
}

/// Mean negative log-likelihood of the original ids at the masked positions.
pub fn mlm_loss(tape: &mut Tape, logits: Var, targets: &[MaskTarget]) -> Result<Var> {
    if targets.is_empty() {
        return Err(TrainError::NoTargets);
    }
    let pairs: Vec<(usize, usize)> = targets
        .iter()
        .map(|t| (t.position, t.id as usize))
        .collect();
    Ok(tape.row_nll(logits, &pairs)?)
}

/// Binary cross-entropy averaged over labels, or the categorical form
/// against the target normalised to sum one.
pub fn finetune_loss(tape: &mut Tape, logits: Var, target: &[f64], kind: LossKind) -> Result<Var> {
    let k = tape.value(logits).len();
    if k != target.len() {
        return Err(TrainError::TargetLength {
            logits: k,
            target: target.len(),
        });
    }
    match kind {
        LossKind::Binary => Ok(tape.bce_with_logits(logits, target)?),
        LossKind::Categorical => {
            let total: f64 = target.iter().sum();
            let normalised: Vec<f64> = if total > 0.0 {
                target.iter().map(|y| y / total).collect()
            } else {
                target.to_vec()
            };
            Ok(tape.categorical_ce(logits, &normalised)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{tokenize, CLS_ID, SEP_ID};
    use crate::rng::{rng_for, Stream};
    use protgo_tensor::Tensor;

    #[test]
    fn near_certain_masking_hits_every_residue() {
        let t = tokenize("MKVLAAGW", 100).unwrap();
        let (m, targets) = mask_tokens(&t, 1.0 - 1e-12, &mut rng_for(1, Stream::Masking, 0, 0));
        assert_eq!(targets.len(), 8);
        assert_eq!(m.ids[0], CLS_ID);
        assert_eq!(*m.ids.last().unwrap(), SEP_ID);
        assert!(m.ids[1..9].iter().all(|&i| i == MASK_ID));
        for tg in &targets {
            assert_eq!(t.ids[tg.position], tg.id);
        }
    }

    #[test]
    fn masked_fraction_is_within_binomial_bounds() {
        // sd = sqrt(0.15·0.85/10000) ≈ 0.00357; ±0.01 is 2.8 sd, i.e. the
        // interval holds with probability ≈ 0.995.
        let seq: String = "ACDEFGHIKLMNPQRSTVWY".repeat(500);
        let t = tokenize(&seq, 20_000).unwrap();
        let (_, targets) = mask_tokens(&t, 0.15, &mut rng_for(3, Stream::Masking, 0, 0));
        let frac = targets.len() as f64 / 10_000.0;
        assert!((0.14..=0.16).contains(&frac), "{frac}");
    }

    #[test]
    fn empty_draw_forces_one_mask() {
        // p this small selects nothing, so the fallback must fire.
        let mut rng = rng_for(0, Stream::Masking, 0, 0);
        let t = tokenize("MKV", 10).unwrap();
        let (m, targets) = mask_tokens(&t, 1e-15, &mut rng);
        assert_eq!(targets.len(), 1);
        assert_eq!(m.ids.iter().filter(|&&i| i == MASK_ID).count(), 1);
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn mlm_loss_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 30]));
        let t = [MaskTarget { position: 1, id: 7 }];
        let l = mlm_loss(&mut tape, z, &t).unwrap();
        assert!((scalar(&tape, l) - 30f64.ln()).abs() < 1e-9);

        let mut spike = vec![0.0; 30];
        spike[7] = 1e3;
        let z = tape.constant(Tensor::new(vec![1, 30], spike).unwrap());
        let l = mlm_loss(&mut tape, z, &[MaskTarget { position: 0, id: 7 }]).unwrap();
        assert!(scalar(&tape, l) < 1e-12);

        // 30-wide rows [ln 3, 0, …] and [0, ln 2, 0, …]: NLLs ln(32/3), ln(31/2)
        let mut rows = vec![0.0; 60];
        rows[0] = 3f64.ln();
        rows[31] = 2f64.ln();
        let z = tape.constant(Tensor::new(vec![2, 30], rows).unwrap());
        let both = [
            MaskTarget { position: 0, id: 0 },
            MaskTarget { position: 1, id: 1 },
        ];
        let l = mlm_loss(&mut tape, z, &both).unwrap();
        let expect = ((32.0f64 / 3.0).ln() + (31.0f64 / 2.0).ln()) / 2.0;
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);

        assert!(matches!(
            mlm_loss(&mut tape, z, &[]),
            Err(TrainError::NoTargets)
        ));
    }

    #[test]
    fn finetune_loss_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 5]));
        let l = finetune_loss(&mut tape, z, &[1.0, 0.0, 1.0, 0.0, 0.0], LossKind::Binary).unwrap();
        assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-12);

        let logit = |p: f64| (p / (1.0 - p)).ln();
        let z = tape.constant(Tensor::vector(vec![logit(0.9), logit(0.2)]));
        let l = finetune_loss(&mut tape, z, &[1.0, 0.0], LossKind::Binary).unwrap();
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);
        assert!((expect - 0.1643).abs() < 1e-4);

        let z = tape.constant(Tensor::vector(vec![40.0, -40.0]));
        let l = finetune_loss(&mut tape, z, &[1.0, 0.0], LossKind::Binary).unwrap();
        assert!(scalar(&tape, l) < 1e-15);

        assert!(matches!(
            finetune_loss(&mut tape, z, &[1.0], LossKind::Binary),
            Err(TrainError::TargetLength {
                logits: 2,
                target: 1
            })
        ));

        let z = tape.constant(Tensor::vector(vec![0.0; 4]));
        let l = finetune_loss(&mut tape, z, &[0.0, 1.0, 0.0, 1.0], LossKind::Categorical).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-12);
    }
}
