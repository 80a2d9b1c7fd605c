use crate::error::{Error, Result};
use crate::vocab::{Lang, Vocabulary};

/// Global target plus the two language-side views of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTargets {
    pub y: Vec<usize>,
    /// Language-B tokens replaced by `mask_B`.
    pub y_a: Vec<usize>,
    /// Language-A tokens replaced by `mask_A`.
    pub y_b: Vec<usize>,
}

impl MaskedTargets {
    pub fn side(&self, lang: Lang) -> &[usize] {
        match lang {
            Lang::A => &self.y_a,
            Lang::B => &self.y_b,
        }
    }

    /// Rebuilds `y` by taking the non-mask entry at each position.
    pub fn reconstruct(&self) -> Vec<usize> {
        self.y_a
            .iter()
            .zip(&self.y_b)
            .map(|(&a, &b)| if a == Lang::B.mask() { b } else { a })
            .collect()
    }
}

/// Positional masking: every token of the other language becomes that
/// language's mask symbol, so all three sequences share one length.
pub fn mask_targets(utt_id: &str, y: &[usize], vocab: &Vocabulary) -> Result<MaskedTargets> {
    let mut y_a = Vec::with_capacity(y.len());
    let mut y_b = Vec::with_capacity(y.len());
    for (i, &id) in y.iter().enumerate() {
        match vocab.lang(id) {
            Some(Lang::A) => {
                y_a.push(id);
                y_b.push(Lang::A.mask());
            }
            Some(Lang::B) => {
                y_a.push(Lang::B.mask());
                y_b.push(id);
            }
            None => {
                return Err(Error::Data(format!(
                    "utterance {utt_id}: target position {i} holds non-language id {id}"
                )))
            }
        }
    }
    Ok(MaskedTargets {
        y: y.to_vec(),
        y_a,
        y_b,
    })
}

/// The language-aware objective `J = J_ori + (J_A + J_B) / 2`, or `J_ori`
/// alone when the auxiliary terms are off.
pub fn combine_objective(j_ori: f64, j_a: f64, j_b: f64, aux: bool) -> f64 {
    if aux {
        j_ori + (j_a + j_b) / 2.0
    } else {
        j_ori
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{MASK_A, MASK_B};

    #[test]
    fn masking_examples() {
        let v = Vocabulary::synthetic(3, 3);
        let (a1, a2, b1) = (3, 4, 6);
        let m = mask_targets("u", &[a1, b1, a2], &v).unwrap();
        assert_eq!(m.y_a, vec![a1, MASK_B, a2]);
        assert_eq!(m.y_b, vec![MASK_A, b1, MASK_A]);
        assert_eq!(m.reconstruct(), vec![a1, b1, a2]);

        let mono = mask_targets("u", &[3, 5, 4], &v).unwrap();
        assert_eq!(mono.y_a, mono.y);
        assert_eq!(mono.y_b, vec![MASK_A; 3]);

        let err = mask_targets("utt7", &[3, MASK_A], &v).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("utt7")));
    }

    #[test]
    fn objective_arithmetic() {
        assert_eq!(combine_objective(1.0, 1.0, 1.0, true), 2.0);
        assert_eq!(combine_objective(1.0, 0.4, 0.8, true), 1.6);
        assert_eq!(combine_objective(1.25, 0.4, 0.8, false), 1.25);
    }
}
