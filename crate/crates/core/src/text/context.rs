use super::PAD;
use crate::error::{Error, Result};

/// Per-token context windows of `2l+1` token indices with their relative
/// positions `−l..=l`. Slots outside the story hold `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSequence {
    pub half_width: usize,
    pub windows: Vec<Vec<usize>>,
    pub positions: Vec<Vec<i64>>,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_size(&self) -> usize {
        2 * self.half_width + 1
    }
}

pub fn build_context_sequences(token_ids: &[usize], half_width: usize) -> Result<ContextSequence> {
    if half_width < 1 {
        return Err(Error::config("window", "context half-width must be at least 1"));
    }
    let l = half_width as i64;
    let n = token_ids.len() as i64;
    let positions: Vec<i64> = (-l..=l).collect();
    let mut windows = Vec::with_capacity(token_ids.len());
    for i in 0..n {
        let window = (i - l..=i + l)
            .map(|j| {
                if (0..n).contains(&j) {
                    token_ids[j as usize]
                } else {
                    PAD
                }
            })
            .collect();
        windows.push(window);
    }
    Ok(ContextSequence {
        half_width,
        positions: vec![positions; token_ids.len()],
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn middle_token_window() {
        // a=2, b=3, c=4
        let ctx = build_context_sequences(&[2, 3, 4], 1).unwrap();
        assert_eq!(ctx.windows[1], vec![2, 3, 4]);
        assert_eq!(ctx.positions[1], vec![-1, 0, 1]);
    }

    #[test]
    fn single_token_is_padded() {
        let ctx = build_context_sequences(&[7], 1).unwrap();
        assert_eq!(ctx.windows, vec![vec![PAD, 7, PAD]]);
    }

    #[test]
    fn empty_story_gives_empty_sequence() {
        assert!(build_context_sequences(&[], 2).unwrap().is_empty());
        assert!(build_context_sequences(&[1], 0).is_err());
    }

    proptest! {
        #[test]
        fn one_window_per_token(ids in proptest::collection::vec(2usize..50, 0..40), l in 1usize..7) {
            let ctx = build_context_sequences(&ids, l).unwrap();
            prop_assert_eq!(ctx.len(), ids.len());
            for (i, w) in ctx.windows.iter().enumerate() {
                prop_assert_eq!(w.len(), 2 * l + 1);
                prop_assert_eq!(w[l], ids[i]);
            }
        }
    }
}
