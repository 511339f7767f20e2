use crate::dilated::config::{DilatedConfig, Pattern};
use crate::error::{Error, Result};

/// Original sequence positions kept by one (pattern, segment, head).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseIndexMap {
    pub pattern_index: usize,
    pub segment_index: usize,
    pub head_offset: usize,
    /// Ascending: `segment·w + offset + m·r` for every `m` that stays inside
    /// the segment.
    pub positions: Vec<usize>,
}

/// Rows selected from the segment starting at `segment_start`.
pub fn segment_positions(segment_start: usize, pattern: Pattern, offset: usize) -> Vec<usize> {
    (segment_start + offset..segment_start + pattern.segment_len)
        .step_by(pattern.dilation)
        .collect()
}

/// One map per segment of length `w` for the given pattern and head.
pub fn build_index_maps(
    config: &DilatedConfig,
    n: usize,
    pattern: usize,
    head: usize,
) -> Result<Vec<SparseIndexMap>> {
    let p = *config
        .patterns()
        .get(pattern)
        .ok_or_else(|| Error::config(format!("pattern index {pattern} out of range")))?;
    if head >= config.heads() {
        return Err(Error::config(format!(
            "head {head} out of range for {} heads",
            config.heads()
        )));
    }
    if n == 0 || !n.is_multiple_of(p.segment_len) {
        return Err(Error::config(format!(
            "pattern {pattern} {p}: segment length does not divide sequence length {n}"
        )));
    }
    let offset = p.head_offset(head);
    Ok((0..n / p.segment_len)
        .map(|segment| SparseIndexMap {
            pattern_index: pattern,
            segment_index: segment,
            head_offset: offset,
            positions: segment_positions(segment * p.segment_len, p, offset),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: usize, r: usize, heads: usize) -> DilatedConfig {
        DilatedConfig::new(&[(w, r)], heads).unwrap()
    }

    #[test]
    fn enumerated_examples() {
        let maps = build_index_maps(&single(4, 2, 2), 4, 0, 0).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].positions, vec![0, 2]);
        let maps = build_index_maps(&single(4, 2, 2), 4, 0, 1).unwrap();
        assert_eq!(maps[0].positions, vec![1, 3]);
        assert_eq!(maps[0].head_offset, 1);
        let maps = build_index_maps(&single(4, 1, 1), 8, 0, 0).unwrap();
        let got: Vec<_> = maps.iter().map(|m| m.positions.clone()).collect();
        assert_eq!(got, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    }

    #[test]
    fn offsets_repeat_cyclically() {
        let cfg = single(6, 3, 5);
        let offsets: Vec<_> = (0..5)
            .map(|h| build_index_maps(&cfg, 6, 0, h).unwrap()[0].head_offset)
            .collect();
        assert_eq!(offsets, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn ragged_dilation_count() {
        // w=5, r=2: offsets 0 and 1 keep 3 and 2 rows
        let cfg = single(5, 2, 2);
        assert_eq!(
            build_index_maps(&cfg, 10, 0, 0).unwrap()[1].positions,
            vec![5, 7, 9]
        );
        assert_eq!(
            build_index_maps(&cfg, 10, 0, 1).unwrap()[1].positions,
            vec![6, 8]
        );
        assert_eq!(cfg.patterns()[0].rows_per_segment(1), 2);
    }

    #[test]
    fn errors() {
        let cfg = DilatedConfig::new(&[(4, 1), (8, 2)], 2).unwrap();
        let err = build_index_maps(&cfg, 12, 1, 0).unwrap_err();
        assert!(err.to_string().contains("pattern 1"), "{err}");
        assert!(build_index_maps(&cfg, 8, 2, 0).is_err());
        assert!(build_index_maps(&cfg, 8, 0, 2).is_err());
    }
}
