//! Windowed tiling of long feature sequences.

use crate::corpus::SpeechFeatures;
use crate::error::{ClsrError, Result};

#[derive(Clone, Debug)]
pub struct Segment {
    pub doc_id: u64,
    pub segment_index: u32,
    /// Frame range `[start, end)` in the document.
    pub start: usize,
    pub end: usize,
    pub features: SpeechFeatures,
}

/// Number of windows: `ceil((t - window) / hop) + 1` for `t >= window`, else 1.
pub fn segment_count(t: usize, window: usize, hop: usize) -> usize {
    if t <= window {
        1
    } else {
        (t - window).div_ceil(hop) + 1
    }
}

/// Windows start at `0, hop, 2·hop, ...`; the last one may be short.
pub fn segment(doc_id: u64, doc: &SpeechFeatures, window: usize, hop: usize) -> Result<Vec<Segment>> {
    if window == 0 || hop == 0 || hop > window {
        return Err(ClsrError::Config(format!(
            "segmentation needs window >= 1 and 1 <= hop <= window, got window={window} hop={hop}"
        )));
    }
    let t = doc.num_frames();
    if t == 0 {
        return Err(ClsrError::Data(format!("document {doc_id} has no frames")));
    }
    (0..segment_count(t, window, hop))
        .map(|i| {
            let start = i * hop;
            let end = (start + window).min(t);
            Ok(Segment {
                doc_id,
                segment_index: i as u32,
                start,
                end,
                features: doc.slice(start, end)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Tensor;

    fn doc(t: usize) -> SpeechFeatures {
        SpeechFeatures::new(Tensor::zeros(t, 2)).unwrap()
    }

    #[test]
    fn worked_examples() {
        let s = segment(0, &doc(1000), 200, 200).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.iter().map(|x| (x.start, x.end)).last(), Some((800, 1000)));
        let s = segment(0, &doc(150), 200, 200).unwrap();
        assert_eq!((s.len(), s[0].start, s[0].end), (1, 0, 150));
        assert_eq!(segment(0, &doc(1000), 200, 100).unwrap().len(), 9);
        let s = segment(0, &doc(1050), 200, 200).unwrap();
        assert_eq!((s.len(), s[5].start, s[5].end), (6, 1000, 1050));
        assert_eq!(s[5].features.num_frames(), 50);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(segment(0, &doc(10), 0, 1), Err(ClsrError::Config(_))));
        assert!(matches!(segment(0, &doc(10), 5, 6), Err(ClsrError::Config(_))));
    }
}
