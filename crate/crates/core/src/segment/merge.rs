//! Greedy agglomeration of over-segmented 2D regions by feature similarity.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::uv::TextureImage;

/// Per-region feature vectors for a label image.
pub trait RegionFeatures {
    /// One vector per region id `1..=regions`, in id order.
    fn features(&self, img: &TextureImage, labels: &[u32], regions: u32) -> Vec<Vec<f64>>;
}

/// Mean RGB followed by a normalized 8-bin histogram per channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ColorHistogram;

pub const HIST_BINS: usize = 8;

impl RegionFeatures for ColorHistogram {
    fn features(&self, img: &TextureImage, labels: &[u32], regions: u32) -> Vec<Vec<f64>> {
        let dim = 3 + 3 * HIST_BINS;
        let mut acc = vec![vec![0.0; dim]; regions as usize];
        let mut counts = vec![0usize; regions as usize];
        for (idx, &l) in labels.iter().enumerate() {
            if l == 0 || l > regions {
                continue;
            }
            let (f, t) = (&mut acc[l as usize - 1], img.texel(idx));
            for c in 0..3 {
                let v = t.get(c).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                f[c] += v;
                let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                f[3 + c * HIST_BINS + bin] += 1.0;
            }
            counts[l as usize - 1] += 1;
        }
        for (f, n) in acc.iter_mut().zip(counts) {
            f.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        acc
    }
}

/// One view: integer region ids (0 = background, regions `1..=n`), their
/// features and pixel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionView {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    /// `features[i]` belongs to region `i + 1`.
    pub features: Vec<Vec<f64>>,
    pub pixels: Vec<usize>,
}

impl RegionView {
    /// Validates contiguity (every id `1..=n` present) and feature alignment.
    pub fn new(width: u32, height: u32, labels: Vec<u32>, features: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != (width * height) as usize {
            return Err(Error::Shape(format!("{} labels for a {width}x{height} view", labels.len())));
        }
        let n = features.len();
        let mut pixels = vec![0usize; n];
        for &l in &labels {
            if l as usize > n {
                return Err(Error::InvalidInput(format!("region id {l} has no feature row ({n} regions)")));
            }
            if l > 0 {
                pixels[l as usize - 1] += 1;
            }
        }
        if let Some(i) = pixels.iter().position(|&p| p == 0) {
            return Err(Error::InvalidInput(format!("region ids are not contiguous: {} is unused", i + 1)));
        }
        if features.iter().any(|f| f.len() != features[0].len()) {
            return Err(Error::Shape("feature rows differ in width".into()));
        }
        Ok(Self { width, height, labels, features, pixels })
    }

    /// Features from an image with `extractor`.
    pub fn from_image(img: &TextureImage, labels: Vec<u32>, extractor: &dyn RegionFeatures) -> Result<Self> {
        let regions = labels.iter().copied().max().unwrap_or(0);
        let features = extractor.features(img, &labels, regions);
        Self::new(img.width, img.height, labels, features)
    }

    pub fn regions(&self) -> usize {
        self.features.len()
    }

    /// Unordered pairs `(a, b)`, `a < b`, of regions sharing a pixel edge.
    pub fn adjacency(&self) -> BTreeSet<(u32, u32)> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut adj = BTreeSet::new();
        let mut link = |a: u32, b: u32| {
            if a != 0 && b != 0 && a != b {
                adj.insert((a.min(b), a.max(b)));
            }
        };
        for j in 0..h {
            for i in 0..w {
                let l = self.labels[j * w + i];
                if i + 1 < w {
                    link(l, self.labels[j * w + i + 1]);
                }
                if j + 1 < h {
                    link(l, self.labels[(j + 1) * w + i]);
                }
            }
        }
        adj
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionMaskSet {
    pub views: Vec<RegionView>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Merge adjacent regions of one view while the most similar adjacent pair
/// has cosine similarity `>= tau`. The merged feature is the pixel-weighted
/// mean; ties go to the lexicographically smallest id pair. Surviving regions
/// are renumbered `1..` in order of their smallest original id.
pub fn merge_view(view: &RegionView, tau: f64) -> RegionView {
    let mut feats: BTreeMap<u32, (Vec<f64>, usize)> =
        (1..=view.regions() as u32).map(|id| (id, (view.features[id as usize - 1].clone(), view.pixels[id as usize - 1]))).collect();
    let mut adj = view.adjacency();
    // parent[id] = surviving id after merges (ids only ever map downward).
    let mut parent: Vec<u32> = (0..=view.regions() as u32).collect();
    loop {
        let mut best: Option<(f64, (u32, u32))> = None;
        for &(a, b) in &adj {
            let s = cosine(&feats[&a].0, &feats[&b].0);
            if s >= tau && best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, (a, b)));
            }
        }
        let Some((_, (a, b))) = best else { break };
        let (fb, nb) = feats.remove(&b).expect("adjacent region exists");
        let (fa, na) = feats.get_mut(&a).expect("adjacent region exists");
        let tot = (*na + nb) as f64;
        for (x, y) in fa.iter_mut().zip(&fb) {
            *x = (*x * *na as f64 + y * nb as f64) / tot;
        }
        *na += nb;
        for p in parent.iter_mut() {
            if *p == b {
                *p = a;
            }
        }
        adj = adj
            .into_iter()
            .filter_map(|(x, y)| {
                let (x, y) = (if x == b { a } else { x }, if y == b { a } else { y });
                (x != y).then_some((x.min(y), x.max(y)))
            })
            .collect();
    }
    let new_id: BTreeMap<u32, u32> = feats.keys().enumerate().map(|(i, &id)| (id, i as u32 + 1)).collect();
    let labels = view.labels.iter().map(|&l| if l == 0 { 0 } else { new_id[&parent[l as usize]] }).collect();
    let (features, pixels) = feats.into_values().unzip();
    RegionView { width: view.width, height: view.height, labels, features, pixels }
}

/// [`merge_view`] on every view.
pub fn merge_regions(masks: &RegionMaskSet, tau: f64) -> RegionMaskSet {
    RegionMaskSet { views: crate::par::map(&masks.views, |v| merge_view(v, tau)) }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A `w x 1` strip with run lengths per region.
    fn strip(runs: &[usize], features: Vec<Vec<f64>>) -> RegionView {
        let labels: Vec<u32> = runs.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat_n(i as u32 + 1, n)).collect();
        RegionView::new(labels.len() as u32, 1, labels, features).unwrap()
    }

    #[test]
    fn chain_merges_only_the_similar_pair() {
        let v = strip(&[1, 1, 1], vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = merge_view(&v, 0.9);
        assert_eq!(m.labels, vec![1, 1, 2]);
        assert_eq!(m.features, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(m.pixels, vec![2, 1]);
    }

    #[test]
    fn weighted_mean_drives_the_second_merge() {
        // 1:(1,0)x3  2:(0.6,0.8)x1  3:(0,1)x1, strip 1-2-3.
        // cos(1,2)=0.6, cos(2,3)=0.8 -> merge 2,3 into (0.3,0.9).
        // cos(1,{2,3}) = 0.3/sqrt(0.9) = 0.316 < 0.5 -> stop.
        let v = strip(&[3, 1, 1], vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]);
        let m = merge_view(&v, 0.5);
        assert_eq!(m.labels, vec![1, 1, 1, 2, 2]);
        assert_eq!(m.features[1], vec![0.3, 0.9]);
        // With tau = 0.3 the second merge also happens, weighted 3:2.
        let m = merge_view(&v, 0.3);
        assert_eq!(m.labels, vec![1; 5]);
        assert!((m.features[0][0] - 0.72).abs() < 1e-15 && (m.features[0][1] - 0.36).abs() < 1e-15);
    }

    #[test]
    fn ties_merge_the_smallest_pair_first() {
        // cos(1,2) == cos(2,3) == 1/sqrt(2); (1,2) wins, giving (1,0.5),
        // whose cosine with region 3 is 0.447 < 0.7.
        let v = strip(&[1, 1, 1], vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]);
        let m = merge_view(&v, 0.7);
        assert_eq!(m.labels, vec![1, 1, 2]);
        assert_eq!(m.features[0], vec![1.0, 0.5]);
        // Mirrored input: the smallest pair is now on the other side.
        let v = strip(&[1, 1, 1], vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(merge_view(&v, 0.7).labels, vec![1, 1, 2]);
    }

    #[test]
    fn threshold_extremes() {
        let v = strip(&[2, 1, 3], vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(merge_view(&v, 1.0 + 1e-9), v);
        assert_eq!(merge_view(&v, -1.0).regions(), 1);
        // Disconnected regions never merge.
        let labels = vec![1, 0, 2];
        let v = RegionView::new(3, 1, labels, vec![vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(merge_view(&v, -1.0).regions(), 2);
    }

    #[test]
    fn rejects_gaps_and_misaligned_features() {
        assert!(RegionView::new(3, 1, vec![1, 3, 3], vec![vec![1.0]; 3]).is_err());
        assert!(RegionView::new(2, 1, vec![1, 2], vec![vec![1.0]]).is_err());
        assert!(RegionView::new(2, 1, vec![1], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn histogram_feature_layout() {
        let mut img = TextureImage::new(2, 1, 3);
        img.texel_mut(0).copy_from_slice(&[0.0, 0.5, 1.0]);
        img.texel_mut(1).copy_from_slice(&[1.0, 0.5, 1.0]);
        let f = ColorHistogram.features(&img, &[1, 1], 1);
        assert_eq!(&f[0][..3], &[0.5, 0.5, 1.0]);
        assert_eq!(f[0][3], 0.5);
        assert_eq!(f[0][3 + 7], 0.5);
        assert_eq!(f[0][3 + 8 + 4], 1.0);
        assert_eq!(f[0][3 + 16 + 7], 1.0);
    }
}
