//! Anchor noise: geometric transport of a root noise field along the view
//! chain, resampling around anchors, and the per-view retention state.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::FieldStack;
use crate::geometry::{warp_view, CameraView};
use crate::seed;
use crate::views::ViewChain;

/// Retention state of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAnchor {
    pub anchor: FieldStack,
    /// Target image retained from the last accepted resample.
    pub target_image: Option<FieldStack>,
    /// Consistency score of the currently applied gradient; `None` before
    /// the first iteration.
    pub retained_score: Option<f64>,
    pub retained_grad: Option<Vec<f64>>,
}

impl ViewAnchor {
    pub fn new(anchor: FieldStack) -> Self {
        Self {
            anchor,
            target_image: None,
            retained_score: None,
            retained_grad: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorNoiseSet {
    views: Vec<ViewAnchor>,
}

impl AnchorNoiseSet {
    pub fn new(views: Vec<ViewAnchor>) -> Result<Self> {
        if let Some(first) = views.first() {
            if views.iter().any(|v| !v.anchor.same_shape(&first.anchor)) {
                return Err(Error::ShapeMismatch("anchors differ in shape".into()));
            }
        }
        Ok(Self { views })
    }

    /// Independent standard-normal anchors, one per view.
    pub fn independent(views: usize, width: usize, height: usize, channels: usize, seed: u64) -> Self {
        let views = (0..views)
            .map(|v| {
                let s = seed::derive(seed, seed::ANCHORS, &[v as u64]);
                ViewAnchor::new(seed::gaussian_field(width, height, channels, s))
            })
            .collect();
        Self { views }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, v: usize) -> &ViewAnchor {
        &self.views[v]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut ViewAnchor {
        &mut self.views[v]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ViewAnchor> {
        self.views.iter()
    }

    /// Writes one FieldStack per anchor and per retained target image plus a
    /// `manifest.txt` with one line per view:
    /// `view <id> anchor=<file> target=<file or -> score=<value or unset>`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::from("# anchor noise manifest v1\n");
        for (v, st) in self.views.iter().enumerate() {
            let anchor = format!("anchor_{v:03}.fstk");
            st.anchor.save(dir.join(&anchor))?;
            let target = match &st.target_image {
                Some(img) => {
                    let name = format!("target_{v:03}.fstk");
                    img.save(dir.join(&name))?;
                    name
                }
                None => "-".to_string(),
            };
            let score = st
                .retained_score
                .map_or("unset".to_string(), |s| format!("{s:e}"));
            writeln!(manifest, "view {v} anchor={anchor} target={target} score={score}").unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Reads a directory written by [`AnchorNoiseSet::save_dir`]. Retained
    /// gradients are not persisted and come back unset.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut entries: Vec<(usize, ViewAnchor)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Format(format!("manifest line {}: {line:?}", lineno + 1));
            let mut parts = line.split_whitespace();
            if parts.next() != Some("view") {
                return Err(bad());
            }
            let id: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let mut anchor = None;
            let mut target = None;
            let mut score = None;
            for kv in parts {
                let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                match k {
                    "anchor" => anchor = Some(FieldStack::load(dir.join(v))?),
                    "target" if v == "-" => {}
                    "target" => target = Some(FieldStack::load(dir.join(v))?),
                    "score" if v == "unset" => {}
                    "score" => score = Some(v.parse::<f64>().map_err(|_| bad())?),
                    _ => return Err(bad()),
                }
            }
            let mut st = ViewAnchor::new(anchor.ok_or_else(bad)?);
            st.target_image = target;
            st.retained_score = score;
            entries.push((id, st));
        }
        entries.sort_by_key(|(id, _)| *id);
        if entries.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::Format("manifest view ids must be 0..n".into()));
        }
        Self::new(entries.into_iter().map(|(_, st)| st).collect())
    }
}

/// Builds anchors by transporting noise along the chain: the root gets
/// `noise(root)`; every other view gets its driver's anchor warped through
/// the driver's depth, with `noise(view)` filling the void pixels.
///
/// Cameras and depths must be at the noise (latent) resolution.
pub fn init_anchor_chain_with(
    chain: &ViewChain,
    cams: &[CameraView],
    depths: &[FieldStack],
    mut noise: impl FnMut(usize) -> FieldStack,
) -> Result<AnchorNoiseSet> {
    if cams.len() != chain.len() || depths.len() != chain.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} views in chain, {} cameras, {} depths",
            chain.len(),
            cams.len(),
            depths.len()
        )));
    }
    let mut anchors: Vec<Option<FieldStack>> = vec![None; chain.len()];
    for &v in chain.order() {
        let fresh = noise(v);
        let anchor = match chain.driver(v) {
            None => fresh,
            Some(d) => {
                let src = anchors[d].as_ref().expect("driver processed first");
                let warp = warp_view(src, &depths[d], &cams[d], &cams[v])?;
                fill_voids(&warp.warped, &warp.void_mask, &fresh)?
            }
        };
        anchors[v] = Some(anchor);
    }
    AnchorNoiseSet::new(
        anchors
            .into_iter()
            .map(|a| ViewAnchor::new(a.expect("every view visited")))
            .collect(),
    )
}

/// [`init_anchor_chain_with`] using standard-normal noise drawn from `seed`.
pub fn init_anchor_chain(
    chain: &ViewChain,
    cams: &[CameraView],
    depths: &[FieldStack],
    channels: usize,
    seed: u64,
) -> Result<AnchorNoiseSet> {
    init_anchor_chain_with(chain, cams, depths, |v| {
        let c = &cams[v];
        seed::gaussian_field(
            c.width(),
            c.height(),
            channels,
            seed::derive(seed, seed::ANCHORS, &[v as u64]),
        )
    })
}

fn fill_voids(warped: &FieldStack, void: &[bool], fresh: &FieldStack) -> Result<FieldStack> {
    warped.expect_shape(fresh, "void fill")?;
    let c = warped.channels();
    let mut out = warped.clone().without_mask();
    for (i, &is_void) in void.iter().enumerate() {
        if is_void {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&fresh.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

/// Draw from `N(sqrt(1 - sigma^2) anchor, sigma^2 I)`.
pub fn resample(anchor: &FieldStack, sigma: f64, seed: u64) -> Result<FieldStack> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Config(format!("resample sigma {sigma} outside [0, 1]")));
    }
    if sigma == 0.0 {
        return Ok(anchor.clone());
    }
    let g = seed::gaussian_field(anchor.width(), anchor.height(), anchor.channels(), seed);
    anchor.axpby((1.0 - sigma * sigma).sqrt(), &g, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_zero_is_identity_and_range_checked() {
        let a = seed::gaussian_field(8, 8, 3, 1);
        assert_eq!(resample(&a, 0.0, 5).unwrap(), a);
        assert!(matches!(resample(&a, 1.5, 5), Err(Error::Config(_))));
        assert!(resample(&a, -0.1, 5).is_err());
        assert_eq!(resample(&a, 0.3, 5).unwrap(), resample(&a, 0.3, 5).unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = AnchorNoiseSet::independent(3, 4, 4, 3, 9);
        set.view_mut(1).retained_score = Some(0.25);
        set.view_mut(1).target_image = Some(FieldStack::filled(4, 4, 3, 0.5));
        set.save_dir(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(text.contains("view 1 anchor=anchor_001.fstk target=target_001.fstk score=2.5e-1"));
        assert!(text.contains("view 0 anchor=anchor_000.fstk target=- score=unset"));
        let back = AnchorNoiseSet::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.view(1).retained_score, Some(0.25));
        assert!(back.view(0).target_image.is_none());
        for (a, b) in set.iter().zip(back.iter()) {
            for (x, y) in a.anchor.data().iter().zip(b.anchor.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
