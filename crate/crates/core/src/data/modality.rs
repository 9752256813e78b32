//! Unified token representation of the condition modalities.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{SceneKnobs, SceneObject, SceneSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Text,
    Segmentation,
    Sketch,
    #[serde(rename = "bbox")]
    BBox,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] =
        [ModalityKind::Text, ModalityKind::Segmentation, ModalityKind::Sketch, ModalityKind::BBox];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Text => "text",
            ModalityKind::Segmentation => "segmentation",
            ModalityKind::Sketch => "sketch",
            ModalityKind::BBox => "bbox",
        }
    }

    /// Short tag used in parameter names and CSV headers.
    pub fn tag(self) -> &'static str {
        match self {
            ModalityKind::Text => "text",
            ModalityKind::Segmentation => "seg",
            ModalityKind::Sketch => "sketch",
            ModalityKind::BBox => "bbox",
        }
    }

    pub fn is_grid(self) -> bool {
        matches!(self, ModalityKind::Segmentation | ModalityKind::Sketch)
    }

    pub fn vocab_size(self, knobs: &SceneKnobs) -> usize {
        match self {
            ModalityKind::Text => knobs.palette,
            ModalityKind::Segmentation => knobs.palette + 1,
            ModalityKind::Sketch => 3,
            ModalityKind::BBox => knobs.palette + knobs.cells(),
        }
    }

    /// Reserved id for out-of-coverage cells of grid modalities.
    pub fn unknown_token(self, knobs: &SceneKnobs) -> Option<usize> {
        match self {
            ModalityKind::Segmentation => Some(knobs.palette),
            ModalityKind::Sketch => Some(2),
            _ => None,
        }
    }

    /// Longest token sequence this modality can produce.
    pub fn max_len(self, knobs: &SceneKnobs) -> usize {
        match self {
            ModalityKind::Text => 1,
            ModalityKind::Segmentation | ModalityKind::Sketch => knobs.cells(),
            ModalityKind::BBox => 3 * knobs.max_objects,
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ModalityKind::Text),
            "segmentation" | "seg" => Ok(ModalityKind::Segmentation),
            "sketch" => Ok(ModalityKind::Sketch),
            "bbox" => Ok(ModalityKind::BBox),
            other => Err(Error::contract(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Grid { height: usize, width: usize },
    Objects { count: usize },
    Single,
}

/// Token ids of one condition modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub modality: ModalityKind,
    pub tokens: Vec<usize>,
    pub layout: Layout,
}

impl TokenSequence {
    pub fn validate(&self, knobs: &SceneKnobs) -> Result<()> {
        let vocab = self.modality.vocab_size(knobs);
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index { what: format!("{} vocabulary", self.modality), index: bad, size: vocab });
        }
        let expected = match (self.modality, self.layout) {
            (ModalityKind::Text, Layout::Single) => 1,
            (ModalityKind::Segmentation | ModalityKind::Sketch, Layout::Grid { height, width }) => {
                if height != knobs.height || width != knobs.width {
                    return Err(Error::contract(format!("{} layout {height}x{width} does not match grid", self.modality)));
                }
                height * width
            }
            (ModalityKind::BBox, Layout::Objects { count }) => 3 * count,
            (m, l) => return Err(Error::contract(format!("layout {l:?} invalid for {m}"))),
        };
        if self.tokens.len() != expected {
            return Err(Error::contract(format!(
                "{} has {} tokens, layout requires {expected}",
                self.modality,
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// Which scene cells a condition describes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl CoverageMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![true; height * width] }
    }

    /// Inclusive rectangle `[r0, r1] x [c0, c1]`.
    pub fn rect(height: usize, width: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        let mut cells = vec![false; height * width];
        for r in r0..=r1.min(height - 1) {
            for c in c0..=c1.min(width - 1) {
                cells[r * width + c] = true;
            }
        }
        Self { height, width, cells }
    }

    pub fn covers(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn intersects(&self, o: &SceneObject) -> bool {
        (o.top_left.0..=o.bottom_right.0).any(|r| (o.top_left.1..=o.bottom_right.1).any(|c| self.covers(r, c)))
    }
}

/// 1 where a 4-neighbour has a different palette id.
pub fn edge_map(grid: &[usize], height: usize, width: usize) -> Vec<usize> {
    let mut out = vec![0; grid.len()];
    for r in 0..height {
        for c in 0..width {
            let v = grid[r * width + c];
            let differs = (r > 0 && grid[(r - 1) * width + c] != v)
                || (r + 1 < height && grid[(r + 1) * width + c] != v)
                || (c > 0 && grid[r * width + c - 1] != v)
                || (c + 1 < width && grid[r * width + c + 1] != v);
            out[r * width + c] = usize::from(differs);
        }
    }
    out
}

/// Tokenises one modality of `scene`, restricted to `coverage` (ignored for text).
pub fn derive_modality(scene: &SceneSpec, kind: ModalityKind, coverage: Option<&CoverageMask>) -> Result<TokenSequence> {
    let (h, w) = (scene.height, scene.width);
    if let Some(cov) = coverage {
        if (cov.height, cov.width) != (h, w) {
            return Err(Error::Dimension {
                op: "derive_modality",
                lhs: vec![cov.height, cov.width],
                rhs: vec![h, w],
            });
        }
    }
    let covered = |i: usize| coverage.is_none_or(|c| c.cells[i]);
    let seq = match kind {
        ModalityKind::Text => {
            TokenSequence { modality: kind, tokens: vec![scene.global_attribute], layout: Layout::Single }
        }
        ModalityKind::Segmentation => {
            let unknown = scene.palette;
            let tokens = (0..h * w).map(|i| if covered(i) { scene.grid[i] } else { unknown }).collect();
            TokenSequence { modality: kind, tokens, layout: Layout::Grid { height: h, width: w } }
        }
        ModalityKind::Sketch => {
            let edges = edge_map(&scene.grid, h, w);
            let tokens = (0..h * w).map(|i| if covered(i) { edges[i] } else { 2 }).collect();
            TokenSequence { modality: kind, tokens, layout: Layout::Grid { height: h, width: w } }
        }
        ModalityKind::BBox => {
            let mut tokens = Vec::new();
            let mut count = 0;
            for o in &scene.objects {
                if coverage.is_none_or(|c| c.intersects(o)) {
                    tokens.push(o.category);
                    tokens.push(scene.palette + o.top_left.0 * w + o.top_left.1);
                    tokens.push(scene.palette + o.bottom_right.0 * w + o.bottom_right.1);
                    count += 1;
                }
            }
            TokenSequence { modality: kind, tokens, layout: Layout::Objects { count } }
        }
    };
    Ok(seq)
}

/// Inverse of the bbox tokenisation.
pub fn decode_bbox(seq: &TokenSequence, knobs: &SceneKnobs) -> Result<Vec<SceneObject>> {
    if seq.modality != ModalityKind::BBox || seq.tokens.len() % 3 != 0 {
        return Err(Error::contract("not a bbox token sequence"));
    }
    let p = knobs.palette;
    let pos = |t: usize| -> Result<(usize, usize)> {
        if t < p || t >= p + knobs.cells() {
            return Err(Error::Index { what: "bbox position".into(), index: t, size: p + knobs.cells() });
        }
        let cell = t - p;
        Ok((cell / knobs.width, cell % knobs.width))
    };
    seq.tokens
        .chunks_exact(3)
        .map(|tri| {
            if tri[0] >= p {
                return Err(Error::Index { what: "bbox category".into(), index: tri[0], size: p });
            }
            Ok(SceneObject { category: tri[0], top_left: pos(tri[1])?, bottom_right: pos(tri[2])? })
        })
        .collect()
}

/// Any subset of the condition modalities, with optional coverage records.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSet {
    #[serde(default)]
    pub present: BTreeMap<ModalityKind, TokenSequence>,
    #[serde(default)]
    pub coverage: BTreeMap<ModalityKind, CoverageMask>,
}

impl ConditionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn get(&self, kind: ModalityKind) -> Option<&TokenSequence> {
        self.present.get(&kind)
    }

    pub fn kinds(&self) -> Vec<ModalityKind> {
        self.present.keys().copied().collect()
    }

    pub fn insert(&mut self, seq: TokenSequence, coverage: Option<CoverageMask>) {
        if let Some(c) = coverage {
            self.coverage.insert(seq.modality, c);
        }
        self.present.insert(seq.modality, seq);
    }

    /// Keeps only the listed modalities.
    pub fn restrict(&self, keep: &[ModalityKind]) -> ConditionSet {
        ConditionSet {
            present: self.present.iter().filter(|(k, _)| keep.contains(k)).map(|(k, v)| (*k, v.clone())).collect(),
            coverage: self.coverage.iter().filter(|(k, _)| keep.contains(k)).map(|(k, v)| (*k, v.clone())).collect(),
        }
    }

    pub fn only(&self, kind: ModalityKind) -> ConditionSet {
        self.restrict(&[kind])
    }

    pub fn validate(&self, knobs: &SceneKnobs) -> Result<()> {
        for (k, seq) in &self.present {
            if seq.modality != *k {
                return Err(Error::contract(format!("entry keyed {k} holds {}", seq.modality)));
            }
            seq.validate(knobs)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::generate_scene;
    use crate::numerics::RngState;

    fn knobs() -> SceneKnobs {
        SceneKnobs::default()
    }

    #[test]
    fn uniform_scene_has_no_edges() {
        let s = SceneSpec::from_objects(8, 8, 6, vec![]).unwrap();
        let seq = derive_modality(&s, ModalityKind::Sketch, None).unwrap();
        assert!(seq.tokens.iter().all(|&t| t == 0));
    }

    #[test]
    fn full_object_segmentation() {
        let o = SceneObject { category: 4, top_left: (0, 0), bottom_right: (7, 7) };
        let s = SceneSpec::from_objects(8, 8, 6, vec![o]).unwrap();
        let cov = CoverageMask::full(8, 8);
        let seq = derive_modality(&s, ModalityKind::Segmentation, Some(&cov)).unwrap();
        assert!(seq.tokens.iter().all(|&t| t == 4));
        seq.validate(&knobs()).unwrap();
    }

    #[test]
    fn uncovered_cells_are_unknown() {
        let s = generate_scene(&mut RngState::new(3), &knobs()).unwrap();
        let cov = CoverageMask::rect(8, 8, 0, 0, 7, 3);
        let seg = derive_modality(&s, ModalityKind::Segmentation, Some(&cov)).unwrap();
        let sk = derive_modality(&s, ModalityKind::Sketch, Some(&cov)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let i = r * 8 + c;
                if c > 3 {
                    assert_eq!(seg.tokens[i], 6);
                    assert_eq!(sk.tokens[i], 2);
                } else {
                    assert_eq!(seg.tokens[i], s.grid[i]);
                }
            }
        }
    }

    #[test]
    fn bbox_round_trip() {
        let mut rng = RngState::new(11);
        for _ in 0..100 {
            let s = generate_scene(&mut rng, &knobs()).unwrap();
            let seq = derive_modality(&s, ModalityKind::BBox, None).unwrap();
            seq.validate(&knobs()).unwrap();
            assert_eq!(decode_bbox(&seq, &knobs()).unwrap(), s.objects);
        }
    }

    #[test]
    fn text_is_one_token() {
        let s = generate_scene(&mut RngState::new(4), &knobs()).unwrap();
        let seq = derive_modality(&s, ModalityKind::Text, None).unwrap();
        assert_eq!(seq.tokens, vec![s.global_attribute]);
        assert_eq!(seq.layout, Layout::Single);
    }

    #[test]
    fn derivation_is_pure() {
        let s = generate_scene(&mut RngState::new(8), &knobs()).unwrap();
        let cov = CoverageMask::rect(8, 8, 2, 1, 6, 5);
        for k in ModalityKind::ALL {
            assert_eq!(derive_modality(&s, k, Some(&cov)).unwrap(), derive_modality(&s, k, Some(&cov)).unwrap());
        }
    }

    #[test]
    fn validate_catches_bad_tokens() {
        let seq = TokenSequence { modality: ModalityKind::Sketch, tokens: vec![3; 64], layout: Layout::Grid { height: 8, width: 8 } };
        assert!(seq.validate(&knobs()).is_err());
        let seq = TokenSequence { modality: ModalityKind::Text, tokens: vec![1, 2], layout: Layout::Single };
        assert!(seq.validate(&knobs()).is_err());
    }

    #[test]
    fn modality_names_parse() {
        for k in ModalityKind::ALL {
            assert_eq!(k.name().parse::<ModalityKind>().unwrap(), k);
        }
        assert!("depth".parse::<ModalityKind>().is_err());
    }
}
