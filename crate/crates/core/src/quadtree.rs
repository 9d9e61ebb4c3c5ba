//! Mask grids on the fixed level ladder, ground-truth incoherence, quadtree
//! growth from incoherence scores, node-sequence serialization and
//! propagation of refined node labels back into a 56×56 mask.
//!
//! Level `l` has side `7·2^l`: 7 (context), 14 (coarse), 28, 56 (fine).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::{Error, Result};

/// Grid sides of levels 0..=3.
pub const LEVEL_SIDES: [usize; 4] = [7, 14, 28, 56];
/// The finest level, where the refined mask lives.
pub const FINE_LEVEL: u8 = 3;
/// The level of the coarse mask head.
pub const COARSE_LEVEL: u8 = 1;
/// Number of 7×7 context points leading every node sequence.
pub const CONTEXT_LEN: usize = 49;
/// Default bound on tree size per instance.
pub const DEFAULT_NODE_CAP: usize = 2000;
/// Default incoherence threshold.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

pub fn side(level: u8) -> usize {
    LEVEL_SIDES[level as usize]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Probability,
    Binary,
}

/// A square mask at one level of the ladder, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    level: u8,
    kind: MaskKind,
    values: Vec<f32>,
}

impl MaskGrid {
    pub fn new(level: u8, kind: MaskKind, values: Vec<f32>) -> Result<Self> {
        if level > FINE_LEVEL {
            return Err(Error::Contract(format!("mask level {level} outside 0..=3")));
        }
        let s = side(level);
        if values.len() != s * s {
            return Err(Error::Dimension(format!(
                "level {level} mask needs {} values, got {}",
                s * s,
                values.len()
            )));
        }
        let ok = match kind {
            MaskKind::Binary => values.iter().all(|&v| v == 0.0 || v == 1.0),
            MaskKind::Probability => values.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if !ok {
            return Err(Error::Contract(format!("values out of range for a {kind:?} mask")));
        }
        Ok(Self { level, kind, values })
    }

    pub fn filled(level: u8, kind: MaskKind, value: f32) -> Result<Self> {
        let s = side(level);
        Self::new(level, kind, vec![value; s * s])
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn side(&self) -> usize {
        side(self.level)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.side() + j]
    }

    /// Thresholds at `>= 0.5`.
    pub fn binarize(&self) -> MaskGrid {
        let values = self.values.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        MaskGrid { level: self.level, kind: MaskKind::Binary, values }
    }

    /// Nearest-neighbour upsampling: every cell fills its `2^(to−level)` square footprint.
    pub fn upsample_nearest(&self, to_level: u8) -> Result<MaskGrid> {
        if to_level < self.level || to_level > FINE_LEVEL {
            return Err(Error::Contract(format!(
                "cannot upsample level {} to level {to_level}",
                self.level
            )));
        }
        let f = 1usize << (to_level - self.level);
        let (s, out_side) = (self.side(), side(to_level));
        let mut values = vec![0.0; out_side * out_side];
        for y in 0..out_side {
            for x in 0..out_side {
                values[y * out_side + x] = self.values[(y / f) * s + x / f];
            }
        }
        Ok(MaskGrid { level: to_level, kind: self.kind, values })
    }

    /// Mirrors columns.
    pub fn flip_horizontal(&self) -> MaskGrid {
        let s = self.side();
        let mut values = self.values.clone();
        for row in values.chunks_mut(s) {
            row.reverse();
        }
        MaskGrid { level: self.level, kind: self.kind, values }
    }

    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

/// Majority pooling of a binary mask to a coarser level. A block that is
/// exactly half foreground pools to foreground.
pub fn downsample_mask(fine: &MaskGrid, to_level: u8) -> Result<MaskGrid> {
    if fine.kind != MaskKind::Binary {
        return Err(Error::Contract("downsample_mask needs a binary mask".into()));
    }
    if to_level >= fine.level {
        return Err(Error::Contract(format!(
            "downsample target level {to_level} must be below the source level {}",
            fine.level
        )));
    }
    let f = 1usize << (fine.level - to_level);
    let (s, out_side) = (fine.side(), side(to_level));
    let mut values = vec![0.0; out_side * out_side];
    for i in 0..out_side {
        for j in 0..out_side {
            let mut ones = 0usize;
            for y in i * f..(i + 1) * f {
                ones += fine.values[y * s + j * f..y * s + (j + 1) * f].iter().filter(|&&v| v == 1.0).count();
            }
            values[i * out_side + j] = if 2 * ones >= f * f { 1.0 } else { 0.0 };
        }
    }
    Ok(MaskGrid { level: to_level, kind: MaskKind::Binary, values })
}

/// Binary incoherence target at `level` (1 or 2): a cell is incoherent when
/// any of its four children at `level + 1` disagrees with the cell's own
/// pooled value.
pub fn gt_incoherence(gt_fine: &MaskGrid, level: u8) -> Result<MaskGrid> {
    if gt_fine.level != FINE_LEVEL || gt_fine.kind != MaskKind::Binary {
        return Err(Error::Contract("gt_incoherence needs a binary level-3 mask".into()));
    }
    if !(1..FINE_LEVEL).contains(&level) {
        return Err(Error::Contract(format!("incoherence is defined for levels 1 and 2, got {level}")));
    }
    let parent = downsample_mask(gt_fine, level)?;
    let child = if level + 1 == FINE_LEVEL { gt_fine.clone() } else { downsample_mask(gt_fine, level + 1)? };
    let (s, cs) = (side(level), side(level + 1));
    let mut values = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let p = parent.values[i * s + j];
            let differs = (0..4).any(|c| child.values[(2 * i + c / 2) * cs + 2 * j + c % 2] != p);
            values[i * s + j] = if differs { 1.0 } else { 0.0 };
        }
    }
    Ok(MaskGrid { level, kind: MaskKind::Binary, values })
}

/// One refinement cell.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadtreeNode {
    /// 1, 2 or 3.
    pub level: u8,
    /// `(row, col)` on the level's grid.
    pub cell: (usize, usize),
    /// Index of the parent in the owning tree; `None` exactly for level-1 roots.
    pub parent: Option<usize>,
    pub incoherence_score: f32,
    pub refined_label: Option<f32>,
}

/// Nodes ordered by `(level, row, col)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Quadtree {
    nodes: Vec<QuadtreeNode>,
}

impl Quadtree {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a tree from `(level, cell, score)` triples, sorting them and
    /// linking parents. Every node above level 1 needs its parent present.
    pub fn from_cells(mut cells: Vec<(u8, (usize, usize), f32)>) -> Result<Self> {
        cells.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut nodes: Vec<QuadtreeNode> = Vec::with_capacity(cells.len());
        for (level, cell, score) in cells {
            if !(1..=FINE_LEVEL).contains(&level) || cell.0 >= side(level) || cell.1 >= side(level) {
                return Err(Error::Contract(format!("node at level {level} cell {cell:?} is off the grid")));
            }
            let parent = if level == 1 {
                None
            } else {
                let key = (level - 1, (cell.0 / 2, cell.1 / 2));
                let idx = nodes
                    .binary_search_by(|n| (n.level, n.cell).cmp(&key))
                    .map_err(|_| Error::Contract(format!("node at level {level} cell {cell:?} has no parent")))?;
                Some(idx)
            };
            nodes.push(QuadtreeNode { level, cell, parent, incoherence_score: score, refined_label: None });
        }
        Ok(Self { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[QuadtreeNode] {
        &self.nodes
    }

    pub fn count_at(&self, level: u8) -> usize {
        self.nodes.iter().filter(|n| n.level == level).count()
    }

    /// Writes refined labels in node order.
    pub fn set_labels(&mut self, labels: &[f32]) -> Result<()> {
        if labels.len() != self.nodes.len() {
            return Err(Error::Dimension(format!(
                "{} labels for a tree of {} nodes",
                labels.len(),
                self.nodes.len()
            )));
        }
        for (n, &l) in self.nodes.iter_mut().zip(labels) {
            n.refined_label = Some(l);
        }
        Ok(())
    }

    fn label_of(&self, idx: usize) -> Result<f32> {
        let n = &self.nodes[idx];
        n.refined_label.ok_or_else(|| {
            Error::Contract(format!("node {idx} (level {}, cell {:?}) has no refined label", n.level, n.cell))
        })
    }

    /// Pushes a raw node without ordering or parent checks, for exercising
    /// the validation in [`serialize_sequence`].
    #[doc(hidden)]
    pub fn push_unchecked(&mut self, node: QuadtreeNode) {
        self.nodes.push(node);
    }
}

fn by_score_then_cell(a: &(f32, (usize, usize)), b: &(f32, (usize, usize))) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Grows the quadtree from level-1 and level-2 incoherence scores.
///
/// Level-1 cells scoring `>= threshold` become roots and spawn their four
/// level-2 children; a child scoring `>= threshold` spawns four level-3
/// children. When the tree would exceed `cap`, roots are admitted first, then
/// level-2 children, then level-3 children, each tier in score-descending
/// order with ties broken by `(row, col)`. Level-3 nodes carry their parent's
/// score.
pub fn build_quadtree(inc_l1: &MaskGrid, inc_l2: &MaskGrid, threshold: f32, cap: usize) -> Result<Quadtree> {
    if inc_l1.level != 1 || inc_l2.level != 2 {
        return Err(Error::Contract("build_quadtree needs level-1 and level-2 score grids".into()));
    }
    let mut cells: Vec<(u8, (usize, usize), f32)> = Vec::new();

    let s1 = side(1);
    let mut roots: Vec<(f32, (usize, usize))> = (0..s1 * s1)
        .filter(|&k| inc_l1.values[k] >= threshold)
        .map(|k| (inc_l1.values[k], (k / s1, k % s1)))
        .collect();
    roots.sort_by(by_score_then_cell);
    roots.truncate(cap);
    cells.extend(roots.iter().map(|&(s, c)| (1u8, c, s)));

    let mut second: Vec<(f32, (usize, usize))> = roots
        .iter()
        .flat_map(|&(_, (i, j))| (0..4).map(move |c| (2 * i + c / 2, 2 * j + c % 2)))
        .map(|(i, j)| (inc_l2.get(i, j), (i, j)))
        .collect();
    second.sort_by(by_score_then_cell);
    second.truncate(cap - cells.len());
    cells.extend(second.iter().map(|&(s, c)| (2u8, c, s)));

    let mut third: Vec<(f32, (usize, usize))> = second
        .iter()
        .filter(|&&(s, _)| s >= threshold)
        .flat_map(|&(s, (i, j))| (0..4).map(move |c| (s, (2 * i + c / 2, 2 * j + c % 2))))
        .collect();
    third.sort_by(by_score_then_cell);
    third.truncate(cap - cells.len());
    cells.extend(third.iter().map(|&(s, c)| (3u8, c, s)));

    Quadtree::from_cells(cells)
}

/// Teacher-forced tree: the same growth rule driven by ground-truth incoherence.
pub fn gt_quadtree(gt_fine: &MaskGrid, threshold: f32, cap: usize) -> Result<Quadtree> {
    build_quadtree(&gt_incoherence(gt_fine, 1)?, &gt_incoherence(gt_fine, 2)?, threshold, cap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntrySource {
    Context,
    /// Index into the tree's node list.
    Node(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceEntry {
    pub source: EntrySource,
    pub level: u8,
    pub cell: (usize, usize),
}

impl SequenceEntry {
    /// Row of this entry in the level-stacked RoI feature matrix
    /// (7×7 rows, then 14×14, 28×28, 56×56).
    pub fn feature_slot(&self) -> usize {
        let offset: usize = LEVEL_SIDES[..self.level as usize].iter().map(|s| s * s).sum();
        offset + self.cell.0 * side(self.level) + self.cell.1
    }

    /// Cell centre in 56×56 fine-grid units, as `(x, y)` = `(col, row)`.
    pub fn fine_position(&self) -> (f32, f32) {
        let f = (1usize << (FINE_LEVEL - self.level)) as f32;
        ((self.cell.1 as f32 + 0.5) * f, (self.cell.0 as f32 + 0.5) * f)
    }
}

/// Context points followed by tree nodes in `(level, row, col)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSequence {
    entries: Vec<SequenceEntry>,
}

impl NodeSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SequenceEntry] {
        &self.entries
    }

    /// Sequence index of `(level, cell)`, if present.
    pub fn position(&self, level: u8, cell: (usize, usize)) -> Option<usize> {
        if level == 0 {
            return (cell.0 < 7 && cell.1 < 7).then(|| cell.0 * 7 + cell.1);
        }
        self.entries[CONTEXT_LEN..]
            .binary_search_by(|e| (e.level, e.cell).cmp(&(level, cell)))
            .ok()
            .map(|k| k + CONTEXT_LEN)
    }
}

/// Serializes the 49 context cells row-major, then every tree node ordered by
/// `(level, row, col)`.
pub fn serialize_sequence(tree: &Quadtree) -> Result<NodeSequence> {
    let mut seen = BTreeSet::new();
    let mut order: Vec<usize> = (0..tree.nodes.len()).collect();
    order.sort_by_key(|&k| (tree.nodes[k].level, tree.nodes[k].cell));
    let mut entries = Vec::with_capacity(CONTEXT_LEN + tree.len());
    for i in 0..7 {
        for j in 0..7 {
            entries.push(SequenceEntry { source: EntrySource::Context, level: 0, cell: (i, j) });
        }
    }
    for k in order {
        let n = &tree.nodes[k];
        if !seen.insert((n.level, n.cell)) {
            return Err(Error::Contract(format!(
                "duplicate quadtree node at level {} cell {:?}",
                n.level, n.cell
            )));
        }
        entries.push(SequenceEntry { source: EntrySource::Node(k), level: n.level, cell: n.cell });
    }
    Ok(NodeSequence { entries })
}

/// Assembles the fine mask: nearest-upsampled coarse probabilities, then each
/// node's label over its fine footprint, levels 1, 2, 3 in that order.
pub fn propagate_labels(coarse: &MaskGrid, tree: &Quadtree) -> Result<MaskGrid> {
    if coarse.level != COARSE_LEVEL {
        return Err(Error::Contract("propagate_labels needs a level-1 coarse mask".into()));
    }
    let mut out = coarse.upsample_nearest(FINE_LEVEL)?;
    out.kind = MaskKind::Probability;
    let s = side(FINE_LEVEL);
    for level in 1..=FINE_LEVEL {
        let f = 1usize << (FINE_LEVEL - level);
        for (idx, n) in tree.nodes.iter().enumerate().filter(|(_, n)| n.level == level) {
            let label = tree.label_of(idx)?;
            for y in n.cell.0 * f..(n.cell.0 + 1) * f {
                out.values[y * s + n.cell.1 * f..y * s + (n.cell.1 + 1) * f].fill(label);
            }
        }
    }
    Ok(out)
}

/// Per-pixel oracle for [`propagate_labels`]: each fine pixel independently
/// takes the label of the deepest node covering it, else the coarse value of
/// the level-1 cell it lies in.
pub fn brute_force_assemble(coarse: &MaskGrid, tree: &Quadtree) -> Result<MaskGrid> {
    if coarse.level != COARSE_LEVEL {
        return Err(Error::Contract("brute_force_assemble needs a level-1 coarse mask".into()));
    }
    for idx in 0..tree.nodes.len() {
        tree.label_of(idx)?;
    }
    let s = side(FINE_LEVEL);
    let mut values = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut best: Option<(u8, f32)> = None;
            for n in &tree.nodes {
                let f = 1usize << (FINE_LEVEL - n.level);
                let covers = y / f == n.cell.0 && x / f == n.cell.1;
                if covers && best.map_or(true, |(l, _)| n.level > l) {
                    best = Some((n.level, n.refined_label.unwrap()));
                }
            }
            values[y * s + x] = match best {
                Some((_, label)) => label,
                None => coarse.values[(y / 4) * side(1) + x / 4],
            };
        }
    }
    MaskGrid::new(FINE_LEVEL, MaskKind::Probability, values)
}
