//! SVD-based fast multipole evaluation of `q = A d`.
//!
//! For every box `b` on levels 2..=L the far-field block `A(I_F, I_b)` is
//! factored by a truncated SVD. Its right singular vectors project `d(I_b)`
//! onto a multipole expansion Φ; its left singular vectors define the local
//! expansion Ψ that summarizes `d(I_F)` as seen from `b`. Three families of
//! small operators move expansions between boxes:
//!
//! * M2M, child to parent: `T(k,k') = Σ_{i∈I_c} v^{src,b}_{k,i} v^{src,c}_{k',i}`
//! * M2L, interaction-list box to target: `T(k,k') = Σ_{i∈I_b'} v^{tgt,b}_{k,i} v^{src,b'}_{k',i}`
//! * L2L, parent to child: `T(k,k') = Σ_{i∈I_{F_parent}} v^{tgt,b}_{k,i} v^{tgt,parent}_{k',i}`
//!
//! Leaves then add `u^{tgt,b} diag(s) Ψ^b` to the exact near-field product.
//! All sums run in ascending index order, so [`FmmPlan::apply`] is
//! bit-reproducible.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::boxtree::{level_offset, BoxId, BoxTree, TreeError};
use crate::numkernel::{self, DenseMatrix, LinalgError, TruncatedSvd};

pub mod io;

#[derive(Debug, Error)]
pub enum FmmError {
    #[error(transparent)]
    Tree(#[from] TreeError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("rank must be at least 1")]
    ZeroRank,

    #[error("rank {requested} exceeds the factorized rank {available}")]
    RankTooLarge { requested: usize, available: usize },
}

/// How the per-box factors are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvdMode {
    /// One SVD per box; target factors are the source factors transposed.
    /// Valid because `A` is symmetric.
    Shared,
    /// Separate SVDs of `A(I_F, I_b)` and `A(I_b, I_F)`.
    Independent,
}

/// Truncated SVD factors of one box.
///
/// `source` factors `A(I_F, I_b)`: `left` is u^src (m_F × r), `right` is
/// v^src (m_b × r). `target` factors `A(I_b, I_F)` and is `None` under
/// [`SvdMode::Shared`], where u^tgt = v^src and v^tgt = u^src.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxFactors {
    pub id: BoxId,
    pub source: TruncatedSvd,
    pub target: Option<TruncatedSvd>,
}

impl BoxFactors {
    pub fn rank(&self) -> usize {
        self.source.rank()
    }

    /// v^src, rows follow `I_b`.
    pub fn source_right(&self) -> &DenseMatrix {
        &self.source.right
    }

    /// u^tgt, rows follow `I_b`.
    pub fn target_left(&self) -> &DenseMatrix {
        self.target.as_ref().map_or(&self.source.right, |t| &t.left)
    }

    pub fn target_values(&self) -> &[f64] {
        self.target.as_ref().map_or(&self.source.values, |t| &t.values)
    }

    /// v^tgt, rows follow `I_F` in ascending box order.
    pub fn target_right(&self) -> &DenseMatrix {
        self.target.as_ref().map_or(&self.source.left, |t| &t.right)
    }

    fn truncate(&self, p: usize) -> BoxFactors {
        let r = p.min(self.rank());
        let cut = |s: &TruncatedSvd| zero_null_triplets(s.truncate(r).expect("r within factor rank"));
        BoxFactors {
            id: self.id,
            source: cut(&self.source),
            target: self.target.as_ref().map(cut),
        }
    }
}

/// Triplets with an exactly zero singular value carry no information; their
/// vectors are zeroed so they drop out of every operator.
fn zero_null_triplets(mut svd: TruncatedSvd) -> TruncatedSvd {
    for k in 0..svd.rank() {
        if svd.values[k] == 0.0 {
            for i in 0..svd.left.nrows() {
                svd.left[(i, k)] = 0.0;
            }
            for i in 0..svd.right.nrows() {
                svd.right[(i, k)] = 0.0;
            }
        }
    }
    svd
}

/// Near-field block `A(I_b, I_N)` of one leaf with its column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct NearBlock {
    pub columns: Vec<usize>,
    pub block: DenseMatrix,
}

/// Full-rank (up to a cap) factorization of every box, from which plans of
/// any smaller rank can be cut without recomputing SVDs.
#[derive(Clone, Debug)]
pub struct Factorization {
    tree: Arc<BoxTree>,
    mode: SvdMode,
    max_rank: usize,
    boxes: Vec<Option<BoxFactors>>,
    spectra: Vec<Option<Vec<f64>>>,
    near: Arc<Vec<Option<NearBlock>>>,
}

fn far_indices(tree: &BoxTree, b: BoxId) -> Vec<usize> {
    tree.indices_of(&tree.far_field(b).expect("box on level >= 2"))
        .expect("far field is single-level")
}

impl Factorization {
    /// Factors `A(I_F, I_b)` for every box on levels 2..=L, keeping at most
    /// `max_rank` singular vectors but every singular value.
    pub fn compute(a: &DenseMatrix, tree: &BoxTree, max_rank: usize, mode: SvdMode) -> Result<Self, FmmError> {
        let m = tree.observation_count();
        if a.nrows() != m || a.ncols() != m {
            return Err(FmmError::DimensionMismatch {
                expected: m,
                found: a.nrows(),
            });
        }
        if max_rank == 0 {
            return Err(FmmError::ZeroRank);
        }
        let first = level_offset(2);
        let results: Vec<(Option<BoxFactors>, Option<Vec<f64>>)> = (0..tree.box_count())
            .into_par_iter()
            .map(|id| -> Result<_, FmmError> {
                if id < first {
                    return Ok((None, None));
                }
                let b = BoxId(id);
                let cols = tree.members(b);
                let rows = far_indices(tree, b);
                if cols.is_empty() || rows.is_empty() {
                    return Ok((None, None));
                }
                let block = a.select(&rows, cols);
                let full = numkernel::thin_svd(&block)?;
                let keep = max_rank.min(full.rank());
                let target = match mode {
                    SvdMode::Shared => None,
                    SvdMode::Independent => Some(numkernel::thin_svd(&block.transpose())?.truncate(keep)?),
                };
                let spectrum = full.values.clone();
                let factors = BoxFactors {
                    id: b,
                    source: full.truncate(keep)?,
                    target,
                };
                Ok((Some(factors), Some(spectrum)))
            })
            .collect::<Result<_, _>>()?;
        let (boxes, spectra) = results.into_iter().unzip();

        let near = tree
            .leaves()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|b| {
                let rows = tree.members(b);
                if rows.is_empty() {
                    return None;
                }
                let columns = tree
                    .indices_of(&tree.near_field(b).expect("leaf level >= 3"))
                    .expect("single level");
                let block = a.select(rows, &columns);
                Some(NearBlock { columns, block })
            })
            .collect();

        Ok(Self {
            tree: Arc::new(tree.clone()),
            mode,
            max_rank,
            boxes,
            spectra,
            near: Arc::new(near),
        })
    }

    pub fn tree(&self) -> &BoxTree {
        &self.tree
    }

    pub fn mode(&self) -> SvdMode {
        self.mode
    }

    /// All singular values of the far-field block of `b`, if it was factored.
    pub fn spectrum(&self, b: BoxId) -> Option<&[f64]> {
        self.spectra.get(b.0).and_then(|s| s.as_deref())
    }

    /// Mean of the `k`-th (1-based) singular value over factored boxes that have one.
    pub fn mean_singular_value(&self, k: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .spectra
            .iter()
            .flatten()
            .filter_map(|s| s.get(k.checked_sub(1)?).copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Largest rank any box can use: `max_rank` clipped by every block size.
    pub fn max_effective_rank(&self) -> usize {
        self.boxes.iter().flatten().map(BoxFactors::rank).max().unwrap_or(0)
    }

    /// Rank-`p` plan; each box uses rank `min(p, m_b, m_F)`.
    pub fn plan(&self, p: usize) -> Result<FmmPlan, FmmError> {
        if p == 0 {
            return Err(FmmError::ZeroRank);
        }
        if p > self.max_rank {
            return Err(FmmError::RankTooLarge {
                requested: p,
                available: self.max_rank,
            });
        }
        let boxes: Vec<Option<BoxFactors>> = self.boxes.iter().map(|f| f.as_ref().map(|f| f.truncate(p))).collect();
        let operators = Operators::build(&self.tree, &boxes);
        Ok(FmmPlan {
            rank: p,
            tree: Arc::clone(&self.tree),
            boxes,
            m2m: operators.m2m,
            m2l: operators.m2l,
            l2l: operators.l2l,
            near: Arc::clone(&self.near),
        })
    }
}

struct Operators {
    m2m: Vec<Option<DenseMatrix>>,
    m2l: Vec<Vec<(BoxId, DenseMatrix)>>,
    l2l: Vec<Option<DenseMatrix>>,
}

/// Position of every observation in a list, `usize::MAX` when absent.
fn positions(list: &[usize], m: usize) -> Vec<usize> {
    let mut pos = vec![usize::MAX; m];
    for (k, &i) in list.iter().enumerate() {
        pos[i] = k;
    }
    pos
}

/// M2M, M2L and L2L blocks owned by one box.
type BoxOperators = (Option<DenseMatrix>, Vec<(BoxId, DenseMatrix)>, Option<DenseMatrix>);

impl Operators {
    fn build(tree: &BoxTree, boxes: &[Option<BoxFactors>]) -> Self {
        let m = tree.observation_count();
        let per_box: Vec<BoxOperators> = (0..boxes.len())
            .into_par_iter()
            .map(|id| {
                let Some(fb) = boxes[id].as_ref() else {
                    return (None, Vec::new(), None);
                };
                let b = BoxId(id);
                let level = b.level();
                let far = far_indices(tree, b);
                let far_pos = positions(&far, m);
                let parent = b.parent().filter(|_| level >= 3).and_then(|p| boxes[p.0].as_ref().map(|f| (p, f)));

                // M2M from this box (as child) to its parent.
                let m2m = parent.map(|(p, fp)| {
                    let parent_pos = positions(tree.members(p), m);
                    let (vp, vc) = (fp.source_right(), fb.source_right());
                    DenseMatrix::from_fn(fp.rank(), fb.rank(), |k, kk| {
                        tree.members(b).iter().enumerate().fold(0.0, |acc, (j, &i)| {
                            acc + vp[(parent_pos[i], k)] * vc[(j, kk)]
                        })
                    })
                });

                // M2L into this box from its interaction list.
                let m2l = tree
                    .interaction_list(b)
                    .expect("level >= 2")
                    .into_iter()
                    .filter_map(|src| boxes[src.0].as_ref().map(|fs| (src, fs)))
                    .map(|(src, fs)| {
                        let (vt, vs) = (fb.target_right(), fs.source_right());
                        let op = DenseMatrix::from_fn(fb.rank(), fs.rank(), |k, kk| {
                            tree.members(src).iter().enumerate().fold(0.0, |acc, (j, &i)| {
                                acc + vt[(far_pos[i], k)] * vs[(j, kk)]
                            })
                        });
                        (src, op)
                    })
                    .collect();

                // L2L from the parent's local expansion into this box.
                let l2l = parent.map(|(p, fp)| {
                    let parent_far = far_indices(tree, p);
                    let (vt, vp) = (fb.target_right(), fp.target_right());
                    DenseMatrix::from_fn(fb.rank(), fp.rank(), |k, kk| {
                        parent_far.iter().enumerate().fold(0.0, |acc, (j, &i)| {
                            acc + vt[(far_pos[i], k)] * vp[(j, kk)]
                        })
                    })
                });
                (m2m, m2l, l2l)
            })
            .collect();
        let mut ops = Operators {
            m2m: Vec::with_capacity(boxes.len()),
            m2l: Vec::with_capacity(boxes.len()),
            l2l: Vec::with_capacity(boxes.len()),
        };
        for (a, b, c) in per_box {
            ops.m2m.push(a);
            ops.m2l.push(b);
            ops.l2l.push(c);
        }
        ops
    }
}

/// Everything needed to apply `A` fast; self-contained once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FmmPlan {
    rank: usize,
    tree: Arc<BoxTree>,
    boxes: Vec<Option<BoxFactors>>,
    /// Indexed by child id: parent-rank × child-rank.
    m2m: Vec<Option<DenseMatrix>>,
    /// Indexed by target id: one operator per interaction-list source.
    m2l: Vec<Vec<(BoxId, DenseMatrix)>>,
    /// Indexed by child id: child-rank × parent-rank.
    l2l: Vec<Option<DenseMatrix>>,
    /// Indexed by leaf position (id minus the leaf-level offset).
    near: Arc<Vec<Option<NearBlock>>>,
}

/// Multipole and local expansions produced by one far-field pass, indexed by box id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpansionState {
    /// Φ^b.
    pub multipole: Vec<Option<Vec<f64>>>,
    /// Ψ^{b,(1)}: contributions from the interaction list.
    pub local_interaction: Vec<Option<Vec<f64>>>,
    /// Ψ^{b,(2)}: contribution passed down from the parent.
    pub local_inherited: Vec<Option<Vec<f64>>>,
    /// Ψ^b = Ψ^{b,(1)} + Ψ^{b,(2)}.
    pub local: Vec<Option<Vec<f64>>>,
}

fn mat_vec_acc(op: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o += numkernel::dot(op.row(k), x);
    }
}

/// Builds a rank-`p` plan with one SVD per box.
pub fn plan_build(a: &DenseMatrix, tree: &BoxTree, p: usize) -> Result<FmmPlan, FmmError> {
    plan_build_with(a, tree, p, SvdMode::Shared)
}

pub fn plan_build_with(a: &DenseMatrix, tree: &BoxTree, p: usize, mode: SvdMode) -> Result<FmmPlan, FmmError> {
    Factorization::compute(a, tree, p, mode)?.plan(p)
}

/// Reference product `A d`, `2m²` flops.
pub fn apply_dense_oracle(a: &DenseMatrix, d: &[f64]) -> Result<Vec<f64>, FmmError> {
    if a.ncols() != d.len() {
        return Err(FmmError::DimensionMismatch {
            expected: a.ncols(),
            found: d.len(),
        });
    }
    Ok(a.mul_vec(d))
}

impl FmmPlan {
    pub(crate) fn from_parts(
        rank: usize,
        tree: BoxTree,
        boxes: Vec<Option<BoxFactors>>,
        m2m: Vec<Option<DenseMatrix>>,
        m2l: Vec<Vec<(BoxId, DenseMatrix)>>,
        l2l: Vec<Option<DenseMatrix>>,
        near: Vec<Option<NearBlock>>,
    ) -> Self {
        Self {
            rank,
            tree: Arc::new(tree),
            boxes,
            m2m,
            m2l,
            l2l,
            near: Arc::new(near),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn tree(&self) -> &BoxTree {
        &self.tree
    }

    pub fn dim(&self) -> usize {
        self.tree.observation_count()
    }

    pub fn factors(&self, b: BoxId) -> Option<&BoxFactors> {
        self.boxes.get(b.0).and_then(Option::as_ref)
    }

    pub(crate) fn boxes(&self) -> &[Option<BoxFactors>] {
        &self.boxes
    }

    /// M2M operator taking `child`'s multipole expansion to its parent.
    pub fn m2m(&self, child: BoxId) -> Option<&DenseMatrix> {
        self.m2m.get(child.0).and_then(Option::as_ref)
    }

    pub(crate) fn m2m_all(&self) -> &[Option<DenseMatrix>] {
        &self.m2m
    }

    /// M2L operators into `target`, one per factored interaction-list box.
    pub fn m2l(&self, target: BoxId) -> &[(BoxId, DenseMatrix)] {
        self.m2l.get(target.0).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn m2l_all(&self) -> &[Vec<(BoxId, DenseMatrix)>] {
        &self.m2l
    }

    /// L2L operator taking the parent's local expansion to `child`.
    pub fn l2l(&self, child: BoxId) -> Option<&DenseMatrix> {
        self.l2l.get(child.0).and_then(Option::as_ref)
    }

    pub(crate) fn l2l_all(&self) -> &[Option<DenseMatrix>] {
        &self.l2l
    }

    pub fn near_block(&self, leaf: BoxId) -> Option<&NearBlock> {
        let offset = level_offset(self.tree.levels());
        leaf.0.checked_sub(offset).and_then(|k| self.near.get(k)).and_then(Option::as_ref)
    }

    pub(crate) fn near_all(&self) -> &[Option<NearBlock>] {
        &self.near
    }

    /// Non-empty boxes on levels ≥ 2 that have no factors (empty far field).
    pub fn degenerate_boxes(&self) -> Vec<BoxId> {
        (2..=self.tree.levels())
            .flat_map(|l| self.tree.level_boxes(l))
            .filter(|&b| !self.tree.members(b).is_empty() && self.factors(b).is_none())
            .collect()
    }

    /// Boxes whose rank was clipped below the plan rank by their block size.
    pub fn clipped_boxes(&self) -> Vec<BoxId> {
        self.boxes
            .iter()
            .flatten()
            .filter(|f| f.rank() < self.rank)
            .map(|f| f.id)
            .collect()
    }

    fn check_len(&self, d: &[f64]) -> Result<(), FmmError> {
        if d.len() != self.dim() {
            return Err(FmmError::DimensionMismatch {
                expected: self.dim(),
                found: d.len(),
            });
        }
        Ok(())
    }

    /// `A(I_b, I_N) d(I_N)` for every leaf.
    pub fn near_field_apply(&self, d: &[f64]) -> Result<Vec<f64>, FmmError> {
        self.check_len(d)?;
        let mut q = vec![0.0; d.len()];
        for (leaf, block) in self.tree.leaves().zip(self.near.iter()) {
            let Some(block) = block else { continue };
            let x: Vec<f64> = block.columns.iter().map(|&j| d[j]).collect();
            for (row, &i) in self.tree.members(leaf).iter().enumerate() {
                q[i] = numkernel::dot(block.block.row(row), &x);
            }
        }
        Ok(q)
    }

    /// Upward and downward passes: Φ for every factored box, then Ψ.
    pub fn expansions(&self, d: &[f64]) -> Result<ExpansionState, FmmError> {
        self.check_len(d)?;
        let tree = &*self.tree;
        let n = self.boxes.len();
        let leaves = tree.levels();
        let mut state = ExpansionState {
            multipole: vec![None; n],
            local_interaction: vec![None; n],
            local_inherited: vec![None; n],
            local: vec![None; n],
        };

        // Leaf multipoles: Φ^b = (v^src)ᵀ d(I_b).
        for b in tree.leaves() {
            if let Some(f) = self.factors(b) {
                let x: Vec<f64> = tree.members(b).iter().map(|&j| d[j]).collect();
                state.multipole[b.0] = Some(f.source_right().transpose_mul_vec(&x));
            }
        }

        // Coarser multipoles through M2M, finest coarse level first.
        for level in (2..leaves).rev() {
            for b in tree.level_boxes(level) {
                let Some(f) = self.factors(b) else { continue };
                let mut phi = vec![0.0; f.rank()];
                for c in b.children() {
                    if let (Some(op), Some(child)) = (self.m2m(c), state.multipole[c.0].as_ref()) {
                        mat_vec_acc(op, child, &mut phi);
                    }
                }
                state.multipole[b.0] = Some(phi);
            }
        }

        // Interaction-list part of every local expansion.
        for level in 2..=leaves {
            for b in tree.level_boxes(level) {
                let Some(f) = self.factors(b) else { continue };
                let mut psi = vec![0.0; f.rank()];
                for (src, op) in self.m2l(b) {
                    if let Some(phi) = state.multipole[src.0].as_ref() {
                        mat_vec_acc(op, phi, &mut psi);
                    }
                }
                state.local_interaction[b.0] = Some(psi);
            }
        }

        // Downward pass: Ψ^b = Ψ^{b,(1)} + L2L Ψ^{parent}.
        for level in 2..=leaves {
            for b in tree.level_boxes(level) {
                let Some(own) = state.local_interaction[b.0].clone() else { continue };
                let mut inherited = vec![0.0; own.len()];
                if level > 2 {
                    let parent = b.parent().expect("level > 2");
                    if let (Some(op), Some(up)) = (self.l2l(b), state.local[parent.0].as_ref()) {
                        mat_vec_acc(op, up, &mut inherited);
                    }
                }
                let total = own.iter().zip(&inherited).map(|(a, b)| a + b).collect();
                state.local_inherited[b.0] = Some(inherited);
                state.local[b.0] = Some(total);
            }
        }
        Ok(state)
    }

    /// Far-field part `u^tgt diag(s) Ψ` for every leaf.
    pub fn far_field_apply(&self, d: &[f64]) -> Result<Vec<f64>, FmmError> {
        let state = self.expansions(d)?;
        let mut q = vec![0.0; d.len()];
        for b in self.tree.leaves() {
            let (Some(f), Some(psi)) = (self.factors(b), state.local[b.0].as_ref()) else {
                continue;
            };
            let scaled: Vec<f64> = psi.iter().zip(f.target_values()).map(|(p, s)| s * p).collect();
            let u = f.target_left();
            for (row, &i) in self.tree.members(b).iter().enumerate() {
                q[i] = numkernel::dot(u.row(row), &scaled);
            }
        }
        Ok(q)
    }

    /// `q = q^(1) + q^(2)`.
    pub fn apply(&self, d: &[f64]) -> Result<Vec<f64>, FmmError> {
        let near = self.near_field_apply(d)?;
        let far = self.far_field_apply(d)?;
        Ok(near.iter().zip(&far).map(|(a, b)| a + b).collect())
    }
}

/// Warns once per plan about boxes whose rank was clipped or that are degenerate.
pub fn report_clipping(plan: &FmmPlan) {
    let clipped = plan.clipped_boxes();
    if !clipped.is_empty() {
        warn!(
            "{} boxes hold fewer observations than rank {}; their rank was clipped",
            clipped.len(),
            plan.rank()
        );
    }
    let degenerate = plan.degenerate_boxes();
    if !degenerate.is_empty() {
        warn!("{} non-empty boxes have an empty far field", degenerate.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxtree::{GeoPoint, ObservationSet};
    use crate::covmodel::{inverse_weighting, CorrelationFunction, CorrelationKind, CovarianceModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n_lat: usize, n_lon: usize) -> ObservationSet {
        let mut pts = Vec::new();
        for i in 0..n_lat {
            for j in 0..n_lon {
                pts.push(GeoPoint::new(
                    54.0 + 6.0 * i as f64 / (n_lat - 1) as f64,
                    -6.0 + 12.0 * j as f64 / (n_lon - 1) as f64,
                ));
            }
        }
        ObservationSet::new(pts).unwrap()
    }

    fn soar_inverse(obs: &ObservationSet, l: f64) -> DenseMatrix {
        let f = CorrelationFunction::new(CorrelationKind::Soar, l).unwrap();
        inverse_weighting(&CovarianceModel::uniform(f, obs, 1.0).unwrap()).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    struct Fixture {
        tree: BoxTree,
        a: DenseMatrix,
    }

    fn fixture() -> Fixture {
        let obs = grid(16, 16);
        Fixture {
            tree: BoxTree::build(&obs, 3).unwrap(),
            a: soar_inverse(&obs, 150.0),
        }
    }

    #[test]
    fn identity_plan() {
        let obs = grid(8, 8);
        let tree = BoxTree::build(&obs, 3).unwrap();
        let plan = plan_build(&DenseMatrix::identity(64), &tree, 2).unwrap();
        for f in plan.boxes().iter().flatten() {
            assert!(f.source.values.iter().all(|&s| s == 0.0));
        }
        for op in plan.m2m_all().iter().flatten().chain(plan.l2l_all().iter().flatten()) {
            assert_eq!(op.max_abs(), 0.0);
        }
        for (_, op) in plan.m2l_all().iter().flatten() {
            assert_eq!(op.max_abs(), 0.0);
        }
        let d = random_vec(64, 1);
        assert_eq!(plan.far_field_apply(&d).unwrap(), vec![0.0; 64]);
        assert_eq!(plan.apply(&d).unwrap(), d);
    }

    #[test]
    fn full_rank_is_exact() {
        let fx = fixture();
        let fact = Factorization::compute(&fx.a, &fx.tree, usize::MAX, SvdMode::Shared).unwrap();
        let plan = fact.plan(fact.max_effective_rank()).unwrap();
        let d = random_vec(256, 3);
        let want = apply_dense_oracle(&fx.a, &d).unwrap();
        assert!(rel_err(&plan.apply(&d).unwrap(), &want) <= 1e-10);
    }

    #[test]
    fn far_field_matches_dense_far_product_at_full_rank() {
        let fx = fixture();
        let fact = Factorization::compute(&fx.a, &fx.tree, usize::MAX, SvdMode::Shared).unwrap();
        let plan = fact.plan(fact.max_effective_rank()).unwrap();
        let d = random_vec(256, 4);
        let far = plan.far_field_apply(&d).unwrap();
        let mut want = vec![0.0; 256];
        for b in fx.tree.leaves() {
            let cols = fx.tree.indices_of(&fx.tree.far_field(b).unwrap()).unwrap();
            for &i in fx.tree.members(b) {
                want[i] = cols.iter().map(|&j| fx.a[(i, j)] * d[j]).sum();
            }
        }
        assert!(rel_err(&far, &want) <= 1e-10);
    }

    #[test]
    fn operators_match_brute_force_sums() {
        let fx = fixture();
        let plan = plan_build(&fx.a, &fx.tree, 3).unwrap();
        let m = 256;
        // Dense embeddings of singular vectors over all m observations.
        let embed = |rows: &[usize], v: &DenseMatrix, k: usize| {
            let mut full = vec![0.0; m];
            for (j, &i) in rows.iter().enumerate() {
                full[i] = v[(j, k)];
            }
            full
        };
        for c in fx.tree.leaves().step_by(5) {
            let p = c.parent().unwrap();
            let (fc, fp) = (plan.factors(c).unwrap(), plan.factors(p).unwrap());
            let op = plan.m2m(c).unwrap();
            for k in 0..fp.rank() {
                let vp = embed(fx.tree.members(p), fp.source_right(), k);
                for kk in 0..fc.rank() {
                    let vc = embed(fx.tree.members(c), fc.source_right(), kk);
                    let brute: f64 = fx.tree.members(c).iter().map(|&i| vp[i] * vc[i]).sum();
                    assert!((op[(k, kk)] - brute).abs() < 1e-13);
                }
            }
            let far_c = fx.tree.indices_of(&fx.tree.far_field(c).unwrap()).unwrap();
            let far_p = fx.tree.indices_of(&fx.tree.far_field(p).unwrap()).unwrap();
            let l2l = plan.l2l(c).unwrap();
            for k in 0..fc.rank() {
                let vt = embed(&far_c, fc.target_right(), k);
                for kk in 0..fp.rank() {
                    let vtp = embed(&far_p, fp.target_right(), kk);
                    let brute: f64 = far_p.iter().map(|&i| vt[i] * vtp[i]).sum();
                    assert!((l2l[(k, kk)] - brute).abs() < 1e-13);
                }
            }
            for (src, op) in plan.m2l(c) {
                let fs = plan.factors(*src).unwrap();
                for k in 0..fc.rank() {
                    let vt = embed(&far_c, fc.target_right(), k);
                    for kk in 0..fs.rank() {
                        let vs = embed(fx.tree.members(*src), fs.source_right(), kk);
                        let brute: f64 = fx.tree.members(*src).iter().map(|&i| vt[i] * vs[i]).sum();
                        assert!((op[(k, kk)] - brute).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn operator_counts() {
        let fx = fixture();
        let plan = plan_build(&fx.a, &fx.tree, 4).unwrap();
        assert_eq!(plan.m2m_all().iter().flatten().count(), 64);
        assert_eq!(plan.l2l_all().iter().flatten().count(), 64);
        let pairs: usize = (4..84).map(|id| fx.tree.interaction_list(BoxId(id)).unwrap().len()).sum();
        assert_eq!(plan.m2l_all().iter().map(Vec::len).sum::<usize>(), pairs);
        for op in plan.m2m_all().iter().flatten() {
            assert_eq!((op.nrows(), op.ncols()), (4, 4));
        }
    }

    #[test]
    fn near_plus_far_is_apply_bitwise() {
        let fx = fixture();
        let plan = plan_build(&fx.a, &fx.tree, 3).unwrap();
        let d = random_vec(256, 8);
        let near = plan.near_field_apply(&d).unwrap();
        let far = plan.far_field_apply(&d).unwrap();
        let total: Vec<f64> = near.iter().zip(&far).map(|(a, b)| a + b).collect();
        assert_eq!(plan.apply(&d).unwrap(), total);
        assert_eq!(plan.near_field_apply(&vec![0.0; 256]).unwrap(), vec![0.0; 256]);
    }

    #[test]
    fn near_field_exact_for_block_diagonal() {
        let obs = grid(16, 16);
        let tree = BoxTree::build(&obs, 3).unwrap();
        let mut a = DenseMatrix::zeros(256, 256);
        for b in tree.leaves() {
            for &i in tree.members(b) {
                for &j in tree.members(b) {
                    a[(i, j)] = 1.0 / (1.0 + (i as f64 - j as f64).abs());
                }
            }
        }
        let plan = plan_build(&a, &tree, 2).unwrap();
        let d = random_vec(256, 2);
        let want = a.mul_vec(&d);
        let got = plan.near_field_apply(&d).unwrap();
        assert!(rel_err(&got, &want) < 1e-14);
    }

    #[test]
    fn shared_and_independent_svds_agree() {
        let fx = fixture();
        for p in [3, 1000] {
            let shared = Factorization::compute(&fx.a, &fx.tree, p, SvdMode::Shared).unwrap();
            let indep = Factorization::compute(&fx.a, &fx.tree, p, SvdMode::Independent).unwrap();
            let p = p.min(shared.max_effective_rank());
            let d = random_vec(256, 5);
            let qs = shared.plan(p).unwrap().apply(&d).unwrap();
            let qi = indep.plan(p).unwrap().apply(&d).unwrap();
            assert!(rel_err(&qi, &qs) <= 1e-10, "p = {p}: {}", rel_err(&qi, &qs));
        }
    }

    #[test]
    fn apply_is_self_contained() {
        let plan = {
            let fx = fixture();
            plan_build(&fx.a, &fx.tree, 3).unwrap()
        };
        let d = random_vec(256, 6);
        assert_eq!(plan.apply(&d).unwrap().len(), 256);
    }

    #[test]
    fn length_mismatch() {
        let fx = fixture();
        let plan = plan_build(&fx.a, &fx.tree, 2).unwrap();
        assert!(matches!(plan.apply(&[1.0; 3]), Err(FmmError::DimensionMismatch { .. })));
        assert!(matches!(apply_dense_oracle(&fx.a, &[1.0]), Err(FmmError::DimensionMismatch { .. })));
        assert!(matches!(plan_build(&DenseMatrix::identity(3), &fx.tree, 2), Err(FmmError::DimensionMismatch { .. })));
        assert!(matches!(plan_build(&fx.a, &fx.tree, 0), Err(FmmError::ZeroRank)));
    }

    #[test]
    fn dense_oracle_examples() {
        assert_eq!(apply_dense_oracle(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(apply_dense_oracle(&DenseMatrix::from_diagonal(&[2.0]), &[3.0]).unwrap(), vec![6.0]);
        let fx = fixture();
        let d = random_vec(256, 12);
        let q = apply_dense_oracle(&fx.a, &d).unwrap();
        assert!(numkernel::dot(&q, &d) > 0.0);
    }

    #[test]
    fn sparse_occupancy_clips_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = (0..90)
            .map(|_| GeoPoint::new(rng.random_range(54.0..60.0), rng.random_range(-6.0..6.0)))
            .collect();
        let obs = ObservationSet::new(pts).unwrap();
        let tree = BoxTree::build(&obs, 3).unwrap();
        let a = soar_inverse(&obs, 120.0);
        let plan = plan_build(&a, &tree, 5).unwrap();
        assert!(!plan.clipped_boxes().is_empty());
        for f in plan.boxes().iter().flatten() {
            assert_eq!(f.rank(), 5.min(tree.members(f.id).len()));
        }
        let d = random_vec(90, 1);
        assert!(plan.apply(&d).unwrap().iter().all(|x| x.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn apply_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let fx = fixture();
            let plan = plan_build(&fx.a, &fx.tree, 2).unwrap();
            let d1 = random_vec(256, seed);
            let d2 = random_vec(256, seed.wrapping_add(1));
            let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = plan.apply(&mix).unwrap();
            let (q1, q2) = (plan.apply(&d1).unwrap(), plan.apply(&d2).unwrap());
            let rhs: Vec<f64> = q1.iter().zip(&q2).map(|(x, y)| alpha * x + beta * y).collect();
            prop_assert!(rel_err(&lhs, &rhs) <= 1e-12);
        }
    }
}
