//! Weight-space surgery: depth pruning with local weight averaging and
//! conversion of deep dual-stream layers to single-stream layers.

use std::collections::{BTreeMap, BTreeSet};

use mmdc_tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BlockKind, StreamLayout};
use crate::error::{Error, Result};
use crate::model::{Block, Model, StreamWeights};

/// Partition of teacher layers into kept and removed, with each kept layer's
/// cluster size `k`: the number of removed layers immediately following it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub depth: usize,
    pub keep: Vec<usize>,
    pub remove: Vec<usize>,
    pub clusters: BTreeMap<usize, usize>,
}

/// Where a trainable student layer reads its input and target in the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillTarget {
    pub student_layer: usize,
    /// Kept layer's original index.
    pub teacher_layer: usize,
    /// Teacher layer whose output is the student's input; `None` means the embeddings.
    pub input_layer: Option<usize>,
    /// Last teacher layer of the cluster, `teacher_layer + k`.
    pub target_layer: usize,
}

impl PrunePlan {
    /// Builds the plan, scanning forward from every kept layer to size its cluster.
    pub fn new(keep: &[usize], remove: &[usize], depth: usize) -> Result<Self> {
        if depth < 2 {
            return Err(Error::invalid(format!("depth {depth} < 2")));
        }
        let keep: BTreeSet<usize> = keep.iter().copied().collect();
        let remove: BTreeSet<usize> = remove.iter().copied().collect();
        for &l in [0, depth - 1].iter() {
            if remove.contains(&l) {
                return Err(Error::ProtectedLayerPruned(l));
            }
        }
        if let Some(l) = keep.iter().chain(&remove).find(|&&l| l >= depth) {
            return Err(Error::invalid(format!("layer {l} out of range for depth {depth}")));
        }
        if let Some(l) = keep.intersection(&remove).next() {
            return Err(Error::invalid(format!("layer {l} is both kept and removed")));
        }
        if keep.len() + remove.len() != depth {
            return Err(Error::invalid(format!(
                "plan covers {} of {depth} layers",
                keep.len() + remove.len()
            )));
        }
        if !keep.contains(&0) || !keep.contains(&(depth - 1)) {
            return Err(Error::ProtectedLayerPruned(if keep.contains(&0) {
                depth - 1
            } else {
                0
            }));
        }
        let mut clusters = BTreeMap::new();
        for &l in &keep {
            let k = (l + 1..depth).take_while(|j| remove.contains(j)).count();
            clusters.insert(l, k);
        }
        let plan = Self {
            depth,
            keep: keep.into_iter().collect(),
            remove: remove.into_iter().collect(),
            clusters,
        };
        let covered: usize = plan.clusters.values().map(|k| 1 + k).sum();
        if covered != depth {
            return Err(Error::invalid(format!(
                "clusters cover {covered} layers, expected {depth}"
            )));
        }
        Ok(plan)
    }

    /// Keeps every layer.
    pub fn identity(depth: usize) -> Result<Self> {
        Self::new(&(0..depth).collect::<Vec<_>>(), &[], depth)
    }

    pub fn student_depth(&self) -> usize {
        self.keep.len()
    }

    pub fn cluster(&self, kept: usize) -> usize {
        self.clusters.get(&kept).copied().unwrap_or(0)
    }

    /// Position of a kept teacher layer in the student.
    pub fn new_index(&self, kept: usize) -> Option<usize> {
        self.keep.binary_search(&kept).ok()
    }

    /// `(trainable, frozen)` student layers: trainable are those standing in for a
    /// non-empty cluster.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.keep.len()).partition(|&i| self.cluster(self.keep[i]) > 0)
    }

    pub fn distill_targets(&self) -> Vec<DistillTarget> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &l)| self.cluster(l) > 0)
            .map(|(i, &l)| DistillTarget {
                student_layer: i,
                teacher_layer: l,
                input_layer: l.checked_sub(1),
                target_layer: l + self.cluster(l),
            })
            .collect()
    }
}

/// Elementwise mean of equally shaped arrays, accumulated in `f64`.
pub fn mean_arrays(arrays: &[&NdArray]) -> Result<NdArray> {
    let first = arrays.first().ok_or_else(|| Error::invalid("mean of zero arrays"))?;
    if arrays.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = vec![0.0f64; first.numel()];
    for a in arrays {
        if a.shape() != first.shape() {
            return Err(Error::invalid(format!(
                "cannot average shapes {:?} and {:?}",
                first.shape(),
                a.shape()
            )));
        }
        acc.iter_mut().zip(a.data()).for_each(|(s, &v)| *s += v as f64);
    }
    let n = arrays.len() as f64;
    Ok(NdArray::new(
        first.shape().to_vec(),
        acc.into_iter().map(|s| (s / n) as f32).collect(),
    )?)
}

fn mean_streams(streams: &[&StreamWeights]) -> Result<StreamWeights> {
    let mut out = streams[0].clone();
    for (slot, idx) in out.arrays_mut().into_iter().zip(0..) {
        let parts: Vec<&NdArray> = streams.iter().map(|s| s.arrays()[idx]).collect();
        *slot = mean_arrays(&parts)?;
    }
    Ok(out)
}

/// Averages every array of `blocks` (all of one kind).
pub fn mean_blocks(blocks: &[&Block]) -> Result<Block> {
    if blocks.len() == 1 {
        return Ok(blocks[0].clone());
    }
    match blocks[0] {
        Block::Dual { .. } => {
            let mut text = Vec::new();
            let mut image = Vec::new();
            for b in blocks {
                let Block::Dual { text: t, image: i } = b else {
                    return Err(Error::invalid("cannot average dual and single blocks"));
                };
                text.push(t);
                image.push(i);
            }
            Ok(Block::Dual {
                text: mean_streams(&text)?,
                image: mean_streams(&image)?,
            })
        }
        Block::Single { .. } => {
            let mut shared = Vec::new();
            for b in blocks {
                let Block::Single { shared: s } = b else {
                    return Err(Error::invalid("cannot average dual and single blocks"));
                };
                shared.push(s);
            }
            Ok(Block::Single {
                shared: mean_streams(&shared)?,
            })
        }
    }
}

/// Student whose block for kept layer `l` is the mean of teacher layers
/// `l..=l+k`. Blocks with `k = 0`, embeddings and head are copied unchanged.
pub fn apply_depth_prune(teacher: &Model, plan: &PrunePlan) -> Result<Model> {
    if plan.depth != teacher.depth() {
        return Err(Error::invalid(format!(
            "plan is for depth {}, model has {}",
            plan.depth,
            teacher.depth()
        )));
    }
    let mut blocks = Vec::with_capacity(plan.keep.len());
    let mut kinds = Vec::with_capacity(plan.keep.len());
    for &l in &plan.keep {
        let members: Vec<&Block> = teacher.blocks[l..=l + plan.cluster(l)].iter().collect();
        let b = mean_blocks(&members)?;
        kinds.push(b.kind());
        blocks.push(b);
    }
    let config = teacher.config.with_layout(StreamLayout::new(kinds)?);
    Model::from_parts(config, teacher.embed.clone(), blocks, teacher.head.clone())
}

/// Leading dual-stream layers kept, the rest converted to single-stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridPlan {
    pub n_dual: usize,
    pub n_single: usize,
    /// Teacher layer each single-stream student layer is initialized from.
    pub sources: Vec<usize>,
}

impl HybridPlan {
    pub fn new(depth: usize, n_dual: usize) -> Result<Self> {
        if n_dual < 1 || n_dual > depth {
            return Err(Error::config("hybrid.n_dual", format!("in [1, {depth}]"), n_dual));
        }
        Ok(Self {
            n_dual,
            n_single: depth - n_dual,
            sources: (n_dual..depth).collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.n_dual + self.n_single
    }
}

/// How single-stream MLP weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpInit {
    /// Copied from the teacher layer's image stream, like every other array.
    #[default]
    CopyImage,
    /// Drawn fresh from the given seed.
    Fresh(u64),
}

/// Hybrid student: layers below `n_dual` are copies; each deeper layer becomes
/// a single-stream block initialized from the teacher layer's image stream.
pub fn convert_hybrid(teacher: &Model, plan: &HybridPlan, mlp: MlpInit) -> Result<Model> {
    if !teacher.config.layout.is_all_dual() {
        return Err(Error::invalid("hybrid conversion needs an all-dual teacher"));
    }
    if plan.n_dual < 1 || plan.depth() != teacher.depth() {
        return Err(Error::invalid(format!(
            "hybrid plan {}+{} does not fit a {}-layer teacher",
            plan.n_dual,
            plan.n_single,
            teacher.depth()
        )));
    }
    let mut rng = match mlp {
        MlpInit::Fresh(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        MlpInit::CopyImage => None,
    };
    let mut blocks = teacher.clone_subrange(0..plan.n_dual)?;
    for &src in &plan.sources {
        let Block::Dual { image, .. } = &teacher.blocks[src] else {
            unreachable!("teacher checked all-dual");
        };
        let mut shared = image.clone();
        if let Some(rng) = rng.as_mut() {
            shared.reinit_mlp(&teacher.config, rng);
        }
        blocks.push(Block::Single { shared });
    }
    let config = teacher
        .config
        .with_layout(StreamLayout::hybrid(plan.n_dual, plan.n_single));
    Model::from_parts(config, teacher.embed.clone(), blocks, teacher.head.clone())
}

/// Whether every student block in `layers` equals the teacher's bitwise.
pub fn blocks_bit_equal(a: &Model, b: &Model, layers: std::ops::Range<usize>) -> bool {
    layers.into_iter().all(|l| {
        let (x, y) = (&a.blocks[l], &b.blocks[l]);
        x.kind() == y.kind()
            && x.streams()
                .iter()
                .zip(y.streams())
                .all(|((_, s), (_, t))| s.arrays().iter().zip(t.arrays()).all(|(p, q)| p.bit_eq(q)))
    })
}

#[allow(dead_code)]
fn kind_of(model: &Model, l: usize) -> BlockKind {
    model.config.layout.kind(l)
}
