//! Search spaces: the sequential meta-architecture and the two-cell DAG.
//!
//! A [`Network`] is either the relaxed supernet (every site holds one
//! candidate per kind in the opset plus a logit vector) or a discrete network
//! (one candidate per site, no logits). Both share the forward pass, so a
//! saturated supernet and its discretized copy compute the same function.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::candidate::{
    mixed_forward, op_forward, op_init, softmax, LayerContext, OpConfig, OpInstance, OperationKind,
};
use crate::error::{Error, Result};
use crate::signal::DegradationOperator;

pub const ENUMERATION_LIMIT: u128 = 100_000;
const ALPHA_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "topology")]
pub enum Layout {
    Sequential { depth: usize },
    Cell { cells: usize, states: usize },
}

impl Layout {
    pub fn n_sites(&self) -> usize {
        match *self {
            Layout::Sequential { depth } => depth,
            Layout::Cell { cells, states } => cells * edges_per_cell(states),
        }
    }

    fn tag(&self) -> String {
        match *self {
            Layout::Sequential { depth } => format!("seq{depth}"),
            Layout::Cell { cells, states } => format!("cell{cells}x{states}"),
        }
    }

    fn parse_tag(tag: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown topology tag {tag:?}"));
        if let Some(d) = tag.strip_prefix("seq") {
            return Ok(Layout::Sequential {
                depth: d.parse().map_err(|_| bad())?,
            });
        }
        let rest = tag.strip_prefix("cell").ok_or_else(bad)?;
        let (c, s) = rest.split_once('x').ok_or_else(bad)?;
        Ok(Layout::Cell {
            cells: c.parse().map_err(|_| bad())?,
            states: s.parse().map_err(|_| bad())?,
        })
    }
}

/// Edges `(i, j)`, `i < j`, between the cell input (node 0) and `states` states.
pub fn edges_per_cell(states: usize) -> usize {
    states * (states + 1) / 2
}

/// Edge list of one cell in lexicographic order.
pub fn cell_edges(states: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(edges_per_cell(states));
    for i in 0..states {
        for j in i + 1..=states {
            edges.push((i, j));
        }
    }
    edges
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub layout: Layout,
    pub opset: Vec<OperationKind>,
    pub global_residual: bool,
}

impl SpaceSpec {
    pub fn sequential(depth: usize, opset: Vec<OperationKind>) -> Self {
        SpaceSpec {
            layout: Layout::Sequential { depth },
            opset,
            global_residual: true,
        }
    }

    pub fn cell(cells: usize, states: usize, opset: Vec<OperationKind>) -> Self {
        SpaceSpec {
            layout: Layout::Cell { cells, states },
            opset,
            global_residual: true,
        }
    }

    pub fn good_ops() -> Vec<OperationKind> {
        vec![OperationKind::LearnableGrad, OperationKind::Net]
    }

    /// Every operation admissible for the layout (Zero only in cells).
    pub fn all_ops(layout: &Layout) -> Vec<OperationKind> {
        let mut ops = vec![
            OperationKind::LearnableGrad,
            OperationKind::Net,
            OperationKind::Roll,
            OperationKind::Noise,
        ];
        if matches!(layout, Layout::Cell { .. }) {
            ops.push(OperationKind::Zero);
        }
        ops
    }

    pub fn n_sites(&self) -> usize {
        self.layout.n_sites()
    }

    pub fn validate(&self) -> Result<()> {
        match self.layout {
            Layout::Sequential { depth: 0 } => return Err(Error::invalid("sequential depth must be >= 1")),
            Layout::Cell { cells, states } if cells == 0 || states < 2 => {
                return Err(Error::invalid("cell space needs >= 1 cell and >= 2 states"))
            }
            _ => {}
        }
        if self.opset.is_empty() {
            return Err(Error::invalid("empty operation set"));
        }
        let unique: HashSet<_> = self.opset.iter().collect();
        if unique.len() != self.opset.len() {
            return Err(Error::invalid("operation set has duplicates"));
        }
        if matches!(self.layout, Layout::Sequential { .. }) && self.opset.contains(&OperationKind::Zero) {
            return Err(Error::invalid(
                "the Zero operation is only admissible in the cell space",
            ));
        }
        Ok(())
    }

    /// Short label such as `seq10[LG,Net]+res`.
    pub fn summary(&self) -> String {
        let ops: Vec<&str> = self.opset.iter().map(|k| k.mnemonic()).collect();
        format!(
            "{}[{}]{}",
            self.layout.tag(),
            ops.join(","),
            if self.global_residual { "+res" } else { "" }
        )
    }
}

/// One operation per site; `Display`/`FromStr` give the canonical string.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiscreteArch {
    pub layout: Layout,
    pub choices: Vec<OperationKind>,
}

impl DiscreteArch {
    pub fn uniform(spec: &SpaceSpec, kind: OperationKind) -> Self {
        DiscreteArch {
            layout: spec.layout,
            choices: vec![kind; spec.n_sites()],
        }
    }

    pub fn validate_for(&self, spec: &SpaceSpec) -> Result<()> {
        if self.layout != spec.layout || self.choices.len() != spec.n_sites() {
            return Err(Error::invalid(format!(
                "architecture {self} does not match space {}",
                spec.summary()
            )));
        }
        if let Some(k) = self.choices.iter().find(|k| !spec.opset.contains(k)) {
            return Err(Error::invalid(format!("operation {k} is not in the space's opset")));
        }
        Ok(())
    }

    pub fn contains_any(&self, kinds: &[OperationKind]) -> bool {
        self.choices.iter().any(|k| kinds.contains(k))
    }
}

impl fmt::Display for DiscreteArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<&str> = self.choices.iter().map(|k| k.mnemonic()).collect();
        write!(f, "{}|{}", self.layout.tag(), ops.join(","))
    }
}

impl Serialize for DiscreteArch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DiscreteArch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for DiscreteArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (tag, ops) = s
            .split_once('|')
            .ok_or_else(|| Error::invalid(format!("architecture string {s:?} lacks a topology tag")))?;
        let layout = Layout::parse_tag(tag)?;
        let choices = if ops.is_empty() {
            Vec::new()
        } else {
            ops.split(',').map(str::parse).collect::<Result<Vec<_>>>()?
        };
        if choices.len() != layout.n_sites() {
            return Err(Error::invalid(format!(
                "{} choices for a layout with {} sites",
                choices.len(),
                layout.n_sites()
            )));
        }
        Ok(DiscreteArch { layout, choices })
    }
}

#[derive(Clone, Debug)]
pub struct Site {
    /// Architecture logits; `None` in a discrete network.
    pub alpha: Option<ParamId>,
    pub candidates: Vec<OpInstance>,
}

/// Width-1 convolution mapping the two concatenated cell states to one channel.
#[derive(Clone, Copy, Debug)]
pub struct CellMixer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: SpaceSpec,
    op_config: OpConfig,
    operator: Arc<DegradationOperator>,
    pub store: ParamStore,
    sites: Vec<Site>,
    mixers: Vec<CellMixer>,
}

fn init_mixers<R: Rng + ?Sized>(spec: &SpaceSpec, rng: &mut R, store: &mut ParamStore) -> Vec<CellMixer> {
    let Layout::Cell { cells, .. } = spec.layout else {
        return Vec::new();
    };
    let bound = 1.0 / 2f64.sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite");
    (0..cells)
        .map(|_| {
            let w: Vec<f64> = (0..2).map(|_| dist.sample(rng)).collect();
            CellMixer {
                weight: store.add(Tensor::new(vec![1, 2, 1], w).expect("sized")),
                bias: store.add(Tensor::zeros(&[1])),
            }
        })
        .collect()
}

/// The supernet: every opset kind at every site, logits `~ N(0, 1e-3²)`.
pub fn build_relaxed<R: Rng + ?Sized>(
    spec: &SpaceSpec,
    rng: &mut R,
    operator: Arc<DegradationOperator>,
    op_config: &OpConfig,
) -> Result<Network> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let normal = Normal::new(0.0, ALPHA_INIT_STD).expect("positive std");
    let mut sites = Vec::with_capacity(spec.n_sites());
    for _ in 0..spec.n_sites() {
        let candidates = spec
            .opset
            .iter()
            .map(|k| op_init(*k, rng, &mut store, &operator, op_config))
            .collect();
        let logits: Vec<f64> = (0..spec.opset.len()).map(|_| normal.sample(rng)).collect();
        let alpha = store.add(Tensor::new(vec![logits.len()], logits)?);
        sites.push(Site {
            alpha: Some(alpha),
            candidates,
        });
    }
    let mixers = init_mixers(spec, rng, &mut store);
    Ok(Network {
        spec: spec.clone(),
        op_config: op_config.clone(),
        operator,
        store,
        sites,
        mixers,
    })
}

/// A discrete network with freshly initialized parameters.
pub fn build_discrete<R: Rng + ?Sized>(
    spec: &SpaceSpec,
    arch: &DiscreteArch,
    rng: &mut R,
    operator: Arc<DegradationOperator>,
    op_config: &OpConfig,
) -> Result<Network> {
    spec.validate()?;
    arch.validate_for(spec)?;
    let mut store = ParamStore::new();
    let sites = arch
        .choices
        .iter()
        .map(|k| Site {
            alpha: None,
            candidates: vec![op_init(*k, rng, &mut store, &operator, op_config)],
        })
        .collect();
    let mixers = init_mixers(spec, rng, &mut store);
    Ok(Network {
        spec: spec.clone(),
        op_config: op_config.clone(),
        operator,
        store,
        sites,
        mixers,
    })
}

/// Per-site uniform choice over the opset.
pub fn random_arch<R: Rng + ?Sized>(spec: &SpaceSpec, rng: &mut R) -> DiscreteArch {
    let choices = (0..spec.n_sites())
        .map(|_| spec.opset[rng.random_range(0..spec.opset.len())])
        .collect();
    DiscreteArch {
        layout: spec.layout,
        choices,
    }
}

/// Every architecture of the space in lexicographic opset order (first site most significant).
pub fn enumerate_archs(spec: &SpaceSpec) -> Result<Vec<DiscreteArch>> {
    spec.validate()?;
    let k = spec.opset.len() as u128;
    let sites = spec.n_sites() as u32;
    let size = k.checked_pow(sites).unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::SpaceTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut idx = vec![0usize; sites as usize];
    for _ in 0..size {
        out.push(DiscreteArch {
            layout: spec.layout,
            choices: idx.iter().map(|i| spec.opset[*i]).collect(),
        });
        for pos in (0..idx.len()).rev() {
            idx[pos] += 1;
            if idx[pos] < spec.opset.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
    Ok(out)
}

impl Network {
    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn op_config(&self) -> &OpConfig {
        &self.op_config
    }

    pub fn operator(&self) -> &Arc<DegradationOperator> {
        &self.operator
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn mixers(&self) -> &[CellMixer] {
        &self.mixers
    }

    pub fn is_relaxed(&self) -> bool {
        self.sites.iter().any(|s| s.alpha.is_some())
    }

    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.sites.iter().filter_map(|s| s.alpha).collect()
    }

    /// Every operation and mixer parameter (everything except the logits).
    pub fn theta_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .sites
            .iter()
            .flat_map(|s| s.candidates.iter().flat_map(|c| c.param_ids()))
            .collect();
        ids.extend(self.mixers.iter().flat_map(|m| [m.weight, m.bias]));
        ids
    }

    pub fn alphas(&self, site: usize) -> Option<&[f64]> {
        self.sites[site].alpha.map(|a| self.store.value(a).data())
    }

    pub fn set_alphas(&mut self, site: usize, logits: &[f64]) -> Result<()> {
        let id = self.sites[site]
            .alpha
            .ok_or_else(|| Error::invalid("discrete networks carry no logits"))?;
        let t = self.store.value_mut(id);
        if t.len() != logits.len() {
            return Err(Error::invalid(format!(
                "expected {} logits, got {}",
                t.len(),
                logits.len()
            )));
        }
        t.data_mut().copy_from_slice(logits);
        Ok(())
    }

    /// Softmax weights of every site (a single 1.0 for discrete sites).
    pub fn betas(&self) -> Vec<Vec<f64>> {
        (0..self.sites.len())
            .map(|i| self.alphas(i).map(softmax).unwrap_or_else(|| vec![1.0]))
            .collect()
    }

    /// Per-site argmax over the logits, ties to the lowest opset index.
    pub fn discretize(&self) -> DiscreteArch {
        let choices = self
            .sites
            .iter()
            .map(|site| match site.alpha {
                None => site.candidates[0].kind,
                Some(id) => {
                    let logits = self.store.value(id).data();
                    let mut best = 0;
                    for (i, v) in logits.iter().enumerate() {
                        if *v > logits[best] {
                            best = i;
                        }
                    }
                    site.candidates[best].kind
                }
            })
            .collect();
        DiscreteArch {
            layout: self.spec.layout,
            choices,
        }
    }

    /// Copies the chosen candidate of every site (and the mixers) into a discrete network.
    pub fn extract_discrete(&self, arch: &DiscreteArch) -> Result<Network> {
        arch.validate_for(&self.spec)?;
        let mut store = ParamStore::new();
        let copy = |id: ParamId, store: &mut ParamStore| store.add(self.store.value(id).clone());
        let mut sites = Vec::with_capacity(self.sites.len());
        for (site, kind) in self.sites.iter().zip(&arch.choices) {
            let src = site
                .candidates
                .iter()
                .find(|c| c.kind == *kind)
                .ok_or_else(|| Error::invalid(format!("site has no {kind} candidate")))?;
            let net = src.net.map(|n| crate::candidate::NetParams {
                conv1_w: copy(n.conv1_w, &mut store),
                bn_gamma: copy(n.bn_gamma, &mut store),
                bn_beta: copy(n.bn_beta, &mut store),
                conv2_w: copy(n.conv2_w, &mut store),
                conv2_b: copy(n.conv2_b, &mut store),
            });
            let tau = src.tau.map(|t| copy(t, &mut store));
            sites.push(Site {
                alpha: None,
                candidates: vec![OpInstance { kind: *kind, net, tau }],
            });
        }
        let mixers = self
            .mixers
            .iter()
            .map(|m| CellMixer {
                weight: copy(m.weight, &mut store),
                bias: copy(m.bias, &mut store),
            })
            .collect();
        Ok(Network {
            spec: self.spec.clone(),
            op_config: self.op_config.clone(),
            operator: self.operator.clone(),
            store,
            sites,
            mixers,
        })
    }

    /// Overwrites the parameters of candidate `kind` at `site` with `src`'s parameters at `src_site`.
    pub fn copy_candidate_from(
        &mut self,
        site: usize,
        kind: OperationKind,
        src: &Network,
        src_site: usize,
    ) -> Result<()> {
        let dst = self.sites[site]
            .candidates
            .iter()
            .find(|c| c.kind == kind)
            .ok_or_else(|| Error::invalid(format!("site {site} has no {kind} candidate")))?
            .param_ids();
        let from = src.sites[src_site]
            .candidates
            .iter()
            .find(|c| c.kind == kind)
            .ok_or_else(|| Error::invalid(format!("source site {src_site} has no {kind} candidate")))?
            .param_ids();
        for (d, s) in dst.into_iter().zip(from) {
            *self.store.value_mut(d) = src.store.value(s).clone();
        }
        Ok(())
    }

    fn site_forward(&self, tape: &mut Tape, index: usize, u: Var, ctx: &LayerContext<'_>) -> Result<Var> {
        let site = &self.sites[index];
        match site.alpha {
            Some(alpha) => mixed_forward(tape, &self.store, alpha, &site.candidates, u, ctx, index),
            None => op_forward(tape, &self.store, &site.candidates[0], u, ctx, index),
        }
    }

    /// Reconstruction from measurements `[B, 1, M]`, starting at `u0 = Aᵀy`.
    pub fn forward(&self, tape: &mut Tape, measured: &Tensor, noise_seed: u64) -> Result<Var> {
        let f = tape.constant(measured.clone());
        let u0 = tape.linear(f, self.operator.clone(), true)?;
        let ctx = LayerContext {
            measured: f,
            operator: &self.operator,
            config: &self.op_config,
            noise_seed,
        };
        let body = match self.spec.layout {
            Layout::Sequential { depth } => {
                let mut u = u0;
                for j in 0..depth {
                    u = self.site_forward(tape, j, u, &ctx)?;
                }
                u
            }
            Layout::Cell { cells, states } => {
                let edges = cell_edges(states);
                let mut input = u0;
                for c in 0..cells {
                    let mut nodes = vec![input];
                    for j in 1..=states {
                        let mut incoming = Vec::with_capacity(j);
                        for (e, &(from, to)) in edges.iter().enumerate() {
                            if to == j {
                                let site = c * edges.len() + e;
                                incoming.push(self.site_forward(tape, site, nodes[from], &ctx)?);
                            }
                        }
                        nodes.push(tape.sum(&incoming)?);
                    }
                    let cat = tape.concat_channels(&[nodes[states - 1], nodes[states]])?;
                    let mixer = self.mixers[c];
                    let w = tape.param(&self.store, mixer.weight);
                    let b = tape.param(&self.store, mixer.bias);
                    input = tape.conv1d(cat, w, b)?;
                }
                input
            }
        };
        if self.spec.global_residual {
            tape.add(u0, body)
        } else {
            Ok(body)
        }
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, measured: &Tensor, noise_seed: u64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, measured, noise_seed)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::signal::{make_batch, CosineConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use OperationKind::*;

    fn blur() -> Arc<DegradationOperator> {
        Arc::new(DegradationOperator::blur(50).unwrap())
    }

    fn batch(seed: u64, op: &DegradationOperator, b: usize) -> crate::signal::SignalBatch {
        make_batch(&mut ChaCha8Rng::seed_from_u64(seed), op, &CosineConfig::default(), b).unwrap()
    }

    #[test]
    fn site_and_instance_counts() {
        let op = blur();
        let cfg = OpConfig::default();
        let seq = build_relaxed(
            &SpaceSpec::sequential(10, SpaceSpec::good_ops()),
            &mut ChaCha8Rng::seed_from_u64(0),
            op.clone(),
            &cfg,
        )
        .unwrap();
        assert_eq!(seq.sites().len(), 10);
        assert_eq!(seq.sites().iter().map(|s| s.candidates.len()).sum::<usize>(), 20);

        let layout = Layout::Cell { cells: 2, states: 5 };
        let cell_spec = SpaceSpec::cell(2, 5, SpaceSpec::all_ops(&layout));
        assert_eq!(cell_spec.n_sites(), 30);
        assert_eq!(cell_edges(5).len(), 15);
        let cell = build_relaxed(&cell_spec, &mut ChaCha8Rng::seed_from_u64(0), op, &cfg).unwrap();
        assert_eq!(cell.sites().len(), 30);
        assert!(cell.sites().iter().all(|s| s.candidates.len() == 5));
        assert_eq!(cell.mixers().len(), 2);
    }

    #[test]
    fn zero_rejected_in_sequential_space() {
        let spec = SpaceSpec::sequential(3, vec![Net, Zero]);
        let err = build_relaxed(&spec, &mut ChaCha8Rng::seed_from_u64(0), blur(), &OpConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn same_seed_same_model() {
        let spec = SpaceSpec::sequential(3, SpaceSpec::all_ops(&Layout::Sequential { depth: 3 }));
        let a = build_relaxed(&spec, &mut ChaCha8Rng::seed_from_u64(9), blur(), &OpConfig::default()).unwrap();
        let b = build_relaxed(&spec, &mut ChaCha8Rng::seed_from_u64(9), blur(), &OpConfig::default()).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.value(id), b.store.value(id));
        }
        let logits = a.alphas(0).unwrap();
        assert!(logits.iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn forced_learnable_grad_descends_layer_to_layer() {
        let op = blur();
        let cfg = OpConfig::default();
        let mut spec = SpaceSpec::sequential(10, SpaceSpec::good_ops());
        spec.global_residual = false;
        let mut net = build_relaxed(&spec, &mut ChaCha8Rng::seed_from_u64(2), op.clone(), &cfg).unwrap();
        for s in 0..10 {
            net.set_alphas(s, &[1000.0, -1000.0]).unwrap();
            let lg = net.sites()[s].candidates[0].net.unwrap();
            for id in lg.ids() {
                net.store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let b = batch(3, &op, 4);
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &b.measured, 0).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 1, 50]);
        // the data term of every layer output is non-increasing
        let mut prev = f64::INFINITY;
        let mut u = op.apply_adjoint(&b.measured).unwrap();
        let tau = 1.0 / (op.norm() * op.norm());
        for _ in 0..10 {
            let r = op.apply_forward(&u).unwrap();
            let diff: Vec<f64> = r.data().iter().zip(b.measured.data()).map(|(a, c)| a - c).collect();
            let d = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            assert!(d <= prev + 1e-12);
            prev = d;
            let g = op
                .apply_adjoint(&Tensor::new(r.shape().to_vec(), diff).unwrap())
                .unwrap();
            u = Tensor::new(
                u.shape().to_vec(),
                u.data().iter().zip(g.data()).map(|(a, c)| a - tau * c).collect(),
            )
            .unwrap();
        }
        for (a, c) in tape.value(out).data().iter().zip(u.data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_cells_return_back_projection() {
        let op = blur();
        let spec = SpaceSpec::cell(2, 5, vec![Zero]);
        let arch = DiscreteArch::uniform(&spec, Zero);
        let mut net = build_discrete(
            &spec,
            &arch,
            &mut ChaCha8Rng::seed_from_u64(1),
            op.clone(),
            &OpConfig::default(),
        )
        .unwrap();
        for m in net.mixers().to_vec() {
            net.store.value_mut(m.weight).data_mut().fill(0.0);
        }
        let b = batch(4, &op, 3);
        let out = net.predict(&b.measured, 0).unwrap();
        assert_eq!(out, op.apply_adjoint(&b.measured).unwrap());
    }

    #[test]
    fn logit_shift_leaves_output_and_argmax_unchanged() {
        let op = blur();
        for spec in [
            SpaceSpec::sequential(3, SpaceSpec::all_ops(&Layout::Sequential { depth: 3 })),
            SpaceSpec::cell(1, 3, SpaceSpec::all_ops(&Layout::Cell { cells: 1, states: 3 })),
        ] {
            let mut net = build_relaxed(
                &spec,
                &mut ChaCha8Rng::seed_from_u64(5),
                op.clone(),
                &OpConfig::default(),
            )
            .unwrap();
            let b = batch(6, &op, 2);
            let before = net.predict(&b.measured, 3).unwrap();
            let arch = net.discretize();
            let shifted: Vec<f64> = net.alphas(1).unwrap().iter().map(|v| v + 7.5).collect();
            net.set_alphas(1, &shifted).unwrap();
            let after = net.predict(&b.measured, 3).unwrap();
            for (x, y) in before.data().iter().zip(after.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(net.discretize(), arch);
        }
    }

    #[test]
    fn discretize_examples() {
        let spec = SpaceSpec::sequential(2, SpaceSpec::good_ops());
        let mut net = build_relaxed(&spec, &mut ChaCha8Rng::seed_from_u64(0), blur(), &OpConfig::default()).unwrap();
        net.set_alphas(0, &[0.1, 2.0]).unwrap();
        net.set_alphas(1, &[0.5, 0.5]).unwrap();
        assert_eq!(net.discretize().choices, vec![Net, LearnableGrad]);
    }

    #[test]
    fn saturated_supernet_matches_copied_discrete_network() {
        let op = blur();
        for spec in [
            SpaceSpec::sequential(4, SpaceSpec::all_ops(&Layout::Sequential { depth: 4 })),
            SpaceSpec::cell(2, 3, SpaceSpec::all_ops(&Layout::Cell { cells: 2, states: 3 })),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut net = build_relaxed(&spec, &mut rng, op.clone(), &OpConfig::default()).unwrap();
            let arch = random_arch(&spec, &mut rng);
            for (s, kind) in arch.choices.iter().enumerate() {
                let logits: Vec<f64> = spec
                    .opset
                    .iter()
                    .map(|k| if k == kind { 1000.0 } else { -1000.0 })
                    .collect();
                net.set_alphas(s, &logits).unwrap();
            }
            assert_eq!(net.discretize(), arch);
            let discrete = net.extract_discrete(&arch).unwrap();
            let b = batch(11, &op, 5);
            let x = net.predict(&b.measured, 99).unwrap();
            let y = discrete.predict(&b.measured, 99).unwrap();
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn discrete_builds_use_fresh_parameters() {
        let spec = SpaceSpec::sequential(3, SpaceSpec::good_ops());
        let arch = DiscreteArch::uniform(&spec, Net);
        let a = build_discrete(
            &spec,
            &arch,
            &mut ChaCha8Rng::seed_from_u64(1),
            blur(),
            &OpConfig::default(),
        )
        .unwrap();
        let b = build_discrete(
            &spec,
            &arch,
            &mut ChaCha8Rng::seed_from_u64(2),
            blur(),
            &OpConfig::default(),
        )
        .unwrap();
        let w = a.sites()[0].candidates[0].net.unwrap().conv1_w;
        assert_ne!(a.store.value(w), b.store.value(w));
        assert!(!a.is_relaxed());
        assert!(a.sites().iter().all(|s| s.candidates[0].kind == Net));
    }

    #[test]
    fn random_arch_marginals_are_uniform() {
        let spec = SpaceSpec::sequential(3, SpaceSpec::all_ops(&Layout::Sequential { depth: 3 }));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let a = random_arch(&spec, &mut rng);
            counts[spec.opset.iter().position(|k| *k == a.choices[1]).unwrap()] += 1;
        }
        let p = 0.25;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
        }
        let single = SpaceSpec::sequential(4, vec![Net]);
        assert_eq!(random_arch(&single, &mut rng), DiscreteArch::uniform(&single, Net));
        let a = random_arch(&spec, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, random_arch(&spec, &mut ChaCha8Rng::seed_from_u64(8)));
    }

    #[test]
    fn enumeration_counts_and_completeness() {
        let seq2 = SpaceSpec::sequential(2, SpaceSpec::all_ops(&Layout::Sequential { depth: 2 }));
        let all = enumerate_archs(&seq2).unwrap();
        assert_eq!(all.len(), 16);
        let unique: HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 16);
        assert_eq!(
            enumerate_archs(&SpaceSpec::sequential(1, SpaceSpec::good_ops()))
                .unwrap()
                .len(),
            2
        );
        for seed in 0..50 {
            assert!(all.contains(&random_arch(&seq2, &mut ChaCha8Rng::seed_from_u64(seed))));
        }
        let big = SpaceSpec::sequential(10, SpaceSpec::all_ops(&Layout::Sequential { depth: 10 }));
        assert!(matches!(enumerate_archs(&big), Err(Error::SpaceTooLarge { .. })));
    }

    #[test]
    fn canonical_strings() {
        let spec = SpaceSpec::sequential(3, SpaceSpec::all_ops(&Layout::Sequential { depth: 3 }));
        let arch = DiscreteArch {
            layout: spec.layout,
            choices: vec![LearnableGrad, Net, Roll],
        };
        assert_eq!(arch.to_string(), "seq3|LG,Net,Roll");
        assert!("seq3|LG,Net".parse::<DiscreteArch>().is_err());
        assert!("ring3|LG,Net,Net".parse::<DiscreteArch>().is_err());
        let cell: DiscreteArch = format!("cell1x2|{}", ["Zero"; 3].join(",")).parse().unwrap();
        assert_eq!(cell.layout, Layout::Cell { cells: 1, states: 2 });
    }

    #[test]
    fn three_site_models_pass_grad_check() {
        let op = blur();
        let cfg = OpConfig {
            noise_sigma: 0.1,
            ..OpConfig::default()
        };
        for spec in [
            SpaceSpec::sequential(3, SpaceSpec::all_ops(&Layout::Sequential { depth: 3 })),
            SpaceSpec::cell(1, 2, SpaceSpec::all_ops(&Layout::Cell { cells: 1, states: 2 })),
        ] {
            let mut net = build_relaxed(&spec, &mut ChaCha8Rng::seed_from_u64(41), op.clone(), &cfg).unwrap();
            let b = batch(42, &op, 2);
            let ids: Vec<ParamId> = net.store.ids().collect();
            let shadow = net.clone();
            let err = grad_check(
                |tape, store| {
                    let mut model = shadow.clone();
                    model.store = store.clone();
                    let out = model.forward(tape, &b.measured, 7)?;
                    let t = tape.constant(b.clean.clone());
                    tape.mse(out, t)
                },
                &mut net.store,
                &ids,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{}: {err}", spec.summary());
        }
    }

    proptest! {
        #[test]
        fn enumerated_strings_round_trip(depth in 1usize..4, cell in any::<bool>()) {
            let spec = if cell {
                SpaceSpec::cell(1, 2, vec![Net, Zero, Roll])
            } else {
                SpaceSpec::sequential(depth, SpaceSpec::all_ops(&Layout::Sequential { depth }))
            };
            for arch in enumerate_archs(&spec).unwrap() {
                let parsed: DiscreteArch = arch.to_string().parse().unwrap();
                prop_assert_eq!(&parsed, &arch);
                prop_assert!(parsed.validate_for(&spec).is_ok());
            }
        }
    }
}
