//! Superposed linear modules and the small networks built from them.
//!
//! A [`MolfModule`] evaluates `y = W x + b + sum_i (alpha_i / sqrt(r_i)) B_i A_i dropout(x)`
//! with no gating: every pathway sees every column of `x`. Sparsity lives
//! entirely in the optimizer, which treats the dense weight (plus bias) and
//! each LoRA pair as separately routable experts.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, NodeId, Rng};

pub const DEFAULT_ALPHA: f64 = 16.0;
pub const DEFAULT_A_STD: f64 = 1.0;

/// MoLF trains the base weight as expert 0; MoLF-E freezes it and routes
/// among LoRA experts only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Molf,
    MolfE,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Molf => "molf",
            Mode::MolfE => "molf-e",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "molf" => Ok(Mode::Molf),
            "molf-e" | "molfe" | "molf_e" => Ok(Mode::MolfE),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertClass {
    Fft,
    Lora,
}

impl fmt::Display for ExpertClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertClass::Fft => "fft",
            ExpertClass::Lora => "lora",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoraExpert {
    pub rank: usize,
    pub alpha: f64,
    /// `rank x d_in`
    pub a: Matrix,
    /// `d_out x rank`
    pub b: Matrix,
}

impl LoraExpert {
    /// Zero-initialized adapter. Call [`MolfModule::init_experts`] to draw `A`.
    pub fn new(rank: usize, alpha: f64, d_in: usize, d_out: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::contract(format!(
                "LoRA alpha must be positive, got {alpha}"
            )));
        }
        Ok(LoraExpert {
            rank,
            alpha,
            a: Matrix::zeros(rank, d_in),
            b: Matrix::zeros(d_out, rank),
        })
    }

    /// Rank-stabilized scale `alpha / sqrt(rank)`.
    pub fn scale(&self) -> f64 {
        self.alpha / (self.rank as f64).sqrt()
    }

    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Leaf ids of one module's parameters inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct ModuleLeaves {
    pub base: NodeId,
    pub bias: Option<NodeId>,
    pub experts: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug)]
pub struct MolfModule {
    pub name: String,
    /// `d_out x d_in`
    pub base: Matrix,
    /// `d_out x 1`
    pub bias: Option<Matrix>,
    pub experts: Vec<LoraExpert>,
    pub dropout_rate: f64,
    pub base_trainable: bool,
}

impl MolfModule {
    pub fn new(
        name: impl Into<String>,
        base: Matrix,
        bias: Option<Matrix>,
        experts: Vec<LoraExpert>,
        dropout_rate: f64,
        base_trainable: bool,
    ) -> Result<Self> {
        let module = MolfModule {
            name: name.into(),
            base,
            bias,
            experts,
            dropout_rate,
            base_trainable,
        };
        module.validate()?;
        Ok(module)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_out, d_in) = self.base.shape();
        let ctx = |m: String| Error::contract(format!("module {}: {m}", self.name));
        if let Some(bias) = &self.bias {
            if bias.shape() != (d_out, 1) {
                return Err(ctx(format!(
                    "bias shape {:?}, expected ({d_out}, 1)",
                    bias.shape()
                )));
            }
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.a.shape() != (e.rank, d_in) || e.b.shape() != (d_out, e.rank) {
                return Err(ctx(format!(
                    "expert {i} has A {:?}, B {:?} for rank {} on a {d_out}x{d_in} base",
                    e.a.shape(),
                    e.b.shape(),
                    e.rank
                )));
            }
        }
        if !self.base_trainable && self.experts.is_empty() {
            return Err(ctx("a frozen base needs at least one LoRA expert".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ctx(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    /// Number of experts the optimizer routes between.
    pub fn routable_count(&self) -> usize {
        self.experts.len() + usize::from(self.base_trainable)
    }

    /// Maps a routable index to a position in `experts`, or `None` for the
    /// FFT pathway.
    pub fn lora_index(&self, routable: usize) -> Option<usize> {
        if self.base_trainable {
            routable.checked_sub(1)
        } else {
            Some(routable)
        }
    }

    pub fn expert_class(&self, routable: usize) -> ExpertClass {
        match self.lora_index(routable) {
            None => ExpertClass::Fft,
            Some(_) => ExpertClass::Lora,
        }
    }

    /// Parameters of a routable expert: `[W, bias?]` for FFT, `[A, B]` for LoRA.
    pub fn expert_params(&self, routable: usize) -> Vec<&Matrix> {
        match self.lora_index(routable) {
            None => std::iter::once(&self.base)
                .chain(self.bias.as_ref())
                .collect(),
            Some(i) => vec![&self.experts[i].a, &self.experts[i].b],
        }
    }

    pub fn expert_params_mut(&mut self, routable: usize) -> Vec<&mut Matrix> {
        match self.lora_index(routable) {
            None => std::iter::once(&mut self.base)
                .chain(self.bias.as_mut())
                .collect(),
            Some(i) => {
                let e = &mut self.experts[i];
                vec![&mut e.a, &mut e.b]
            }
        }
    }

    pub fn expert_n_params(&self, routable: usize) -> usize {
        self.expert_params(routable).iter().map(|m| m.len()).sum()
    }

    /// Total stored scalars (base, bias and every adapter).
    pub fn param_count(&self) -> usize {
        self.base.len()
            + self.bias.as_ref().map_or(0, Matrix::len)
            + self.experts.iter().map(LoraExpert::n_params).sum::<usize>()
    }

    /// Draws `A_i ~ N(0, a_std^2 / d_in)` and zeroes `B_i`. Base and bias are
    /// untouched.
    pub fn init_experts(&mut self, rng: &mut Rng, a_std: f64) {
        let d_in = self.d_in();
        let std = a_std / (d_in as f64).sqrt();
        for e in &mut self.experts {
            e.a = rng.gaussian_matrix(e.rank, d_in, std);
            e.b = Matrix::zeros(e.b.rows(), e.b.cols());
        }
    }

    /// Records this module's forward pass on `g`. The dropout mask (one per
    /// module per call, shared by all adapters) is drawn only when
    /// `training` is set and the rate is positive.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, ModuleLeaves)> {
        let ctx = |e: Error| e.context(&self.name);
        let base = g.leaf(self.base.clone());
        let mut y = g.matmul(base, x).map_err(ctx)?;
        let bias = match &self.bias {
            Some(b) => {
                let id = g.leaf(b.clone());
                y = g.add_bias(y, id).map_err(ctx)?;
                Some(id)
            }
            None => None,
        };
        let lora_input = if training && self.dropout_rate > 0.0 && !self.experts.is_empty() {
            g.dropout(x, self.dropout_rate, rng).map_err(ctx)?
        } else {
            x
        };
        let mut experts = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            let a = g.leaf(e.a.clone());
            let b = g.leaf(e.b.clone());
            let ax = g.matmul(a, lora_input).map_err(ctx)?;
            let bax = g.matmul(b, ax).map_err(ctx)?;
            let scaled = g.scale(bax, e.scale())?;
            y = g.add(y, scaled)?;
            experts.push((a, b));
        }
        Ok((
            y,
            ModuleLeaves {
                base,
                bias,
                experts,
            },
        ))
    }

    /// Superposed forward pass for a `d_in x batch` input.
    pub fn forward(&self, x: &Matrix, training: bool, rng: &mut Rng) -> Result<Matrix> {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let (y, _) = self.forward_graph(&mut g, xid, training, rng)?;
        Ok(g.value(y).clone())
    }
}

/// Rank and scale of one LoRA expert.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl ExpertSpec {
    pub fn new(rank: usize) -> Self {
        ExpertSpec {
            rank,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertLayout {
    /// Same experts on every layer.
    Uniform(Vec<ExpertSpec>),
    PerLayer(Vec<Vec<ExpertSpec>>),
}

impl ExpertLayout {
    fn for_layer(&self, layer: usize) -> Result<&[ExpertSpec]> {
        match self {
            ExpertLayout::Uniform(specs) => Ok(specs),
            ExpertLayout::PerLayer(layers) => layers
                .get(layer)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::contract(format!("no expert config for layer {layer}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub dims: Vec<usize>,
    pub experts: ExpertLayout,
    pub mode: Mode,
    pub dropout_rate: f64,
    pub a_std: f64,
    pub bias: bool,
}

impl NetworkSpec {
    pub fn new(dims: Vec<usize>, experts: ExpertLayout, mode: Mode) -> Self {
        NetworkSpec {
            dims,
            experts,
            mode,
            dropout_rate: 0.0,
            a_std: DEFAULT_A_STD,
            bias: true,
        }
    }
}

/// Regression targets use `1/2` squared error summed over outputs and
/// averaged over the batch; classification uses mean softmax cross-entropy.
#[derive(Clone, Debug)]
pub enum Target {
    Regression(Matrix),
    Classes(Vec<usize>),
}

/// Per-module, per-routable-expert, per-parameter gradients.
pub type NetworkGrads = Vec<Vec<Vec<Matrix>>>;

/// A stack of [`MolfModule`]s with ReLU between consecutive layers.
#[derive(Clone, Debug)]
pub struct Network {
    pub modules: Vec<MolfModule>,
    pub mode: Mode,
}

impl Network {
    pub fn single(module: MolfModule) -> Self {
        let mode = if module.base_trainable {
            Mode::Molf
        } else {
            Mode::MolfE
        };
        Network {
            modules: vec![module],
            mode,
        }
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(MolfModule::param_count).sum()
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: &Matrix,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, Vec<ModuleLeaves>)> {
        let mut h = g.leaf(x.clone());
        let mut leaves = Vec::with_capacity(self.modules.len());
        let last = self.modules.len().saturating_sub(1);
        for (i, module) in self.modules.iter().enumerate() {
            let (y, l) = module.forward_graph(g, h, training, rng)?;
            leaves.push(l);
            h = if i < last { g.relu(y)? } else { y };
        }
        Ok((h, leaves))
    }

    pub fn forward(&self, x: &Matrix, training: bool, rng: &mut Rng) -> Result<Matrix> {
        let mut g = Graph::new();
        let (y, _) = self.forward_graph(&mut g, x, training, rng)?;
        Ok(g.value(y).clone())
    }

    fn loss_node(g: &mut Graph, output: NodeId, target: &Target) -> Result<NodeId> {
        match target {
            Target::Regression(y) => {
                let d_out = y.rows() as f64;
                let t = g.leaf(y.clone());
                let mse = g.mse(output, t)?;
                g.scale(mse, 0.5 * d_out)
            }
            Target::Classes(labels) => g.softmax_cross_entropy(output, labels),
        }
    }

    pub fn loss(&self, x: &Matrix, target: &Target, training: bool, rng: &mut Rng) -> Result<f64> {
        let mut g = Graph::new();
        let (out, _) = self.forward_graph(&mut g, x, training, rng)?;
        let loss = Self::loss_node(&mut g, out, target)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// One full-batch forward/backward. Every routable expert of every
    /// module receives its gradient; frozen parameters are not reported.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        target: &Target,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(f64, NetworkGrads)> {
        let mut g = Graph::new();
        let (out, leaves) = self.forward_graph(&mut g, x, training, rng)?;
        let loss = Self::loss_node(&mut g, out, target)?;

        let mut requested = Vec::new();
        for l in &leaves {
            requested.push(l.base);
            requested.extend(l.bias);
            for &(a, b) in &l.experts {
                requested.push(a);
                requested.push(b);
            }
        }
        let mut grads = g.backward(loss, &requested)?;
        let mut take = |id: NodeId| grads.remove(&id).expect("requested leaf");

        let mut out_grads = Vec::with_capacity(self.modules.len());
        for (module, l) in self.modules.iter().zip(&leaves) {
            let mut per_expert = Vec::with_capacity(module.routable_count());
            let fft: Vec<Matrix> = std::iter::once(l.base)
                .chain(l.bias)
                .map(&mut take)
                .collect();
            if module.base_trainable {
                per_expert.push(fft);
            }
            for &(a, b) in &l.experts {
                per_expert.push(vec![take(a), take(b)]);
            }
            out_grads.push(per_expert);
        }
        Ok((g.value(loss).get(0, 0), out_grads))
    }
}

/// Builds an MLP whose every linear layer is an independent [`MolfModule`].
/// Base weights are drawn `N(0, 1/d_in)`, biases start at zero, and adapters
/// are initialized with [`MolfModule::init_experts`].
pub fn build_mlp(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network> {
    if spec.dims.len() < 2 {
        return Err(Error::contract(format!(
            "an MLP needs at least two layer dims, got {:?}",
            spec.dims
        )));
    }
    if spec.dims.contains(&0) {
        return Err(Error::contract("layer dims must be positive"));
    }
    let base_trainable = spec.mode == Mode::Molf;
    let mut modules = Vec::with_capacity(spec.dims.len() - 1);
    for (layer, pair) in spec.dims.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let name = format!("layer{layer}");
        let mut experts = Vec::new();
        for es in spec.experts.for_layer(layer)? {
            if es.rank > d_in.min(d_out) {
                log::warn!(
                    "{name}: rank {} exceeds min({d_out}, {d_in}); capacity is redundant",
                    es.rank
                );
            }
            experts.push(LoraExpert::new(es.rank, es.alpha, d_in, d_out)?);
        }
        let base = rng.gaussian_matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt());
        let bias = spec.bias.then(|| Matrix::zeros(d_out, 1));
        let mut module =
            MolfModule::new(name, base, bias, experts, spec.dropout_rate, base_trainable)?;
        module.init_experts(rng, spec.a_std);
        modules.push(module);
    }
    Ok(Network {
        modules,
        mode: spec.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_expert_module() -> MolfModule {
        let mut e = LoraExpert::new(1, 1.0, 2, 2).unwrap();
        e.a = Matrix::from_rows(&[[1.0, 1.0]]);
        e.b = Matrix::from_rows(&[[2.0], [0.0]]);
        MolfModule::new("m", Matrix::zeros(2, 2), None, vec![e], 0.0, true).unwrap()
    }

    #[test]
    fn hand_evaluated_superposition() {
        let m = one_expert_module();
        let y = m
            .forward(&Matrix::column(&[1.0, 1.0]), false, &mut Rng::new(0))
            .unwrap();
        assert_eq!(y, Matrix::column(&[4.0, 0.0]));
    }

    #[test]
    fn zero_adapters_give_base_output() {
        let mut rng = Rng::new(5);
        let base = rng.gaussian_matrix(3, 4, 1.0);
        let bias = rng.gaussian_matrix(3, 1, 1.0);
        let experts = vec![LoraExpert::new(2, 16.0, 4, 3).unwrap()];
        let mut m =
            MolfModule::new("m", base.clone(), Some(bias.clone()), experts, 0.0, true).unwrap();
        m.init_experts(&mut rng, 1.0);
        let x = rng.gaussian_matrix(4, 5, 1.0);
        let y = m.forward(&x, false, &mut rng).unwrap();
        let expected = base.matmul(&x).unwrap().add_column(&bias).unwrap();
        assert!(y.bitwise_eq(&expected));
    }

    #[test]
    fn output_shape_independent_of_ranks() {
        let mut rng = Rng::new(1);
        let experts = vec![
            LoraExpert::new(64, 16.0, 10, 6).unwrap(),
            LoraExpert::new(128, 16.0, 10, 6).unwrap(),
        ];
        let mut m = MolfModule::new("m", Matrix::zeros(6, 10), None, experts, 0.0, false).unwrap();
        m.init_experts(&mut rng, 1.0);
        let y = m
            .forward(&rng.gaussian_matrix(10, 7, 1.0), false, &mut rng)
            .unwrap();
        assert_eq!(y.shape(), (6, 7));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let make = || {
            let experts = vec![LoraExpert::new(3, 16.0, 8, 4).unwrap()];
            let mut m =
                MolfModule::new("m", Matrix::zeros(4, 8), None, experts, 0.0, true).unwrap();
            m.init_experts(&mut Rng::new(99), 1.0);
            m
        };
        assert!(make().experts[0].a.bitwise_eq(&make().experts[0].a));
    }

    #[test]
    fn init_variance_is_one_over_d_in() {
        let d_in = 50;
        let experts = vec![LoraExpert::new(200, 16.0, d_in, 4).unwrap()];
        let mut m = MolfModule::new("m", Matrix::zeros(4, d_in), None, experts, 0.0, true).unwrap();
        m.init_experts(&mut Rng::new(2024), DEFAULT_A_STD);
        let a = &m.experts[0].a;
        assert_eq!(a.len(), 10_000);
        let mean = a.sum() / a.len() as f64;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        let target = 1.0 / d_in as f64;
        assert!(
            (var - target).abs() / target < 0.10,
            "var {var}, target {target}"
        );
        assert!(m.experts[0].b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_base_requires_an_expert() {
        assert!(MolfModule::new("m", Matrix::zeros(2, 2), None, vec![], 0.0, false).is_err());
    }

    #[test]
    fn mismatched_expert_shapes_are_rejected() {
        let mut e = LoraExpert::new(2, 16.0, 3, 3).unwrap();
        e.a = Matrix::zeros(2, 4);
        assert!(MolfModule::new("m", Matrix::zeros(3, 3), None, vec![e], 0.0, true).is_err());
    }

    #[test]
    fn build_single_layer_molf() {
        let spec = NetworkSpec::new(
            vec![8, 8],
            ExpertLayout::Uniform(vec![ExpertSpec::new(4)]),
            Mode::Molf,
        );
        let net = build_mlp(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.modules.len(), 1);
        assert_eq!(net.modules[0].routable_count(), 2);
        assert_eq!(net.modules[0].expert_class(0), ExpertClass::Fft);
        assert_eq!(net.modules[0].expert_class(1), ExpertClass::Lora);
    }

    #[test]
    fn build_molf_e_freezes_every_base() {
        let spec = NetworkSpec::new(
            vec![16, 32, 16, 8],
            ExpertLayout::Uniform(vec![ExpertSpec::new(64)]),
            Mode::MolfE,
        );
        let net = build_mlp(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.modules.len(), 3);
        for m in &net.modules {
            assert!(!m.base_trainable);
            assert_eq!(m.routable_count(), 1);
            assert_eq!(m.expert_class(0), ExpertClass::Lora);
            assert_eq!(m.experts[0].rank, 64);
        }
        let x = Matrix::filled(16, 3, 0.5);
        let (_, grads) = net
            .loss_and_grads(&x, &Target::Classes(vec![0, 1, 2]), false, &mut Rng::new(1))
            .unwrap();
        for (m, g) in net.modules.iter().zip(&grads) {
            assert_eq!(g.len(), m.routable_count());
        }
    }

    #[test]
    fn build_rejects_short_dims() {
        let spec = NetworkSpec::new(vec![], ExpertLayout::Uniform(vec![]), Mode::Molf);
        assert!(build_mlp(&spec, &mut Rng::new(0)).is_err());
        let spec = NetworkSpec::new(vec![4], ExpertLayout::Uniform(vec![]), Mode::Molf);
        assert!(build_mlp(&spec, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn oversized_rank_is_accepted() {
        let spec = NetworkSpec::new(
            vec![4, 3],
            ExpertLayout::Uniform(vec![ExpertSpec::new(16)]),
            Mode::Molf,
        );
        let net = build_mlp(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.modules[0].experts[0].rank, 16);
    }

    #[test]
    fn ungated_every_adapter_affects_output() {
        let spec = NetworkSpec::new(
            vec![5, 4],
            ExpertLayout::Uniform(vec![ExpertSpec::new(2), ExpertSpec::new(3)]),
            Mode::Molf,
        );
        let net = build_mlp(&spec, &mut Rng::new(3)).unwrap();
        let x = Rng::new(4).gaussian_matrix(5, 2, 1.0);
        let before = net.forward(&x, false, &mut Rng::new(0)).unwrap();
        for i in 0..2 {
            let mut perturbed = net.clone();
            perturbed.modules[0].experts[i].b.set(0, 0, 0.1);
            let after = perturbed.forward(&x, false, &mut Rng::new(0)).unwrap();
            assert!(!after.bitwise_eq(&before), "expert {i} is dead");
        }
    }
}
