//! Graph-network simulator: an edge encoder, a node encoder and a flux
//! decoder, combined with the explicit temperature update
//! `T_i <- T_i + dt / (V rho c_p) * sum_j F_ij + dt P_i / (V rho c_p)`.
//!
//! Both pairwise networks receive `[receiver, sender]` and every sum runs over
//! the incoming edges of a node.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, ThermalGraph, ATTR_NORMALIZATION_VERSION, N_ATTR};
use crate::io::{put_f64s, read_file, write_atomic, Reader};
use crate::nn::{Activation, InputGrad, Matrix, Mlp, MlpParams, MlpSpec, OutputTransform, Tape, TapeInput};
use crate::system::{ThermalState, VoxelSystem};
use crate::trajectory::Trajectory;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TGNSCKP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnsSpec {
    /// Width of latent vectors and of every hidden layer.
    pub latent_dim: usize,
    pub n_hidden: usize,
    pub layer_norm: bool,
    /// Watts per unit of decoder output.
    pub flux_scale: f64,
    /// Multiplier on the decoder output layer's initial weight std.
    pub flux_output_init: f64,
    /// Time step the model advances by, s.
    pub dt: f64,
}

impl Default for GnsSpec {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            n_hidden: 2,
            layer_norm: true,
            flux_scale: 1e-4,
            flux_output_init: 0.0,
            dt: crate::system::DEFAULT_DT,
        }
    }
}

impl GnsSpec {
    pub fn edge_spec(&self) -> MlpSpec {
        MlpSpec {
            in_dim: 2 * N_ATTR,
            hidden_dim: self.latent_dim,
            n_hidden: self.n_hidden,
            out_dim: self.latent_dim,
            activation: Activation::Selu,
            layer_norm: self.layer_norm,
            output_transform: OutputTransform::Identity,
        }
    }

    pub fn node_spec(&self) -> MlpSpec {
        MlpSpec {
            in_dim: N_ATTR + self.latent_dim,
            ..self.edge_spec()
        }
    }

    pub fn flux_spec(&self) -> MlpSpec {
        MlpSpec {
            in_dim: 2 * self.latent_dim,
            hidden_dim: self.latent_dim,
            n_hidden: self.n_hidden,
            out_dim: 1,
            activation: Activation::Relu,
            layer_norm: self.layer_norm,
            output_transform: OutputTransform::Sinh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Shape("latent width must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Contract(format!("model dt must be positive, got {}", self.dt)));
        }
        if !(self.flux_scale > 0.0 && self.flux_scale.is_finite()) {
            return Err(Error::Contract(format!(
                "flux scale must be positive, got {}",
                self.flux_scale
            )));
        }
        if !(self.flux_output_init >= 0.0 && self.flux_output_init.is_finite()) {
            return Err(Error::Contract(format!(
                "flux output init must be >= 0, got {}",
                self.flux_output_init
            )));
        }
        Ok(())
    }
}

/// A batch of one or more graphs stored as a single disjoint union.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    /// Normalized node attributes, `n_nodes x 5`.
    pub attrs: Matrix,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// Interior slot of each node; `None` for auxiliary nodes.
    pub slot: Vec<Option<usize>>,
    /// Per interior slot.
    pub temps: Vec<f64>,
    pub c_flux: Vec<f64>,
    pub c_src: Vec<f64>,
    /// Interior slot ranges of the member graphs, `n_graphs + 1` entries.
    pub graph_slots: Vec<usize>,
}

impl GraphBatch {
    pub fn from_graph(graph: &ThermalGraph) -> Result<Self> {
        Self::from_graphs(&[graph])
    }

    pub fn from_graphs(graphs: &[&ThermalGraph]) -> Result<Self> {
        let n_nodes: usize = graphs.iter().map(|g| g.n_nodes()).sum();
        let n_edges: usize = graphs.iter().map(|g| g.n_edges()).sum();
        let mut attrs = Vec::with_capacity(n_nodes * N_ATTR);
        let mut senders = Vec::with_capacity(n_edges);
        let mut receivers = Vec::with_capacity(n_edges);
        let mut slot = Vec::with_capacity(n_nodes);
        let mut temps = Vec::new();
        let mut c_flux = Vec::new();
        let mut c_src = Vec::new();
        let mut graph_slots = vec![0];
        for g in graphs {
            let node_off = slot.len();
            let slot_off = temps.len();
            attrs.extend(g.attr_matrix());
            slot.extend((0..g.n_nodes()).map(|i| (i < g.n_interior).then_some(slot_off + i)));
            for &(s, r) in &g.edges {
                if r >= g.n_interior || s >= g.n_nodes() {
                    return Err(Error::Structure(format!(
                        "edge ({s}, {r}) does not end at an interior node"
                    )));
                }
                senders.push(node_off + s);
                receivers.push(node_off + r);
            }
            temps.extend_from_slice(&g.temps);
            c_flux.extend_from_slice(&g.c_flux);
            c_src.extend_from_slice(&g.c_src);
            graph_slots.push(temps.len());
        }
        Ok(Self {
            attrs: Matrix::from_vec(n_nodes, N_ATTR, attrs),
            senders,
            receivers,
            slot,
            temps,
            c_flux,
            c_src,
            graph_slots,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.attrs.rows
    }

    pub fn n_edges(&self) -> usize {
        self.receivers.len()
    }

    pub fn n_graphs(&self) -> usize {
        self.graph_slots.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    /// `n_edges x latent`.
    pub latent_edges: Matrix,
    /// Sum of incoming latent edges per node, `n_nodes x latent`.
    pub aggregated: Matrix,
    /// `n_nodes x latent`.
    pub latent_nodes: Matrix,
}

#[derive(Debug, Clone)]
pub struct EncodeTape {
    edge: Tape,
    node: Tape,
}

/// Gradients with the same layout as the model's three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GnsGradients {
    pub edge_embed: MlpParams,
    pub node_embed: MlpParams,
    pub flux_mlp: MlpParams,
}

impl GnsGradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.edge_embed.tensors();
        t.extend(self.node_embed.tensors());
        t.extend(self.flux_mlp.tensors());
        t
    }

    pub fn add_assign(&mut self, other: &GnsGradients) {
        self.edge_embed.add_assign(&other.edge_embed);
        self.node_embed.add_assign(&other.node_embed);
        self.flux_mlp.add_assign(&other.flux_mlp);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnsParams {
    pub spec: GnsSpec,
    pub edge_embed: Mlp,
    pub node_embed: Mlp,
    pub flux_mlp: Mlp,
}

/// Training provenance stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
    pub tool_version: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    checkpoint_version: u32,
    attr_normalization_version: u32,
    spec: GnsSpec,
    networks: [MlpSpec; 3],
    n_params: usize,
    provenance: Option<Provenance>,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ k
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Per-interior temperature change `c_flux * sum_in F + c_src`.
pub fn temperature_increments(batch: &GraphBatch, fluxes: &[f64]) -> Result<Vec<f64>> {
    if fluxes.len() != batch.n_edges() {
        return Err(Error::Shape(format!(
            "{} fluxes for {} edges",
            fluxes.len(),
            batch.n_edges()
        )));
    }
    let mut sum = vec![0.0; batch.temps.len()];
    for (&r, &f) in batch.receivers.iter().zip(fluxes) {
        let s = batch.slot[r].ok_or_else(|| Error::Structure(format!("edge into auxiliary node {r}")))?;
        sum[s] += f;
    }
    let inc: Vec<f64> = (0..sum.len())
        .map(|i| batch.c_flux[i] * sum[i] + batch.c_src[i])
        .collect();
    if let Some(i) = inc.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numerical(format!("non-finite temperature at interior node {i}")));
    }
    Ok(inc)
}

/// New interior temperatures from per-edge fluxes.
pub fn update_temperatures(batch: &GraphBatch, fluxes: &[f64]) -> Result<Vec<f64>> {
    let inc = temperature_increments(batch, fluxes)?;
    Ok(batch.temps.iter().zip(&inc).map(|(t, d)| t + d).collect())
}

/// Mean over member graphs of the relative L1 error of `temps + inc`
/// against `targets`. The difference is formed as `(temps - target) + inc`
/// so small increments keep their precision. Returns the loss and, per
/// slot, the derivative with respect to the increment.
fn batch_loss(batch: &GraphBatch, inc: &[f64], targets: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if targets.len() != batch.temps.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} interior nodes",
            targets.len(),
            batch.temps.len()
        )));
    }
    let n_graphs = batch.n_graphs().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; inc.len()] } else { Vec::new() };
    for g in 0..batch.n_graphs() {
        let (a, b) = (batch.graph_slots[g], batch.graph_slots[g + 1]);
        if a == b {
            continue;
        }
        let n = (b - a) as f64;
        let mut lg = 0.0;
        for i in a..b {
            let diff = (batch.temps[i] - targets[i]) + inc[i];
            lg += diff.abs() / targets[i];
            if want_grad {
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[i] = sign / (targets[i] * n * n_graphs);
            }
        }
        loss += lg / n;
    }
    Ok((loss / n_graphs, grad))
}

impl GnsParams {
    pub fn init(spec: GnsSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut flux_mlp = Mlp::init(spec.flux_spec(), sub_seed(seed, 2))?;
        let out = flux_mlp.params.layers.last_mut().expect("output layer");
        out.weight.data.iter_mut().for_each(|w| *w *= spec.flux_output_init);
        Ok(Self {
            spec,
            edge_embed: Mlp::init(spec.edge_spec(), sub_seed(seed, 0))?,
            node_embed: Mlp::init(spec.node_spec(), sub_seed(seed, 1))?,
            flux_mlp,
        })
    }

    pub fn zeros(spec: GnsSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            edge_embed: Mlp::new(spec.edge_spec(), MlpParams::zeros(&spec.edge_spec()))?,
            node_embed: Mlp::new(spec.node_spec(), MlpParams::zeros(&spec.node_spec()))?,
            flux_mlp: Mlp::new(spec.flux_spec(), MlpParams::zeros(&spec.flux_spec()))?,
        })
    }

    /// Randomly initialized encoders with an all-zero decoder.
    pub fn zero_flux(spec: GnsSpec, seed: u64) -> Result<Self> {
        let mut p = Self::init(spec, seed)?;
        p.flux_mlp.params = MlpParams::zeros(&spec.flux_spec());
        Ok(p)
    }

    pub fn zero_gradients(&self) -> GnsGradients {
        GnsGradients {
            edge_embed: MlpParams::zeros(&self.spec.edge_spec()),
            node_embed: MlpParams::zeros(&self.spec.node_spec()),
            flux_mlp: MlpParams::zeros(&self.spec.flux_spec()),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.edge_embed.params.tensors();
        t.extend(self.node_embed.params.tensors());
        t.extend(self.flux_mlp.params.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.edge_embed.params.tensors_mut();
        t.extend(self.node_embed.params.tensors_mut());
        t.extend(self.flux_mlp.params.tensors_mut());
        t
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.edge_embed.params.is_finite() && self.node_embed.params.is_finite() && self.flux_mlp.params.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expected = [self.spec.edge_spec(), self.spec.node_spec(), self.spec.flux_spec()];
        let actual = [self.edge_embed.spec, self.node_embed.spec, self.flux_mlp.spec];
        if expected != actual {
            return Err(Error::Shape("network specs disagree on the latent width".into()));
        }
        if !self.is_finite() {
            return Err(Error::Numerical("model parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn encode(&self, batch: &GraphBatch) -> Result<(LatentGraph, EncodeTape)> {
        let (latent_edges, edge_tape) = self.edge_embed.forward(TapeInput::Paired {
            nodes: batch.attrs.clone(),
            recv: batch.receivers.clone(),
            send: batch.senders.clone(),
        })?;
        let h = self.spec.latent_dim;
        let mut aggregated = Matrix::zeros(batch.n_nodes(), h);
        for (e, &r) in batch.receivers.iter().enumerate() {
            let src = latent_edges.row(e);
            for (o, x) in aggregated.row_mut(r).iter_mut().zip(src) {
                *o += x;
            }
        }
        let (latent_nodes, node_tape) = self
            .node_embed
            .forward(TapeInput::Dense(batch.attrs.hcat(&aggregated)))?;
        Ok((
            LatentGraph {
                latent_edges,
                aggregated,
                latent_nodes,
            },
            EncodeTape {
                edge: edge_tape,
                node: node_tape,
            },
        ))
    }

    /// Per-edge heat flow into the receiver, W.
    pub fn decode(&self, latent: &LatentGraph, batch: &GraphBatch) -> Result<(Vec<f64>, Tape)> {
        let (raw, tape) = self.flux_mlp.forward_unchecked(TapeInput::Paired {
            nodes: latent.latent_nodes.clone(),
            recv: batch.receivers.clone(),
            send: batch.senders.clone(),
        })?;
        let fluxes: Vec<f64> = raw.data.iter().map(|f| f * self.spec.flux_scale).collect();
        if let Some(e) = fluxes.iter().position(|f| !f.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite flux on edge {e} ({} -> {})",
                batch.senders[e], batch.receivers[e]
            )));
        }
        Ok((fluxes, tape))
    }

    pub fn fluxes(&self, batch: &GraphBatch) -> Result<Vec<f64>> {
        let (latent, _) = self.encode(batch)?;
        Ok(self.decode(&latent, batch)?.0)
    }

    /// Predicted interior temperatures for every graph in the batch.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Vec<f64>> {
        update_temperatures(batch, &self.fluxes(batch)?)
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        if (dt - self.spec.dt).abs() > 1e-12 * self.spec.dt {
            return Err(Error::Contract(format!(
                "model was trained for dt = {} s, asked for {dt} s",
                self.spec.dt
            )));
        }
        Ok(())
    }

    pub fn step_graph(&self, graph: &ThermalGraph) -> Result<Vec<f64>> {
        self.predict(&GraphBatch::from_graph(graph)?)
    }

    pub fn gns_step(&self, system: &VoxelSystem, state: &ThermalState, dt: f64) -> Result<ThermalState> {
        self.check_dt(dt)?;
        let graph = build_graph(system, state, dt)?;
        Ok(ThermalState {
            t: state.t + dt,
            temps: self.step_graph(&graph)?,
        })
    }

    /// Recursive prediction; returns `n_steps + 1` states starting with
    /// `initial`.
    pub fn rollout(&self, system: &VoxelSystem, initial: &ThermalState, n_steps: usize, dt: f64) -> Result<Trajectory> {
        self.check_dt(dt)?;
        if n_steps == 0 {
            return Err(Error::Contract("rollout needs at least one step".into()));
        }
        let mut graph = build_graph(system, initial, dt)?;
        let start = initial.step_index(dt);
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(initial.clone());
        for k in 0..n_steps {
            if k > 0 {
                graph.refresh_sources_mut(system, start + k)?;
            }
            let temps = self.step_graph(&graph).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("rollout step {}: {m}", k + 1)),
                other => other,
            })?;
            let state = ThermalState {
                t: initial.t + (k + 1) as f64 * dt,
                temps,
            };
            graph.refresh_temperatures_mut(&state)?;
            states.push(state);
        }
        Ok(Trajectory {
            system_ref: system.name.clone(),
            dt,
            states,
        })
    }

    /// Mean over graphs of the per-graph relative L1 between the one-step
    /// prediction and `targets`, and its gradient.
    pub fn loss_and_gradient(&self, batch: &GraphBatch, targets: &[f64]) -> Result<(f64, GnsGradients)> {
        let (latent, enc) = self.encode(batch)?;
        let (fluxes, flux_tape) = self.decode(&latent, batch)?;
        let inc = temperature_increments(batch, &fluxes)?;
        let (loss, d_pred) = batch_loss(batch, &inc, targets, true)?;

        let mut grads = self.zero_gradients();
        let d_flux = Matrix::from_vec(
            batch.n_edges(),
            1,
            batch
                .receivers
                .iter()
                .map(|&r| {
                    let s = batch.slot[r].expect("receivers are interior");
                    d_pred[s] * batch.c_flux[s] * self.spec.flux_scale
                })
                .collect(),
        );
        let d_latent_nodes = self
            .flux_mlp
            .backward(&flux_tape, &d_flux, &mut grads.flux_mlp, true)?
            .map(InputGrad::into_matrix)
            .expect("input gradient requested");
        let d_node_in = self
            .node_embed
            .backward(&enc.node, &d_latent_nodes, &mut grads.node_embed, true)?
            .map(InputGrad::into_matrix)
            .expect("input gradient requested");
        let h = self.spec.latent_dim;
        let mut d_edges = Matrix::zeros(batch.n_edges(), h);
        for (e, &r) in batch.receivers.iter().enumerate() {
            d_edges.row_mut(e).copy_from_slice(&d_node_in.row(r)[N_ATTR..]);
        }
        self.edge_embed
            .backward(&enc.edge, &d_edges, &mut grads.edge_embed, false)?;
        Ok((loss, grads))
    }

    /// Loss without the backward pass.
    pub fn loss(&self, batch: &GraphBatch, targets: &[f64]) -> Result<f64> {
        let inc = temperature_increments(batch, &self.fluxes(batch)?)?;
        Ok(batch_loss(batch, &inc, targets, false)?.0)
    }

    fn networks(&self) -> [&Mlp; 3] {
        [&self.edge_embed, &self.node_embed, &self.flux_mlp]
    }

    /// Binary checkpoint (little-endian):
    /// magic, version u32, attribute version u32, latent u64, hidden layers
    /// u64, layer norm u8, dt f64, flux scale f64, flux output init f64, then
    /// per network a 7 x u64 descriptor, a u64 parameter count and the
    /// parameter blocks in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.n_params());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&ATTR_NORMALIZATION_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.spec.latent_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.spec.n_hidden as u64).to_le_bytes());
        out.push(self.spec.layer_norm as u8);
        out.extend_from_slice(&self.spec.dt.to_le_bytes());
        out.extend_from_slice(&self.spec.flux_scale.to_le_bytes());
        out.extend_from_slice(&self.spec.flux_output_init.to_le_bytes());
        for net in self.networks() {
            for d in net.spec.to_descriptor() {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(net.params.n_params() as u64).to_le_bytes());
            for t in net.params.tensors() {
                put_f64s(&mut out, t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.bytes::<8>()? != CHECKPOINT_MAGIC {
            return Err(r.err("not a model checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "{}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let attr_version = r.u32()?;
        if attr_version != ATTR_NORMALIZATION_VERSION {
            return Err(Error::Version(format!(
                "{}: attribute normalization version {attr_version}, this build uses {ATTR_NORMALIZATION_VERSION}",
                path.display()
            )));
        }
        let latent_dim = r.u64()? as usize;
        let n_hidden = r.u64()? as usize;
        let layer_norm = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.err(&format!("invalid layer norm flag {b}"))),
        };
        let spec = GnsSpec {
            latent_dim,
            n_hidden,
            layer_norm,
            dt: r.f64()?,
            flux_scale: r.f64()?,
            flux_output_init: r.f64()?,
        };
        spec.validate()?;
        let mut model = Self::zeros(spec)?;
        for (k, expected) in [spec.edge_spec(), spec.node_spec(), spec.flux_spec()]
            .into_iter()
            .enumerate()
        {
            let mut d = [0u64; 7];
            for x in &mut d {
                *x = r.u64()?;
            }
            if MlpSpec::from_descriptor(d) != Some(expected) {
                return Err(Error::Version(format!(
                    "{}: network {k} layout does not match this pipeline",
                    path.display()
                )));
            }
            let n = r.u64()? as usize;
            let net = match k {
                0 => &mut model.edge_embed,
                1 => &mut model.node_embed,
                _ => &mut model.flux_mlp,
            };
            if n != net.params.n_params() {
                return Err(r.err(&format!(
                    "network {k} stores {n} parameters, expected {}",
                    net.params.n_params()
                )));
            }
            for t in net.params.tensors_mut() {
                let vals = r.f64_vec(t.len())?;
                t.copy_from_slice(&vals);
            }
        }
        r.finish()?;
        model.validate()?;
        Ok(model)
    }

    /// Writes the binary checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        let sidecar = Sidecar {
            checkpoint_version: CHECKPOINT_VERSION,
            attr_normalization_version: ATTR_NORMALIZATION_VERSION,
            spec: self.spec,
            networks: [self.edge_embed.spec, self.node_embed.spec, self.flux_mlp.spec],
            n_params: self.n_params(),
            provenance: provenance.cloned(),
        };
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Provenance recorded in the sidecar of `path`, if any.
    pub fn load_provenance(path: &Path) -> Result<Option<Provenance>> {
        let side = sidecar_path(path);
        if !side.exists() {
            return Ok(None);
        }
        let text = String::from_utf8(read_file(&side)?).map_err(|e| Error::Format {
            path: side.clone(),
            message: e.to_string(),
        })?;
        let s: Sidecar = serde_json::from_str(&text)?;
        if s.checkpoint_version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "{}: sidecar version {}",
                side.display(),
                s.checkpoint_version
            )));
        }
        Ok(s.provenance)
    }
}
