//! Relation perception over pooled channel statistics: channels are
//! reduced to a small vertex vector, related through an adjacency built
//! from diagonal self-attention plus a learnable component, and the result
//! gates the input channelwise.

use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};

/// Initial value of every entry of the learnable adjacency component.
pub const M_L_INIT: f64 = 1e-6;

/// Parameters of one relation-perception block on C channels reduced by
/// factor r to C' = C / r vertices.
#[derive(Debug, Clone)]
pub struct AfrpParams {
    /// 1x1 reduction convolution, C -> C'.
    pub reduce: Param,
    /// Pointwise convolution over the C' vertex vector producing C' logits;
    /// shared by the self-attention and the post-relation transform.
    pub vertex: Param,
    /// Learnable adjacency component, C' x C'.
    pub m_l: Param,
    /// 1x1 restoring convolution, C' -> C.
    pub restore: Param,
    pub c: usize,
    pub c_red: usize,
}

impl AfrpParams {
    pub fn init(c: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        if r == 0 || c == 0 || c % r != 0 {
            return Err(Error::Config(format!(
                "reduction {r} must divide the channel count {c}"
            )));
        }
        let c_red = c / r;
        Ok(AfrpParams {
            reduce: Param::fan_in("weight", vec![c_red, c, 1, 1], c, rng),
            vertex: Param::fan_in("weight", vec![c_red, c_red], c_red, rng),
            m_l: Param::filled("m_l", vec![c_red, c_red], M_L_INIT),
            restore: Param::fan_in("weight", vec![c, c_red, 1, 1], c_red, rng),
            c,
            c_red,
        })
    }
}

pub struct AfrpIds {
    pub reduce: TensorId,
    pub vertex: TensorId,
    pub m_l: TensorId,
    pub restore: TensorId,
}

impl AfrpParams {
    pub fn bind(&self, tape: &mut Tape) -> Result<AfrpIds> {
        Ok(AfrpIds {
            reduce: self.reduce.bind(tape)?,
            vertex: self.vertex.bind(tape)?,
            m_l: self.m_l.bind(tape)?,
            restore: self.restore.bind(tape)?,
        })
    }
}

/// Per-sample adjacency with its stored components:
/// m = m_i . m_sa + m_l elementwise, all C' x C' row-major.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    pub dim: usize,
    /// Identity mask.
    pub m_i: Vec<f64>,
    /// Diagonal self-attention: softmax of the vertex logits on the
    /// diagonal, zero elsewhere.
    pub m_sa: Vec<f64>,
    /// Copy of the learnable component.
    pub m_l: Vec<f64>,
    /// The assembled adjacency.
    pub m: Vec<f64>,
}

impl AdjacencyMatrix {
    /// Recomputes m from the stored components; bit-identical to `m`.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.m_i
            .iter()
            .zip(&self.m_sa)
            .zip(&self.m_l)
            .map(|((i, sa), l)| i * sa + l)
            .collect()
    }
}

/// Vertex vector per sample: reduce the pooled channel statistics through
/// the 1x1 convolution and lay them out as a row, [B,1,C'].
pub fn build_vertices(tape: &mut Tape, x: TensorId, p: &AfrpIds) -> Result<TensorId> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 {
        return Err(Error::ShapeMismatch(format!("vertices need [B,C,H,W], got {sx:?}")));
    }
    let b = sx[0];
    let pooled = tape.global_avg_pool(x)?;
    let reduced = tape.conv2d(pooled, p.reduce, 1, 0)?;
    let c_red = tape.shape(reduced)[1];
    tape.reshape(reduced, vec![b, 1, c_red])
}

/// Materializes each sample's adjacency from raw vertex values (row-major
/// [B, C']), mirroring the forward computation off-tape for inspection.
pub fn build_adjacency(vertices: &[f64], p: &AfrpParams) -> Result<Vec<AdjacencyMatrix>> {
    let d = p.c_red;
    if vertices.len() % d != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} vertex values do not tile into rows of {d}",
            vertices.len()
        )));
    }
    let mut out = Vec::with_capacity(vertices.len() / d);
    for row in vertices.chunks(d) {
        // logits = v . W_vertex
        let mut logits = vec![0.0; d];
        for i in 0..d {
            for (j, l) in logits.iter_mut().enumerate() {
                *l += row[i] * p.vertex.data[i * d + j];
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut soft: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = soft.iter().sum();
        soft.iter_mut().for_each(|v| *v /= s);

        let mut m_i = vec![0.0; d * d];
        let mut m_sa = vec![0.0; d * d];
        for i in 0..d {
            m_i[i * d + i] = 1.0;
            m_sa[i * d + i] = soft[i];
        }
        let adj = AdjacencyMatrix {
            dim: d,
            m: m_i
                .iter()
                .zip(&m_sa)
                .zip(&p.m_l.data)
                .map(|((i, sa), l)| i * sa + l)
                .collect(),
            m_i,
            m_sa,
            m_l: p.m_l.data.clone(),
        };
        out.push(adj);
    }
    Ok(out)
}

/// Gates the input channelwise by relations among the reduced vertices:
/// X' = X . sigmoid(restore(ReLU(vertex_conv(V . M)))) with
/// M = diag(softmax(vertex_conv(V))) + M_l per sample.
///
/// V . M is computed as V (.) softmax + V . M_l, which is the same linear
/// map with the diagonal term applied elementwise.
pub fn afrp_forward(tape: &mut Tape, x: TensorId, p: &AfrpIds) -> Result<TensorId> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 {
        return Err(Error::ShapeMismatch(format!("afrp input must be [B,C,H,W], got {sx:?}")));
    }
    let (b, c) = (sx[0], sx[1]);
    let v3 = build_vertices(tape, x, p)?;
    let c_red = tape.shape(v3)[2];
    let v = tape.reshape(v3, vec![b, c_red])?;

    let logits = tape.matmul(v, p.vertex)?;
    let soft = tape.softmax(logits)?;
    let diag_term = tape.mul(v, soft)?;
    let learn_term = tape.matmul(v, p.m_l)?;
    let vm = tape.add(diag_term, learn_term)?;

    let h = tape.matmul(vm, p.vertex)?;
    let h = tape.relu(h)?;
    let h4 = tape.reshape(h, vec![b, c_red, 1, 1])?;
    let restored = tape.conv2d(h4, p.restore, 1, 0)?;
    let gate_flat = tape.reshape(restored, vec![b, c])?;
    let gate = tape.sigmoid(gate_flat)?;
    tape.scale_per_channel(x, gate)
}
