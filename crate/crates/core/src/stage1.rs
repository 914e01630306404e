//! Class-agnostic query proposal: occupancy correction over the depth-derived
//! grid, query selection and the binary occupancy objective.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SscError};
use crate::geometry::{unflatten, Resolution, VolumeSpec};
use crate::numerics::{sigmoid, Bound, ParamSet, Rng, Tape, Tensor, Var};
use crate::scalar::Real;
use crate::stage2::QuerySetVars;
use crate::voxel::OccupancyGrid;

/// Sigmoid threshold that binarises predicted occupancy.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

/// UNet-style 2-D network over a binary grid with the vertical axis as
/// channels. Encoder: two stride-2 3x3 convs (the first one at stride
/// `factor`); decoder: nearest upsample, skip concat, 3x3 conv, 1x1 head.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyNet {
    pub dims: [usize; 3],
    pub query_dims: [usize; 3],
    pub enc_channels: [usize; 2],
}

impl OccupancyNet {
    pub fn new<T: Real>(spec: &VolumeSpec<T>, enc_channels: [usize; 2]) -> Result<Self> {
        let f = spec.factor();
        if f != 1 && f != 2 {
            return Err(SscError::invalid(format!("occupancy net supports downsample factor 1 or 2, got {f}")));
        }
        let [h, w, _] = spec.query_dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(SscError::invalid("query grid h and w must be even"));
        }
        Ok(OccupancyNet {
            dims: spec.dims,
            query_dims: spec.query_dims,
            enc_channels,
        })
    }

    fn factor(&self) -> usize {
        self.dims[0] / self.query_dims[0]
    }

    pub fn init_params<T: Real>(&self, rng: &mut Rng, params: &mut ParamSet<T>) {
        let [c1, c2] = self.enc_channels;
        let zin = self.dims[2];
        let zout = self.query_dims[2];
        let he = |cin: usize, k: usize| (2.0 / (cin * k * k) as f64).sqrt();
        params.insert_normal("occ.enc1.w", vec![c1, zin, 3, 3], he(zin, 3), rng);
        params.insert_zeros("occ.enc1.b", vec![c1]);
        params.insert_normal("occ.enc2.w", vec![c2, c1, 3, 3], he(c1, 3), rng);
        params.insert_zeros("occ.enc2.b", vec![c2]);
        params.insert_normal("occ.dec.w", vec![c1, c1 + c2, 3, 3], he(c1 + c2, 3), rng);
        params.insert_zeros("occ.dec.b", vec![c1]);
        params.insert_normal("occ.head.w", vec![zout, c1, 1, 1], (1.0 / c1 as f64).sqrt(), rng);
        params.insert_zeros("occ.head.b", vec![zout]);
    }

    /// Logits `[h, w, z]` for an output-resolution occupancy grid.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, m_in: &OccupancyGrid) -> Result<Var> {
        if m_in.dims() != self.dims {
            return Err(SscError::Shape {
                name: "M_in".into(),
                expected: self.dims.to_vec(),
                found: m_in.dims().to_vec(),
            });
        }
        let grid = Tensor::from_parts(self.dims.to_vec(), m_in.as_reals());
        let x = tape.constant(&grid);
        // [H, W, Z] -> [Z, H, W]
        let x = tape.permute(x, &[2, 0, 1]);
        let p = |n: &str| params.get(n);
        let e1 = tape.conv2d(x, p("occ.enc1.w"), p("occ.enc1.b"), self.factor(), 1);
        let e1 = tape.relu(e1);
        let e2 = tape.conv2d(e1, p("occ.enc2.w"), p("occ.enc2.b"), 2, 1);
        let e2 = tape.relu(e2);
        let up = tape.upsample_nearest(e2, 2);
        let cat = tape.concat0(up, e1);
        let d = tape.conv2d(cat, p("occ.dec.w"), p("occ.dec.b"), 1, 1);
        let d = tape.relu(d);
        let head = tape.conv2d(d, p("occ.head.w"), p("occ.head.b"), 1, 0);
        Ok(tape.permute(head, &[1, 2, 0]))
    }
}

/// Binarises logits at [`OCCUPANCY_THRESHOLD`].
pub fn threshold_logits<T: Real>(logits: &[T], query_dims: [usize; 3], origin: [f64; 3], cell: f64) -> OccupancyGrid {
    let bits = logits
        .iter()
        .map(|&x| sigmoid(x).as_f64() > OCCUPANCY_THRESHOLD)
        .collect();
    OccupancyGrid::new(query_dims, origin, cell, bits).expect("logit count matches query grid")
}

/// Runs the occupancy net and thresholds its output into `M_out`.
pub fn predict_occupancy<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    net: &OccupancyNet,
    m_in: &OccupancyGrid,
) -> Result<(Var, OccupancyGrid)> {
    let logits = net.forward(tape, params, m_in)?;
    let cell = m_in.voxel_size() * net.factor() as f64;
    let m_out = threshold_logits(tape.value(logits), net.query_dims, m_in.origin(), cell);
    Ok((logits, m_out))
}

/// Mean binary cross-entropy between occupancy logits and a query-resolution target.
pub fn stage1_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &OccupancyGrid) -> Result<Var> {
    let n = tape.value(logits).len();
    if n != target.len() {
        return Err(SscError::Shape {
            name: "stage-1 logits".into(),
            expected: target.dims().to_vec(),
            found: tape.shape(logits).to_vec(),
        });
    }
    if tape.value(logits).iter().any(|x| !x.is_finite()) {
        return Err(SscError::NonFinite("stage-1 logits".into()));
    }
    Ok(tape.bce_with_logits_mean(logits, target.as_reals()))
}

/// Query cells selected by `M_out`, in row-major scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryProposal {
    pub indices: Vec<[usize; 3]>,
    pub flat: Vec<usize>,
    pub mask: OccupancyGrid,
}

impl QueryProposal {
    pub fn from_mask(mask: OccupancyGrid) -> Self {
        let flat = mask.set_indices();
        let indices = flat.iter().map(|&f| unflatten(f, mask.dims())).collect();
        QueryProposal { indices, flat, mask }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Gathers `Q + pos` at the set cells of `m_out`: the `[N_p, d]` proposals.
pub fn propose_queries<T: Real>(tape: &mut Tape<T>, qset: &QuerySetVars, m_out: &OccupancyGrid) -> Result<(Var, QueryProposal)> {
    let dims = qset.grid_dims;
    if m_out.dims() != dims {
        return Err(SscError::Shape {
            name: "M_out".into(),
            expected: dims.to_vec(),
            found: m_out.dims().to_vec(),
        });
    }
    let proposal = QueryProposal::from_mask(m_out.clone());
    if proposal.is_empty() {
        log::warn!("empty query proposal; stage-2 will run on mask tokens only");
    }
    let rows = tape.gather_rows(qset.embedded, proposal.flat.clone());
    Ok((rows, proposal))
}

/// How the proposal mask is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QueryMode {
    /// Thresholded stage-1 prediction.
    Occupancy,
    /// Every query cell.
    Dense,
    /// Uniformly random subset with the given percentage of cells.
    Random(f64),
}

impl std::str::FromStr for QueryMode {
    type Err = SscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occupancy" => Ok(QueryMode::Occupancy),
            "dense" => Ok(QueryMode::Dense),
            _ => {
                let p = s
                    .strip_prefix("random:")
                    .and_then(|p| p.trim_end_matches('%').parse::<f64>().ok())
                    .ok_or_else(|| SscError::invalid(format!("unknown query mode `{s}`")))?;
                if !(0.0..=100.0).contains(&p) {
                    return Err(SscError::invalid(format!("random query percentage {p} outside [0, 100]")));
                }
                Ok(QueryMode::Random(p))
            }
        }
    }
}

impl TryFrom<String> for QueryMode {
    type Error = SscError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QueryMode> for String {
    fn from(m: QueryMode) -> String {
        m.to_string()
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QueryMode::Occupancy => write!(f, "occupancy"),
            QueryMode::Dense => write!(f, "dense"),
            QueryMode::Random(p) => write!(f, "random:{p}"),
        }
    }
}

/// Proposal mask for a query mode. `predicted` is used only in occupancy mode.
pub fn proposal_mask<T: Real>(mode: QueryMode, predicted: &OccupancyGrid, spec: &VolumeSpec<T>, rng: &mut Rng) -> OccupancyGrid {
    match mode {
        QueryMode::Occupancy => predicted.clone(),
        QueryMode::Dense => OccupancyGrid::filled(spec, Resolution::Query, true),
        QueryMode::Random(p) => {
            let n = spec.cell_count(Resolution::Query);
            let k = ((p / 100.0) * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let mut mask = OccupancyGrid::filled(spec, Resolution::Query, false);
            for &f in &order[..k.min(n)] {
                mask.labels_mut()[f] = true;
            }
            mask
        }
    }
}
