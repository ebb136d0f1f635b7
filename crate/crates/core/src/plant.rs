//! Block-sparse LTI plants `ẋ_i = A_ii x_i + Σ_j A_ij x_j + B_i u_i`,
//! `y_i = C_i x_i`, and the linearised microgrid instance.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{controllable_dimension, numeric_rank, observability_matrix};
use crate::netgraph::NetworkPair;

/// Relative singular-value tolerance for every rank test in this module.
pub const RANK_TOL: f64 = 1e-9;

pub const MICROGRID_VOLTAGE: f64 = 110.0;
pub const MICROGRID_TAU_RANGE: (f64, f64) = (0.012, 0.018);
pub const MICROGRID_DROOP_RANGE: (f64, f64) = (1e-15, 1e-14);

/// Per-node parameters of a generated microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridParams {
    pub seed: u64,
    pub coupling_scale: f64,
    pub tau: Vec<f64>,
    /// Droop gains after multiplication by `coupling_scale`.
    pub droop: Vec<f64>,
    pub voltage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlant {
    subsystems: usize,
    n: usize,
    m: usize,
    p: usize,
    a_blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    b_blocks: Vec<DMatrix<f64>>,
    c_blocks: Vec<DMatrix<f64>>,
    microgrid: Option<MicrogridParams>,
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, name: String) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension {
            block: name,
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

impl BlockPlant {
    /// Builds a plant from its blocks. Missing diagonal blocks are zero;
    /// off-diagonal blocks with zero norm are dropped.
    pub fn new(
        n: usize,
        m: usize,
        p: usize,
        a_blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
        b_blocks: Vec<DMatrix<f64>>,
        c_blocks: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let subsystems = b_blocks.len();
        if subsystems == 0 || n == 0 || m == 0 || p == 0 {
            return Err(Error::Config("plant needs at least one subsystem and nonzero orders".into()));
        }
        if c_blocks.len() != subsystems {
            return Err(Error::Dimension {
                block: "C".into(),
                expected: format!("{subsystems} blocks"),
                got: format!("{} blocks", c_blocks.len()),
            });
        }
        for (i, b) in b_blocks.iter().enumerate() {
            check_shape(b, n, m, format!("B_{}", i + 1))?;
        }
        for (i, c) in c_blocks.iter().enumerate() {
            check_shape(c, p, n, format!("C_{}", i + 1))?;
        }
        let mut blocks = BTreeMap::new();
        for ((i, j), a) in a_blocks {
            if i >= subsystems || j >= subsystems {
                return Err(Error::Dimension {
                    block: format!("A_{}{}", i + 1, j + 1),
                    expected: format!("indices in 1..={subsystems}"),
                    got: format!("({}, {})", i + 1, j + 1),
                });
            }
            check_shape(&a, n, n, format!("A_{},{}", i + 1, j + 1))?;
            if i == j || a.iter().any(|&v| v != 0.0) {
                blocks.insert((i, j), a);
            }
        }
        for i in 0..subsystems {
            blocks.entry((i, i)).or_insert_with(|| DMatrix::zeros(n, n));
        }
        Ok(Self {
            subsystems,
            n,
            m,
            p,
            a_blocks: blocks,
            b_blocks,
            c_blocks,
            microgrid: None,
        })
    }

    pub fn subsystems(&self) -> usize {
        self.subsystems
    }

    /// Per-block state, input and output orders.
    pub fn orders(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.p)
    }

    pub fn state_dim(&self) -> usize {
        self.n * self.subsystems
    }

    /// `A_ij`, or `None` when the block is structurally zero.
    pub fn a(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.a_blocks.get(&(i, j))
    }

    pub fn a_diag(&self, i: usize) -> &DMatrix<f64> {
        &self.a_blocks[&(i, i)]
    }

    pub fn b(&self, i: usize) -> &DMatrix<f64> {
        &self.b_blocks[i]
    }

    pub fn c(&self, i: usize) -> &DMatrix<f64> {
        &self.c_blocks[i]
    }

    pub fn a_blocks(&self) -> &BTreeMap<(usize, usize), DMatrix<f64>> {
        &self.a_blocks
    }

    pub fn microgrid(&self) -> Option<&MicrogridParams> {
        self.microgrid.as_ref()
    }

    /// Nonzero off-diagonal blocks must follow physical edges.
    pub fn check_sparsity(&self, pair: &NetworkPair) -> Result<()> {
        if pair.len() != self.subsystems {
            return Err(Error::Dimension {
                block: "network".into(),
                expected: format!("{} nodes", self.subsystems),
                got: format!("{} nodes", pair.len()),
            });
        }
        for &(i, j) in self.a_blocks.keys() {
            if i != j && !pair.has_phys(i, j) {
                return Err(Error::InvalidNetwork(format!(
                    "A_{},{} is nonzero but {} is not a physical neighbour of {}",
                    i + 1,
                    j + 1,
                    j + 1,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Dense compact `(A, B, C)`.
    pub fn assemble(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (n, m, p, big) = (self.n, self.m, self.p, self.subsystems);
        let mut a = DMatrix::zeros(n * big, n * big);
        let mut b = DMatrix::zeros(n * big, m * big);
        let mut c = DMatrix::zeros(p * big, n * big);
        for (&(i, j), blk) in &self.a_blocks {
            a.view_mut((i * n, j * n), (n, n)).copy_from(blk);
        }
        for i in 0..big {
            b.view_mut((i * n, i * m), (n, m)).copy_from(&self.b_blocks[i]);
            c.view_mut((i * p, i * n), (p, n)).copy_from(&self.c_blocks[i]);
        }
        (a, b, c)
    }

    /// Splits compact matrices back into blocks.
    pub fn extract(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        c: &DMatrix<f64>,
        n: usize,
        m: usize,
        p: usize,
    ) -> Result<Self> {
        if n == 0 || !a.nrows().is_multiple_of(n) || a.nrows() != a.ncols() {
            return Err(Error::Dimension {
                block: "A".into(),
                expected: format!("square with size a multiple of {n}"),
                got: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        let big = a.nrows() / n;
        check_shape(b, n * big, m * big, "B".into())?;
        check_shape(c, p * big, n * big, "C".into())?;
        let mut blocks = BTreeMap::new();
        for i in 0..big {
            for j in 0..big {
                blocks.insert((i, j), a.view((i * n, j * n), (n, n)).into_owned());
            }
        }
        let bs = (0..big)
            .map(|i| b.view((i * n, i * m), (n, m)).into_owned())
            .collect();
        let cs = (0..big)
            .map(|i| c.view((i * p, i * n), (p, n)).into_owned())
            .collect();
        Self::new(n, m, p, blocks, bs, cs)
    }
}

/// Linearised droop-controlled microgrid: `n = 2`, `m = p = 1`, state
/// `(δ_i, ω_i)`, output `δ_i`.
///
/// `coupling_scale` multiplies the droop gains; at 1.0 the couplings are of
/// order 1e-9 and the subsystems are practically independent.
pub fn build_microgrid(pair: &NetworkPair, seed: u64, coupling_scale: f64) -> Result<BlockPlant> {
    if !(coupling_scale.is_finite() && coupling_scale >= 0.0) {
        return Err(Error::Config(format!("invalid coupling scale {coupling_scale}")));
    }
    let big = pair.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tau = Vec::with_capacity(big);
    let mut droop = Vec::with_capacity(big);
    for _ in 0..big {
        tau.push(rng.gen_range(MICROGRID_TAU_RANGE.0..=MICROGRID_TAU_RANGE.1));
        droop.push(rng.gen_range(MICROGRID_DROOP_RANGE.0..=MICROGRID_DROOP_RANGE.1) * coupling_scale);
    }
    let voltage = vec![MICROGRID_VOLTAGE; big];

    let mut blocks = BTreeMap::new();
    for i in 0..big {
        let mut total = 0.0;
        for &j in pair.physical_neighbors(i) {
            let c = droop[i] / tau[i] * voltage[i] * voltage[j];
            total += c;
            blocks.insert((i, j), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, c, 0.0]));
        }
        blocks.insert(
            (i, i),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -total, -1.0 / tau[i]]),
        );
    }
    let b = vec![DMatrix::from_column_slice(2, 1, &[0.0, 1.0]); big];
    let c = vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0]); big];
    let mut plant = BlockPlant::new(2, 1, 1, blocks, b, c)?;
    plant.microgrid = Some(MicrogridParams {
        seed,
        coupling_scale,
        tau,
        droop,
        voltage,
    });
    Ok(plant)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    /// `(C_i, A_ii)` observable, per subsystem.
    pub observable_pairs: Vec<bool>,
    pub controllable_dimension: usize,
    pub controllable: bool,
}

impl StructureReport {
    pub fn all_observable(&self) -> bool {
        self.observable_pairs.iter().all(|&o| o)
    }
}

pub fn check_structure(plant: &BlockPlant) -> StructureReport {
    let observable_pairs = (0..plant.subsystems())
        .map(|i| {
            let obs = observability_matrix(plant.a_diag(i), plant.c(i));
            numeric_rank(&obs, RANK_TOL) == plant.n
        })
        .collect();
    let (a, b, _) = plant.assemble();
    let dim = controllable_dimension(&a, &b, RANK_TOL);
    StructureReport {
        observable_pairs,
        controllable_dimension: dim,
        controllable: dim == plant.state_dim(),
    }
}

/// A dense matrix stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().copied());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Dimension {
                block: "matrix data".into(),
                expected: format!("{} entries", self.rows * self.cols),
                got: format!("{} entries", self.data.len()),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABlockEntry {
    /// 1-based row subsystem.
    pub i: usize,
    /// 1-based column subsystem.
    pub j: usize,
    pub matrix: MatrixData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridSpec {
    pub seed: u64,
    #[serde(default = "unit_scale")]
    pub coupling_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlantFile {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub a: Vec<ABlockEntry>,
    pub b: Vec<MatrixData>,
    pub c: Vec<MatrixData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microgrid: Option<MicrogridParams>,
}

/// Plant file: explicit blocks, or a microgrid recipe resolved against the
/// network it is paired with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlantFile {
    Microgrid { microgrid: MicrogridSpec },
    Blocks(BlockPlantFile),
}

impl PlantFile {
    pub fn resolve(&self, pair: &NetworkPair) -> Result<BlockPlant> {
        let plant = match self {
            PlantFile::Microgrid { microgrid } => {
                build_microgrid(pair, microgrid.seed, microgrid.coupling_scale)?
            }
            PlantFile::Blocks(file) => {
                let mut blocks = BTreeMap::new();
                for e in &file.a {
                    if e.i == 0 || e.j == 0 {
                        return Err(Error::Config("block indices are 1-based".into()));
                    }
                    blocks.insert((e.i - 1, e.j - 1), e.matrix.to_matrix()?);
                }
                let b = file.b.iter().map(MatrixData::to_matrix).collect::<Result<_>>()?;
                let c = file.c.iter().map(MatrixData::to_matrix).collect::<Result<_>>()?;
                let mut plant = BlockPlant::new(file.n, file.m, file.p, blocks, b, c)?;
                plant.microgrid = file.microgrid.clone();
                plant
            }
        };
        plant.check_sparsity(pair)?;
        Ok(plant)
    }
}

impl From<&BlockPlant> for BlockPlantFile {
    fn from(plant: &BlockPlant) -> Self {
        Self {
            n: plant.n,
            m: plant.m,
            p: plant.p,
            a: plant
                .a_blocks
                .iter()
                .map(|(&(i, j), blk)| ABlockEntry {
                    i: i + 1,
                    j: j + 1,
                    matrix: MatrixData::from_matrix(blk),
                })
                .collect(),
            b: plant.b_blocks.iter().map(MatrixData::from_matrix).collect(),
            c: plant.c_blocks.iter().map(MatrixData::from_matrix).collect(),
            microgrid: plant.microgrid.clone(),
        }
    }
}
