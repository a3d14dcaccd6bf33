#![allow(dead_code)]

use nalgebra::DMatrix;
use pbf_rbdo::reduction::{ActiveSubspace, InputBounds, SnapshotKind, N_INPUTS};
use pbf_rbdo::surrogate::{FeatureModel, OutputModel, PolySurrogate, Provenance, SurrogateBundle};
use pbf_rbdo::thermal::{GRID_LEN, SNAPSHOT_LEN};

/// One-feature output whose first entry is the linear model
/// `coef[0] + sum_c coef[c + 1] * (w_c . xi)` and whose other entries are 0.
/// The model stays positive on the box, so it is also the maximum.
fn single_entry_output(kind: SnapshotKind, len: usize, dirs: &[[f64; N_INPUTS]], coef: &[f64]) -> OutputModel {
    let r = dirs.len();
    let w1 = DMatrix::from_fn(N_INPUTS, r, |i, c| dirs[c][i]);
    let mut eigenvalues = vec![0.0; N_INPUTS];
    eigenvalues[..r].fill(1.0);
    OutputModel {
        kind,
        right_vectors: DMatrix::from_fn(len, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        singular_values: vec![1.0],
        features: vec![FeatureModel {
            subspace: ActiveSubspace {
                w1,
                eigenvalues,
                r,
                input_bounds: InputBounds::default(),
            },
            surrogate: PolySurrogate::new(r, 1, coef.to_vec(), 1.0).unwrap(),
        }],
    }
}

const E_V: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
const E_P: [f64; 6] = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
const MATERIAL: [f64; 6] = [0.0, 0.0, 0.0, 0.8, 0.6, 0.0];

/// Hand-built bundle with a known response, in normalized inputs `x`:
///
/// * peak temperature `1500 - 300 x_v + 400 x_P`,
/// * maximum stress `732.5 - 15 x_v + 100 x_P + 30 (0.8 x_Y + 0.6 x_E)`.
///
/// Along the liquidus line the stress grows with speed, so the risk
/// constraint binds before the speed bound does.
pub fn toy_bundle() -> SurrogateBundle {
    SurrogateBundle {
        temperature: single_entry_output(
            SnapshotKind::Temperature,
            SNAPSHOT_LEN,
            &[E_V, E_P],
            &[1500.0, -300.0, 400.0],
        ),
        stress: single_entry_output(
            SnapshotKind::Stress,
            GRID_LEN,
            &[E_V, E_P, MATERIAL],
            &[732.5, -15.0, 100.0, 30.0],
        ),
        input_bounds: InputBounds::default(),
        provenance: Provenance {
            seed: 0,
            runs: 0,
            config_hash: "toy".into(),
        },
    }
}

/// Brute force over `zeta_j = min + j (tau - min) / 1000`, with the
/// boundary cases of the buffered probability applied first.
pub fn grid_bpof(values: &[f64], tau: f64) -> f64 {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if tau <= mean {
        return 1.0;
    }
    if tau >= max {
        return 0.0;
    }
    let width = tau - min;
    (0..1000)
        .map(|j| {
            let zeta = min + (j as f64 * width) / 1000.0;
            let excess = values.iter().map(|g| (g - zeta).max(0.0)).sum::<f64>() / m;
            excess / (tau - zeta)
        })
        .fold(f64::INFINITY, f64::min)
        .clamp(0.0, 1.0)
}
