//! Neural building blocks: patch merge/expand, the four-direction 2-D
//! selective scan (cross-scan -> S6 per path -> cross-merge), and the VSS
//! residual block. All forwards run on a [`Graph`] so the same code serves
//! inference and training.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// The four traversal orders of the 2-D scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanPath {
    RowForward,
    ColForward,
    RowBackward,
    ColBackward,
}

pub const SCAN_PATHS: [ScanPath; 4] = [
    ScanPath::RowForward,
    ScanPath::ColForward,
    ScanPath::RowBackward,
    ScanPath::ColBackward,
];

impl ScanPath {
    /// Grid cell visited at sequence position `t` on an H x W grid.
    pub fn cell_at(self, t: usize, h: usize, w: usize) -> usize {
        let l = h * w;
        match self {
            ScanPath::RowForward => t,
            ScanPath::ColForward => (t % h) * w + t / h,
            ScanPath::RowBackward => l - 1 - t,
            ScanPath::ColBackward => {
                let s = l - 1 - t;
                (s % h) * w + s / h
            }
        }
    }

    /// Permutation seq position -> grid cell.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        (0..h * w).map(|t| self.cell_at(t, h, w)).collect()
    }

    /// Inverse permutation grid cell -> seq position.
    pub fn inverse_order(self, h: usize, w: usize) -> Vec<usize> {
        let mut inv = vec![0usize; h * w];
        for (t, cell) in self.order(h, w).iter().enumerate() {
            inv[*cell] = t;
        }
        inv
    }
}

/// Parameters of one patch-merge block (space-to-depth, norm, projection).
#[derive(Debug, Clone, Copy)]
pub struct PatchMergeVars {
    pub norm_scale: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Parameters of the decoder mirror (projection, depth-to-space).
#[derive(Debug, Clone, Copy)]
pub struct PatchExpandVars {
    pub proj_w: Var,
    pub proj_b: Var,
}

/// One S6 parameter set; each of the four scan paths owns a distinct one.
#[derive(Debug, Clone, Copy)]
pub struct ScanPathVars {
    pub delta_w: Var,
    pub delta_b: Var,
    pub b_w: Var,
    pub c_w: Var,
    pub a_log: Var,
    pub d_skip: Var,
}

/// Parameters of a full VSS block.
#[derive(Debug, Clone, Copy)]
pub struct VssBlockVars {
    pub norm1: Var,
    pub mlp1_w: Var,
    pub mlp1_b: Var,
    pub dwconv_k: Var,
    pub paths: [ScanPathVars; 4],
    pub norm2: Var,
    pub mlp2_w: Var,
    pub mlp2_b: Var,
    pub norm3: Var,
    pub mlp3_w1: Var,
    pub mlp3_b1: Var,
    pub mlp3_w2: Var,
    pub mlp3_b2: Var,
}

pub const RMS_NORM_EPS: f64 = 1e-6;

/// Sub-pixel order of the 2x2 block rearrangements: top-left, top-right,
/// bottom-left, bottom-right. Frozen so weight files and fixtures stay stable.
fn space_to_depth_map(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(h * w * c);
    for bi in 0..h2 {
        for bj in 0..w2 {
            for q in 0..4 {
                let (qi, qj) = (q / 2, q % 2);
                for ch in 0..c {
                    map.push(((2 * bi + qi) * w + 2 * bj + qj) * c + ch);
                }
            }
        }
    }
    map
}

fn depth_to_space_map(h2: usize, w2: usize, c: usize) -> Vec<usize> {
    // output is [2*h2 x 2*w2 x c]; source is [h2*w2 x 4c]
    let (h, w) = (2 * h2, 2 * w2);
    let mut map = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let (bi, bj) = (i / 2, j / 2);
            let q = (i % 2) * 2 + j % 2;
            for ch in 0..c {
                map.push((bi * w2 + bj) * 4 * c + q * c + ch);
            }
        }
    }
    map
}

/// Space-to-depth by 2, RMS norm, linear projection to the new depth.
pub fn patch_merge(g: &mut Graph, f: Var, p: &PatchMergeVars) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("patch_merge wants [HxWxC], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "patch_merge needs even spatial extents, got {h}x{w}"
        )));
    }
    let c_out = g.shape(p.proj_w)[1];
    let merged = g.index_map(f, &[h / 2 * (w / 2), 4 * c], space_to_depth_map(h, w, c));
    let normed = g.rms_norm(merged, p.norm_scale, RMS_NORM_EPS);
    let proj = g.matmul(normed, p.proj_w);
    let proj = g.add_bias(proj, p.proj_b);
    Ok(g.reshape(proj, &[h / 2, w / 2, c_out]))
}

/// Linear projection to 4x the output depth, then depth-to-space by 2.
pub fn patch_expand(g: &mut Graph, f: Var, p: &PatchExpandVars) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("patch_expand wants [HxWxC], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let proj_out = g.shape(p.proj_w)[1];
    if proj_out % 4 != 0 {
        return Err(Error::Shape(format!(
            "patch_expand projection width {proj_out} not divisible by 4"
        )));
    }
    let c_out = proj_out / 4;
    let tokens = g.reshape(f, &[h * w, c]);
    let proj = g.matmul(tokens, p.proj_w);
    let proj = g.add_bias(proj, p.proj_b);
    Ok(g.index_map(proj, &[2 * h, 2 * w, c_out], depth_to_space_map(h, w, c_out)))
}

/// Unfold an [H x W x D] grid into four [L x D] sequences, one per path.
pub fn cross_scan(g: &mut Graph, f: Var) -> Result<[Var; 4]> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("cross_scan wants [HxWxD], got {shape:?}")));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let l = h * w;
    let mut out = [0usize; 4];
    for (slot, path) in out.iter_mut().zip(SCAN_PATHS) {
        let order = path.order(h, w);
        let mut map = Vec::with_capacity(l * d);
        for cell in order {
            for ch in 0..d {
                map.push(cell * d + ch);
            }
        }
        *slot = g.index_map(f, &[l, d], map);
    }
    Ok(out)
}

/// Fold four [L x D] sequences back onto the grid and sum them, fixed order
/// path 1 + 2 + 3 + 4.
pub fn cross_merge(g: &mut Graph, seqs: [Var; 4], h: usize, w: usize) -> Result<Var> {
    let l = h * w;
    let d = g.shape(seqs[0])[1];
    for &s in &seqs {
        if g.shape(s) != [l, d] {
            return Err(Error::Shape(format!(
                "cross_merge sequence {:?} does not match {l}x{d}",
                g.shape(s)
            )));
        }
    }
    let mut acc: Option<Var> = None;
    for (&seq, path) in seqs.iter().zip(SCAN_PATHS) {
        let inv = path.inverse_order(h, w);
        let mut map = Vec::with_capacity(l * d);
        for &pos in &inv {
            for ch in 0..d {
                map.push(pos * d + ch);
            }
        }
        let grid = g.index_map(seq, &[h, w, d], map);
        acc = Some(match acc {
            None => grid,
            Some(a) => g.add(a, grid),
        });
    }
    Ok(acc.unwrap())
}

/// One S6 scan over a sequence: input-dependent delta / B / C projections
/// followed by the selective scan.
fn scan_path_forward(g: &mut Graph, seq: Var, p: &ScanPathVars) -> Var {
    let draw = g.matmul(seq, p.delta_w);
    let draw = g.add_bias(draw, p.delta_b);
    let delta = g.softplus(draw);
    let b_t = g.matmul(seq, p.b_w);
    let c_t = g.matmul(seq, p.c_w);
    g.selective_scan(seq, delta, b_t, c_t, p.a_log, p.d_skip)
}

/// SS2D: cross-scan, a distinct S6 per path, cross-merge.
pub fn ss2d(g: &mut Graph, f: Var, paths: &[ScanPathVars; 4]) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let seqs = cross_scan(g, f)?;
    let mut outs = [0usize; 4];
    for i in 0..4 {
        outs[i] = scan_path_forward(g, seqs[i], &paths[i]);
    }
    cross_merge(g, outs, h, w)
}

/// The VSS residual block:
/// f''    = f + MLP2(RMS2(SS2D(silu(DWConv(MLP1(RMS1(f)))))))
/// f_out  = MLP3(RMS3(f'')) + f''
pub fn vss_block(g: &mut Graph, f: Var, p: &VssBlockVars) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("vss_block wants [HxWxC], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if g.shape(p.mlp1_w)[0] != c {
        return Err(Error::Shape(format!(
            "vss_block channel dim {c} does not match mlp1 {:?}",
            g.shape(p.mlp1_w)
        )));
    }
    let d_inner = g.shape(p.mlp1_w)[1];

    let tokens = g.reshape(f, &[h * w, c]);
    let n1 = g.rms_norm(tokens, p.norm1, RMS_NORM_EPS);
    let m1 = g.matmul(n1, p.mlp1_w);
    let m1 = g.add_bias(m1, p.mlp1_b);
    let grid = g.reshape(m1, &[h, w, d_inner]);
    let dw = g.conv2d_depthwise(grid, p.dwconv_k);
    let act = g.silu(dw);
    let scanned = ss2d(g, act, &p.paths)?;
    let s_tokens = g.reshape(scanned, &[h * w, d_inner]);
    let n2 = g.rms_norm(s_tokens, p.norm2, RMS_NORM_EPS);
    let m2 = g.matmul(n2, p.mlp2_w);
    let m2 = g.add_bias(m2, p.mlp2_b);
    let f_prime = g.reshape(m2, &[h, w, c]);
    let f_sec = g.add(f, f_prime);

    let t2 = g.reshape(f_sec, &[h * w, c]);
    let n3 = g.rms_norm(t2, p.norm3, RMS_NORM_EPS);
    let h1 = g.matmul(n3, p.mlp3_w1);
    let h1 = g.add_bias(h1, p.mlp3_b1);
    let h1 = g.silu(h1);
    let m3 = g.matmul(h1, p.mlp3_w2);
    let m3 = g.add_bias(m3, p.mlp3_b2);
    let m3_grid = g.reshape(m3, &[h, w, c]);
    Ok(g.add(m3_grid, f_sec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{selective_scan, SelectiveScanInputs};
    use crate::tensor::{Rng, Tensor};

    fn leafy(g: &mut Graph, t: Tensor) -> Var {
        g.leaf(t)
    }

    #[test]
    fn rms_norm_constant_vector() {
        let mut g = Graph::inference();
        let x = leafy(&mut g, Tensor::full(&[1, 4], 3.0));
        let s = leafy(&mut g, Tensor::full(&[4], 1.0));
        let out = g.rms_norm(x, s, 0.0);
        for v in g.value(out).data() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rms_norm_zero_input() {
        let mut g = Graph::inference();
        let x = leafy(&mut g, Tensor::zeros(&[2, 3]));
        let s = leafy(&mut g, Tensor::full(&[3], 1.0));
        let out = g.rms_norm(x, s, 1e-6);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_vs_formula_oracle() {
        let mut rng = Rng::new(51);
        let x = Tensor::from_fn(&[6, 5], |_| rng.uniform() - 0.5);
        let s = Tensor::from_fn(&[5], |_| rng.uniform() + 0.5);
        let mut g = Graph::inference();
        let xv = leafy(&mut g, x.clone());
        let sv = leafy(&mut g, s.clone());
        let out = g.rms_norm(xv, sv, 1e-6);
        for t in 0..6 {
            let row = &x.data()[t * 5..(t + 1) * 5];
            let r = (row.iter().map(|v| v * v).sum::<f64>() / 5.0 + 1e-6).sqrt();
            for j in 0..5 {
                let expect = row[j] / r * s.data()[j];
                assert!((g.value(out).data()[t * 5 + j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn patch_merge_pure_rearrangement() {
        // identity norm scale and identity 4->4 projection expose the order
        let mut g = Graph::inference();
        let f = leafy(
            &mut g,
            Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        // undo the norm with the scale so projection sees raw order: use
        // zero-eps norm of a single row; instead cancel by scaling after.
        let p = PatchMergeVars {
            norm_scale: leafy(&mut g, Tensor::full(&[4], 1.0)),
            proj_w: leafy(
                &mut g,
                Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }),
            ),
            proj_b: leafy(&mut g, Tensor::zeros(&[4])),
        };
        let out = patch_merge(&mut g, f, &p).unwrap();
        assert_eq!(g.shape(out), [1, 1, 4]);
        // rms of (1,2,3,4) with eps 1e-6
        let r = ((1.0 + 4.0 + 9.0 + 16.0) / 4.0f64 + 1e-6).sqrt();
        let got = g.value(out).data();
        for (i, expect) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((got[i] - expect / r).abs() < 1e-12, "sub-pixel order broken");
        }
    }

    #[test]
    fn patch_merge_shape_contract_and_odd_error() {
        let mut g = Graph::inference();
        let f = leafy(&mut g, Tensor::zeros(&[256, 256, 1]));
        let p = PatchMergeVars {
            norm_scale: leafy(&mut g, Tensor::full(&[4], 1.0)),
            proj_w: leafy(&mut g, Tensor::zeros(&[4, 2])),
            proj_b: leafy(&mut g, Tensor::zeros(&[2])),
        };
        let out = patch_merge(&mut g, f, &p).unwrap();
        assert_eq!(g.shape(out), [128, 128, 2]);

        let odd = leafy(&mut g, Tensor::zeros(&[3, 4, 1]));
        assert!(patch_merge(&mut g, odd, &p).is_err());
    }

    #[test]
    fn patch_expand_inverse_rearrangement() {
        let mut g = Graph::inference();
        let f = leafy(
            &mut g,
            Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let p = PatchExpandVars {
            proj_w: leafy(
                &mut g,
                Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }),
            ),
            proj_b: leafy(&mut g, Tensor::zeros(&[4])),
        };
        let out = patch_expand(&mut g, f, &p).unwrap();
        assert_eq!(g.shape(out), [2, 2, 1]);
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patch_expand_shape_contract_and_width_error() {
        let mut g = Graph::inference();
        let f = leafy(&mut g, Tensor::zeros(&[16, 16, 4]));
        let p = PatchExpandVars {
            proj_w: leafy(&mut g, Tensor::zeros(&[4, 8])),
            proj_b: leafy(&mut g, Tensor::zeros(&[8])),
        };
        let out = patch_expand(&mut g, f, &p).unwrap();
        assert_eq!(g.shape(out), [32, 32, 2]);

        let bad = PatchExpandVars {
            proj_w: leafy(&mut g, Tensor::zeros(&[4, 6])),
            proj_b: leafy(&mut g, Tensor::zeros(&[6])),
        };
        assert!(patch_expand(&mut g, f, &bad).is_err());
    }

    #[test]
    fn merge_expand_roundtrip_with_inverse_projections() {
        // orthogonal-ish random projection and its explicit inverse
        let mut rng = Rng::new(61);
        let c = 3;
        // build an invertible 4c x 4c matrix (diagonally dominant)
        let n = 4 * c;
        let w = Tensor::from_fn(&[n, n], |i| {
            let off = (rng.uniform() - 0.5) * 0.1;
            if i / n == i % n {
                1.0 + off
            } else {
                off
            }
        });
        let w_inv = invert(&w);
        // kill the norm by feeding rows whose rms is computed and undone:
        // use scale = rms per... instead use norm scale 1 and fold the norm
        // into the expectation: merge then expand with proj = w_inv * diag(r)
        // is input-dependent, so instead test with norm disabled via large
        // uniform scale trick: set input rows to unit rms.
        let f = Tensor::from_fn(&[4, 4, c], |_| rng.uniform() - 0.5);
        // normalize each future merged row to unit rms so RMS norm is identity
        let mut fdata = f.clone();
        {
            let map = space_to_depth_map(4, 4, c);
            let rows = 4;
            let width = 4 * c;
            for t in 0..rows {
                let ms: f64 = (0..width)
                    .map(|j| {
                        let v = f.data()[map[t * width + j]];
                        v * v
                    })
                    .sum::<f64>()
                    / width as f64;
                // scale rows to mean-square 1 - eps so the norm divisor is 1
                let alpha = ((1.0 - RMS_NORM_EPS) / ms).sqrt();
                for j in 0..width {
                    let idx = map[t * width + j];
                    fdata.data_mut()[idx] = f.data()[idx] * alpha;
                }
            }
        }
        let mut g = Graph::inference();
        let fv = leafy(&mut g, fdata.clone());
        let mp = PatchMergeVars {
            norm_scale: leafy(&mut g, Tensor::full(&[n], 1.0)),
            proj_w: leafy(&mut g, w.clone()),
            proj_b: leafy(&mut g, Tensor::zeros(&[n])),
        };
        let merged = patch_merge(&mut g, fv, &mp).unwrap();
        let ep = PatchExpandVars {
            proj_w: leafy(&mut g, w_inv),
            proj_b: leafy(&mut g, Tensor::zeros(&[n])),
        };
        let back = patch_expand(&mut g, merged, &ep).unwrap();
        // rows were unit-rms (up to eps), so merge o expand recovers input
        for (a, b) in g.value(back).data().iter().zip(fdata.data()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    fn invert(m: &Tensor) -> Tensor {
        let n = m.shape()[0];
        let mut a: Vec<f64> = m.data().to_vec();
        let mut inv: Vec<f64> = (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                .unwrap();
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
            let d = a[col * n + col];
            for j in 0..n {
                a[col * n + j] /= d;
                inv[col * n + j] /= d;
            }
            for row in 0..n {
                if row == col {
                    continue;
                }
                let f = a[row * n + col];
                for j in 0..n {
                    a[row * n + j] -= f * a[col * n + j];
                    inv[row * n + j] -= f * inv[col * n + j];
                }
            }
        }
        Tensor::new(vec![n, n], inv).unwrap()
    }

    #[test]
    fn cross_scan_enumeration_2x2() {
        let mut g = Graph::inference();
        let f = leafy(
            &mut g,
            Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let seqs = cross_scan(&mut g, f).unwrap();
        assert_eq!(g.value(seqs[0]).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(seqs[1]).data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(g.value(seqs[2]).data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(g.value(seqs[3]).data(), &[4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn cross_scan_permutation_property() {
        let mut rng = Rng::new(71);
        let f = Tensor::from_fn(&[3, 5, 1], |_| rng.uniform());
        let mut g = Graph::inference();
        let fv = leafy(&mut g, f.clone());
        let seqs = cross_scan(&mut g, fv).unwrap();
        let mut want: Vec<f64> = f.data().to_vec();
        want.sort_by(f64::total_cmp);
        for &s in &seqs {
            let mut got: Vec<f64> = g.value(s).data().to_vec();
            got.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn cross_scan_degenerate_1x1() {
        let mut g = Graph::inference();
        let f = leafy(&mut g, Tensor::new(vec![1, 1, 2], vec![5.0, 6.0]).unwrap());
        let seqs = cross_scan(&mut g, f).unwrap();
        for &s in &seqs {
            assert_eq!(g.shape(s), [1, 2]);
            assert_eq!(g.value(s).data(), &[5.0, 6.0]);
        }
    }

    #[test]
    fn cross_merge_of_scan_is_4x_identity_exhaustive() {
        for h in 1..=5 {
            for w in 1..=5 {
                let mut rng = Rng::new((h * 10 + w) as u64);
                let f = Tensor::from_fn(&[h, w, 2], |_| rng.uniform() - 0.5);
                let mut g = Graph::inference();
                let fv = leafy(&mut g, f.clone());
                let seqs = cross_scan(&mut g, fv).unwrap();
                let merged = cross_merge(&mut g, seqs, h, w).unwrap();
                for (a, b) in g.value(merged).data().iter().zip(f.data()) {
                    assert_eq!(*a, 4.0 * b);
                }
            }
        }
    }

    #[test]
    fn cross_merge_linearity_and_perturbation() {
        let mut rng = Rng::new(73);
        let f = Tensor::from_fn(&[3, 4, 1], |_| rng.uniform());
        let mut g = Graph::inference();
        let fv = leafy(&mut g, f.clone());
        let seqs = cross_scan(&mut g, fv).unwrap();
        // zero one path
        let zero = leafy(&mut g, Tensor::zeros(&[12, 1]));
        let merged = cross_merge(&mut g, [zero, seqs[1], seqs[2], seqs[3]], 3, 4).unwrap();
        for (a, b) in g.value(merged).data().iter().zip(f.data()) {
            assert!((a - 3.0 * b).abs() < 1e-15);
        }
        // perturb one cell -> exactly that cell changes by 4x under identity
        let mut fp = f.clone();
        fp.data_mut()[5] += 0.25;
        let fpv = leafy(&mut g, fp);
        let seqs2 = cross_scan(&mut g, fpv).unwrap();
        let merged2 = cross_merge(&mut g, seqs2, 3, 4).unwrap();
        let base = cross_merge(&mut g, seqs, 3, 4).unwrap();
        for i in 0..12 {
            let delta = g.value(merged2).data()[i] - g.value(base).data()[i];
            if i == 5 {
                assert!((delta - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(delta, 0.0);
            }
        }
    }

    fn identity_scan_vars(g: &mut Graph, d: usize, n: usize) -> ScanPathVars {
        // C projection zero and D_skip = 1 silences the state path
        ScanPathVars {
            delta_w: g.leaf(Tensor::zeros(&[d, d])),
            delta_b: g.leaf(Tensor::full(&[d], 1.0)),
            b_w: g.leaf(Tensor::zeros(&[d, n])),
            c_w: g.leaf(Tensor::zeros(&[d, n])),
            a_log: g.leaf(Tensor::zeros(&[d, n])),
            d_skip: g.leaf(Tensor::full(&[d], 1.0)),
        }
    }

    fn random_scan_vars(g: &mut Graph, d: usize, n: usize, rng: &mut Rng) -> ScanPathVars {
        ScanPathVars {
            delta_w: g.leaf(Tensor::from_fn(&[d, d], |_| rng.uniform() - 0.5)),
            delta_b: g.leaf(Tensor::from_fn(&[d], |_| rng.uniform())),
            b_w: g.leaf(Tensor::from_fn(&[d, n], |_| rng.uniform() - 0.5)),
            c_w: g.leaf(Tensor::from_fn(&[d, n], |_| rng.uniform() - 0.5)),
            a_log: g.leaf(Tensor::from_fn(&[d, n], |_| rng.uniform() - 0.5)),
            d_skip: g.leaf(Tensor::from_fn(&[d], |_| rng.uniform())),
        }
    }

    #[test]
    fn ss2d_identity_paths_give_4x() {
        let mut rng = Rng::new(81);
        let f = Tensor::from_fn(&[3, 3, 2], |_| rng.uniform() - 0.5);
        let mut g = Graph::inference();
        let fv = leafy(&mut g, f.clone());
        let paths = [
            identity_scan_vars(&mut g, 2, 3),
            identity_scan_vars(&mut g, 2, 3),
            identity_scan_vars(&mut g, 2, 3),
            identity_scan_vars(&mut g, 2, 3),
        ];
        let out = ss2d(&mut g, fv, &paths).unwrap();
        for (a, b) in g.value(out).data().iter().zip(f.data()) {
            assert!((a - 4.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn ss2d_shape_preserved_and_1x1() {
        let mut rng = Rng::new(83);
        for (h, w, d, n) in [(1usize, 1usize, 3usize, 2usize), (4, 6, 2, 4), (5, 3, 3, 2)] {
            let f = Tensor::from_fn(&[h, w, d], |_| rng.uniform() - 0.5);
            let mut g = Graph::inference();
            let fv = leafy(&mut g, f.clone());
            let paths = [
                random_scan_vars(&mut g, d, n, &mut rng),
                random_scan_vars(&mut g, d, n, &mut rng),
                random_scan_vars(&mut g, d, n, &mut rng),
                random_scan_vars(&mut g, d, n, &mut rng),
            ];
            let out = ss2d(&mut g, fv, &paths).unwrap();
            assert_eq!(g.shape(out), [h, w, d]);
        }
    }

    fn random_vss_vars(g: &mut Graph, c: usize, d: usize, n: usize, rng: &mut Rng) -> VssBlockVars {
        VssBlockVars {
            norm1: g.leaf(Tensor::from_fn(&[c], |_| 0.5 + rng.uniform())),
            mlp1_w: g.leaf(Tensor::from_fn(&[c, d], |_| rng.uniform() - 0.5)),
            mlp1_b: g.leaf(Tensor::from_fn(&[d], |_| rng.uniform() - 0.5)),
            dwconv_k: g.leaf(Tensor::from_fn(&[3, 3, d], |_| rng.uniform() - 0.5)),
            paths: [
                random_scan_vars(g, d, n, rng),
                random_scan_vars(g, d, n, rng),
                random_scan_vars(g, d, n, rng),
                random_scan_vars(g, d, n, rng),
            ],
            norm2: g.leaf(Tensor::from_fn(&[d], |_| 0.5 + rng.uniform())),
            mlp2_w: g.leaf(Tensor::from_fn(&[d, c], |_| rng.uniform() - 0.5)),
            mlp2_b: g.leaf(Tensor::from_fn(&[c], |_| rng.uniform() - 0.5)),
            norm3: g.leaf(Tensor::from_fn(&[c], |_| 0.5 + rng.uniform())),
            mlp3_w1: g.leaf(Tensor::from_fn(&[c, 4 * c], |_| rng.uniform() - 0.5)),
            mlp3_b1: g.leaf(Tensor::from_fn(&[4 * c], |_| rng.uniform() - 0.5)),
            mlp3_w2: g.leaf(Tensor::from_fn(&[4 * c, c], |_| rng.uniform() - 0.5)),
            mlp3_b2: g.leaf(Tensor::from_fn(&[c], |_| rng.uniform() - 0.5)),
        }
    }

    #[test]
    fn vss_dead_branches_pass_through() {
        let mut rng = Rng::new(91);
        let (c, d, n) = (2, 4, 2);
        let f = Tensor::from_fn(&[3, 3, c], |_| rng.uniform() - 0.5);
        let mut g = Graph::inference();
        let fv = leafy(&mut g, f.clone());
        let mut p = random_vss_vars(&mut g, c, d, n, &mut rng);
        p.mlp2_w = g.leaf(Tensor::zeros(&[d, c]));
        p.mlp2_b = g.leaf(Tensor::zeros(&[c]));
        p.mlp3_w2 = g.leaf(Tensor::zeros(&[4 * c, c]));
        p.mlp3_b2 = g.leaf(Tensor::zeros(&[c]));
        let out = vss_block(&mut g, fv, &p).unwrap();
        assert_eq!(g.value(out).data(), f.data());
    }

    #[test]
    fn vss_shape_preserved() {
        let mut rng = Rng::new(93);
        for (h, w) in [(2usize, 2usize), (3, 5), (4, 4)] {
            let (c, d, n) = (3, 6, 2);
            let f = Tensor::from_fn(&[h, w, c], |_| rng.uniform() - 0.5);
            let mut g = Graph::inference();
            let fv = leafy(&mut g, f);
            let p = random_vss_vars(&mut g, c, d, n, &mut rng);
            let out = vss_block(&mut g, fv, &p).unwrap();
            assert_eq!(g.shape(out), [h, w, c]);
        }
    }

    /// Straight-line transcription of the block equations on plain tensors,
    /// independent of the graph machinery.
    fn vss_transcription_oracle(
        g: &Graph,
        f: &Tensor,
        p: &VssBlockVars,
    ) -> Tensor {
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let l = h * w;
        let v = |var: Var| g.value(var).clone();
        let rms = |x: &Tensor, scale: &Tensor| {
            let cc = *x.shape().last().unwrap();
            let rows = x.len() / cc;
            let mut out = x.clone();
            for t in 0..rows {
                let ms = x.data()[t * cc..(t + 1) * cc]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    / cc as f64;
                let r = (ms + RMS_NORM_EPS).sqrt();
                for j in 0..cc {
                    out.data_mut()[t * cc + j] = x.data()[t * cc + j] / r * scale.data()[j];
                }
            }
            out
        };
        let linear = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let y = x.matmul(w).unwrap();
            let n = w.shape()[1];
            Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % n])
        };

        let d = v(p.mlp1_w).shape()[1];
        let tokens = f.reshape(&[l, c]).unwrap();
        let m1 = linear(&rms(&tokens, &v(p.norm1)), &v(p.mlp1_w), &v(p.mlp1_b));
        let dw = m1
            .reshape(&[h, w, d])
            .unwrap()
            .conv2d_depthwise(&v(p.dwconv_k))
            .unwrap();
        let act = dw.silu();

        // SS2D by hand
        let mut merged = Tensor::zeros(&[h, w, d]);
        for (pi, path) in SCAN_PATHS.iter().enumerate() {
            let order = path.order(h, w);
            let seq = Tensor::from_fn(&[l, d], |i| act.data()[order[i / d] * d + i % d]);
            let pv = &p.paths[pi];
            let draw = linear(&seq, &v(pv.delta_w), &v(pv.delta_b));
            let delta = draw.softplus();
            let y = selective_scan(&SelectiveScanInputs {
                x: seq.clone(),
                delta,
                b_t: seq.matmul(&v(pv.b_w)).unwrap(),
                c_t: seq.matmul(&v(pv.c_w)).unwrap(),
                a_log: v(pv.a_log),
                d_skip: v(pv.d_skip),
            })
            .unwrap();
            let inv = path.inverse_order(h, w);
            for cell in 0..l {
                for ch in 0..d {
                    merged.data_mut()[cell * d + ch] += y.data()[inv[cell] * d + ch];
                }
            }
        }

        let m2 = linear(
            &rms(&merged.reshape(&[l, d]).unwrap(), &v(p.norm2)),
            &v(p.mlp2_w),
            &v(p.mlp2_b),
        );
        let f_sec = tokens.add(&m2).unwrap();
        let h1 = linear(&rms(&f_sec, &v(p.norm3)), &v(p.mlp3_w1), &v(p.mlp3_b1)).silu();
        let m3 = linear(&h1, &v(p.mlp3_w2), &v(p.mlp3_b2));
        f_sec.add(&m3).unwrap().reshape(&[h, w, c]).unwrap()
    }

    #[test]
    fn vss_matches_transcription_oracle() {
        let mut rng = Rng::new(97);
        let (c, d, n) = (2, 4, 2);
        let f = Tensor::from_fn(&[3, 3, c], |_| rng.uniform() - 0.5);
        let mut g = Graph::inference();
        let fv = leafy(&mut g, f.clone());
        let p = random_vss_vars(&mut g, c, d, n, &mut rng);
        let out = vss_block(&mut g, fv, &p).unwrap();
        let oracle = vss_transcription_oracle(&g, &f, &p);
        for (a, b) in g.value(out).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn vss_global_receptive_field() {
        let mut rng = Rng::new(99);
        let (c, d, n) = (2, 4, 2);
        let f = Tensor::from_fn(&[5, 5, c], |_| rng.uniform() - 0.5);
        let mut g = Graph::inference();
        let fv = leafy(&mut g, f.clone());
        let p = random_vss_vars(&mut g, c, d, n, &mut rng);
        let base_var = vss_block(&mut g, fv, &p).unwrap();
        let base = g.value(base_var).clone();
        for cell in [0usize, 12, 24] {
            let mut fp = f.clone();
            fp.data_mut()[cell * c] += 0.1;
            let fpv = g.leaf(fp);
            let out_var = vss_block(&mut g, fpv, &p).unwrap();
            let out = g.value(out_var).clone();
            for pos in 0..25 {
                let changed = (0..c)
                    .any(|ch| (out.data()[pos * c + ch] - base.data()[pos * c + ch]).abs() > 1e-12);
                assert!(changed, "cell {cell} did not reach position {pos}");
            }
        }
    }

    #[test]
    fn patch_merge_block_translation_equivariance() {
        let mut rng = Rng::new(101);
        let c = 2;
        let f = Tensor::from_fn(&[6, 6, c], |_| rng.uniform() - 0.5);
        // shift by one full 2x2 block to the right (wrapping)
        let shifted = Tensor::from_fn(&[6, 6, c], |i| {
            let ch = i % c;
            let cell = i / c;
            let (r, col) = (cell / 6, cell % 6);
            let src_col = (col + 6 - 2) % 6;
            f.data()[(r * 6 + src_col) * c + ch]
        });
        let mut g = Graph::inference();
        let p = PatchMergeVars {
            norm_scale: g.leaf(Tensor::from_fn(&[4 * c], |_| 0.5 + rng.uniform())),
            proj_w: g.leaf(Tensor::from_fn(&[4 * c, 3], |_| rng.uniform() - 0.5)),
            proj_b: g.leaf(Tensor::from_fn(&[3], |_| rng.uniform() - 0.5)),
        };
        let fv = g.leaf(f);
        let sv = g.leaf(shifted);
        let a = patch_merge(&mut g, fv, &p).unwrap();
        let b = patch_merge(&mut g, sv, &p).unwrap();
        // output shifted by one cell
        let av = g.value(a);
        let bv = g.value(b);
        for r in 0..3 {
            for col in 0..3 {
                for ch in 0..3 {
                    let src = (col + 3 - 1) % 3;
                    assert_eq!(
                        bv.data()[(r * 3 + col) * 3 + ch],
                        av.data()[(r * 3 + src) * 3 + ch]
                    );
                }
            }
        }
    }
}
