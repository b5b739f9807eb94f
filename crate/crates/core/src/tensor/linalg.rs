use super::elementwise::{broadcast_shape, broadcast_strides};
use super::{numel, Tensor};
use crate::error::{Error, Result};

const MR: usize = 6;
const NR: usize = 16;
const KC: usize = 256;
const MC: usize = 96;
const NC: usize = 1024;

/// Below this many multiply-adds packing costs more than it saves.
const SMALL_GEMM: usize = 16 * 1024;

thread_local! {
    static PACK: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, overwriting `c`.
///
/// Blocked and packed, but every output element is still accumulated from
/// zero in increasing `k` (a k-block resumes from the stored partial sum), so
/// the result is bitwise equal to the fused multiply-add triple loop.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    c[..m * n].fill(0.0);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if m * n * k <= SMALL_GEMM {
        // same accumulation order over k as the packed path
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a[i * k + p];
                for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv = x.mul_add(bv, *cv);
                }
            }
        }
        return;
    }
    PACK.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (ap, bp) = &mut *bufs;
        let kc_max = KC.min(k);
        bp.resize(kc_max * NC.min(n.div_ceil(NR) * NR), 0.0);
        ap.resize(kc_max * MC.min(m.div_ceil(MR) * MR), 0.0);
        packed(m, k, n, a, b, c, ap, bp);
    });
}

#[allow(clippy::too_many_arguments)]
fn packed(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], ap: &mut [f64], bp: &mut [f64]) {
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        let panels = nc.div_ceil(NR);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(kc, nc, &b[pc * n + jc..], n, bp);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(mc, kc, &a[ic * k + pc..], k, ap);
                for jp in 0..panels {
                    let j = jc + jp * NR;
                    let nr = NR.min(n - j);
                    let bpanel = &bp[jp * kc * NR..(jp + 1) * kc * NR];
                    for ip in 0..mc.div_ceil(MR) {
                        let i = ic + ip * MR;
                        let mr = MR.min(m - i);
                        kernel(
                            kc,
                            &ap[ip * kc * MR..(ip + 1) * kc * MR],
                            bpanel,
                            &mut c[i * n + j..],
                            n,
                            mr,
                            nr,
                        );
                    }
                }
            }
        }
    }
}

/// `kc×nc` block of `b` (row stride `ldb`) as zero-padded `kc×NR` panels.
fn pack_b(kc: usize, nc: usize, b: &[f64], ldb: usize, out: &mut [f64]) {
    for (jp, j) in (0..nc).step_by(NR).enumerate() {
        let w = NR.min(nc - j);
        let panel = &mut out[jp * kc * NR..(jp + 1) * kc * NR];
        for p in 0..kc {
            let dst = &mut panel[p * NR..(p + 1) * NR];
            dst[..w].copy_from_slice(&b[p * ldb + j..p * ldb + j + w]);
            dst[w..].fill(0.0);
        }
    }
}

/// `mc×kc` block of `a` (row stride `lda`) as zero-padded column-interleaved `MR×kc` panels.
fn pack_a(mc: usize, kc: usize, a: &[f64], lda: usize, out: &mut [f64]) {
    for (ip, i) in (0..mc).step_by(MR).enumerate() {
        let h = MR.min(mc - i);
        let panel = &mut out[ip * kc * MR..(ip + 1) * kc * MR];
        for p in 0..kc {
            for r in 0..MR {
                panel[p * MR + r] = if r < h { a[(i + r) * lda + p] } else { 0.0 };
            }
        }
    }
}

#[inline(always)]
fn kernel(kc: usize, ap: &[f64], bp: &[f64], c: &mut [f64], ldc: usize, mr: usize, nr: usize) {
    let mut tile = [[0.0f64; NR]; MR];
    for r in 0..mr {
        tile[r][..nr].copy_from_slice(&c[r * ldc..r * ldc + nr]);
    }
    let acc = micro(kc, ap, bp, tile);
    for r in 0..mr {
        c[r * ldc..r * ldc + nr].copy_from_slice(&acc[r][..nr]);
    }
}

#[inline(never)]
fn micro(kc: usize, ap: &[f64], bp: &[f64], mut acc: [[f64; NR]; MR]) -> [[f64; NR]; MR] {
    let ap = &ap[..kc * MR];
    let bp = &bp[..kc * NR];
    for p in 0..kc {
        let bv: &[f64; NR] = bp[p * NR..p * NR + NR].try_into().unwrap();
        let av: &[f64; MR] = ap[p * MR..p * MR + MR].try_into().unwrap();
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] = av[r].mul_add(bv[j], acc[r][j]);
            }
        }
    }
    acc
}

/// Transpose of a row-major `rows×cols` block.
pub(crate) fn transpose2(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

impl Tensor {
    /// Batched matrix product over the last two dims, broadcasting leading batch dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b)?;
        let nb = numel(&batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; nb * m * n];
        let offsets = batch_offsets(&batch, batch_a, batch_b);
        if batch_b.iter().product::<usize>() == 1 && nb > 0 {
            // rhs shared by all batches: one tall product
            gemm(nb * m, k, n, &a, &b, &mut out);
        } else {
            for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &a[oa * m * k..],
                    &b[ob * k * n..],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        drop(a);
        drop(b);

        let (lhs, rhs) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let a = lhs.data();
                let b = rhs.data();
                let shared_rhs = rhs.shape()[..rhs.rank() - 2].iter().product::<usize>() == 1;
                let ga = lhs.requires_grad().then(|| {
                    let mut ga = vec![0.0; lhs.numel()];
                    let bt_all: Vec<Vec<f64>> = (0..rhs.numel() / (k * n).max(1))
                        .map(|i| transpose2(k, n, &b[i * k * n..(i + 1) * k * n]))
                        .collect();
                    if shared_rhs && nb > 0 {
                        gemm(nb * m, n, k, g, &bt_all[0], &mut ga);
                    } else {
                        let mut tmp = vec![0.0; m * k];
                        for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                            gemm(m, n, k, &g[bi * m * n..], &bt_all[ob], &mut tmp);
                            for (d, s) in ga[oa * m * k..(oa + 1) * m * k].iter_mut().zip(&tmp) {
                                *d += s;
                            }
                        }
                    }
                    ga
                });
                let gb = rhs.requires_grad().then(|| {
                    let mut gb = vec![0.0; rhs.numel()];
                    if shared_rhs && nb > 0 {
                        let at = transpose2(nb * m, k, &a);
                        gemm(k, nb * m, n, &at, g, &mut gb);
                    } else {
                        let mut tmp = vec![0.0; k * n];
                        for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                            let at = transpose2(m, k, &a[oa * m * k..(oa + 1) * m * k]);
                            gemm(k, m, n, &at, &g[bi * m * n..], &mut tmp);
                            for (d, s) in gb[ob * k * n..(ob + 1) * k * n].iter_mut().zip(&tmp) {
                                *d += s;
                            }
                        }
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Swap the last two dims.
    pub fn t(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("t", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }
}

/// Flat batch offsets (in units of matrices) for each broadcast batch index.
fn batch_offsets(batch: &[usize], ba: &[usize], bb: &[usize]) -> Vec<(usize, usize)> {
    let nb = numel(batch);
    let sa = if batch.is_empty() {
        vec![]
    } else {
        broadcast_strides(ba, batch)
    };
    let sb = if batch.is_empty() {
        vec![]
    } else {
        broadcast_strides(bb, batch)
    };
    let mut res = Vec::with_capacity(nb);
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..nb {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        res.push((oa, ob));
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s = a[i * k + p].mul_add(b[p * n + j], s);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn identity_and_projector() {
        let x = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap().to_vec(), x.to_vec());
        let p = Tensor::new(&[2, 2], vec![1., 0., 0., 0.]).unwrap();
        let v = Tensor::new(&[2, 1], vec![5., 7.]).unwrap();
        assert_eq!(p.matmul(&v).unwrap().to_vec(), vec![5., 0.]);
    }

    #[test]
    fn gemm_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[
            (3, 4, 2),
            (5, 7, 19),
            (9, 33, 40),
            (4, 0, 3),
            (1, 1, 1),
            (17, 16, 16),
            (100, 300, 1100),
            (7, 600, 3),
        ] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let c = a.matmul(&b).unwrap();
            assert_eq!(c.to_vec(), naive(m, k, n, &a.data(), &b.data()), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn batched_broadcast_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4, 2]);
        let (ad, bd, cd) = (a.data(), b.data(), c.data());
        for i in 0..2 {
            for j in 0..3 {
                let r = naive(4, 5, 2, &ad[(i * 3 + j) * 20..], &bd[j * 10..]);
                assert_eq!(&cd[(i * 3 + j) * 8..(i * 3 + j + 1) * 8], &r[..]);
            }
        }
        let w = Tensor::randn(&[2, 3, 4, 2], 1.0, &mut rng);
        let bb = b.clone();
        let err = super::super::grad_check(|t| Ok(t.matmul(&bb)?.mul(&w)?.sum_all()), &a, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        let aa = a.clone();
        let err = super::super::grad_check(|t| Ok(aa.matmul(t)?.mul(&w)?.sum_all()), &b, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        // shared 2-d rhs path
        let w2 = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let r = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let err = super::super::grad_check(|t| Ok(aa.matmul(t)?.mul(&r)?.sum_all()), &w2, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
