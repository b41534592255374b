use rand::RngCore;

/// `c = a · b + beta · c` where `a` is `m x k` and `b` is `k x n` after the
/// optional transposes (the stored layouts are `k x m` / `n x k` when transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every index reached through the
    // given strides lies inside the respective slices, and `c` is exclusive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Inverted-dropout keep mask packed into bits.
#[derive(Clone, Debug)]
pub(crate) struct Mask {
    bits: Vec<u64>,
    /// Multiplier applied to kept entries, `1 / (1 - rate)`.
    pub(crate) scale: f64,
}

impl Mask {
    pub(crate) fn sample(len: usize, rate: f64, rng: &mut impl RngCore) -> Mask {
        // keep iff a uniform 16-bit draw is >= rate * 2^16
        let threshold = (rate * 65_536.0).round() as u64;
        let mut bits = vec![0u64; len.div_ceil(64)];
        for (w, word) in bits.iter_mut().enumerate() {
            let n = (len - w * 64).min(64);
            let mut acc = 0u64;
            for k in (0..n).step_by(4) {
                let r = rng.next_u64();
                for s in 0..4 {
                    let draw = (r >> (16 * s)) & 0xffff;
                    acc |= ((draw >= threshold) as u64) << (k + s);
                }
            }
            // draws past the end are discarded
            *word = if n == 64 { acc } else { acc & ((1u64 << n) - 1) };
        }
        Mask {
            bits,
            scale: 1.0 / (1.0 - rate),
        }
    }

    /// Scale factors of entries `start..start + out.len()`.
    pub(crate) fn factors(&self, start: usize, out: &mut [f64]) {
        let table = [0.0, self.scale];
        let mut i = start;
        let mut k = 0;
        while k < out.len() {
            let mut word = self.bits[i / 64] >> (i % 64);
            let run = (64 - i % 64).min(out.len() - k);
            for o in &mut out[k..k + run] {
                *o = table[(word & 1) as usize];
                word >>= 1;
            }
            i += run;
            k += run;
        }
    }

    #[inline]
    pub(crate) fn keep(&self, i: usize) -> bool {
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Scale factor of entry `i`: 0 when dropped.
    #[inline]
    pub(crate) fn factor(&self, i: usize) -> f64 {
        if self.keep(i) {
            self.scale
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                assert!((c[i * n + j] - naive(i, j)).abs() < 1e-12);
            }
        }
        // transposed storage of both operands
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, 0.0);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_keep_rate_is_close_to_expected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = Mask::sample(100_000, 0.3, &mut rng);
        let kept = (0..100_000).filter(|&i| mask.keep(i)).count() as f64 / 100_000.0;
        assert!((kept - 0.7).abs() < 0.01, "kept {kept}");
        assert!((mask.scale - 1.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = Mask::sample(1000, 0.0, &mut rng);
        assert!((0..1000).all(|i| mask.keep(i)));
    }
}
