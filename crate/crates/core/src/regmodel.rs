//! Along-track registration of submap pairs.
//!
//! Shift convention: a shift `T` compares column `c` of the second image
//! with column `c + T` of the first, so a positive `T` means the second
//! submap starts `T` columns further along the track than the first.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Radargram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Largest shift as a fraction of the column count.
    pub max_shift_fraction: f64,
    /// Smallest overlap as a fraction of the column count.
    pub min_overlap_fraction: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig { max_shift_fraction: 0.4, min_overlap_fraction: 0.25 }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_shift_fraction > 0.0 && self.max_shift_fraction < 1.0)
            || !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0)
        {
            return Err(Error::Config("registration: fractions must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn max_shift(&self, cols: usize) -> usize {
        (self.max_shift_fraction * cols as f64 + 1e-9).floor() as usize
    }

    pub fn min_overlap(&self, cols: usize) -> usize {
        ((self.min_overlap_fraction * cols as f64 - 1e-9).ceil() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pearson {
    pub r: f64,
    pub degenerate: bool,
}

/// Pearson correlation of two equally sized pixel sets, each mean-subtracted
/// over the set itself. Degenerate (constant) input yields `r = 0`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Pearson> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::TooFew { needed: 2, have: a.len() });
    }
    Ok(pearson_slices(a, b))
}

fn pearson_slices(a: &[f64], b: &[f64]) -> Pearson {
    const L: usize = 4;
    let nf = a.len() as f64;
    // Independent lanes let the compiler vectorize the reductions.
    let (mut sa, mut sb, mut pk) = ([0.0; L], [0.0; L], [0.0_f64; L]);
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            sa[l] += x[l];
            sb[l] += y[l];
            pk[l] = pk[l].max(x[l].abs()).max(y[l].abs());
        }
    }
    let mut peak = pk.iter().fold(0.0_f64, |m, v| m.max(*v));
    let (mut ta, mut tb) = (sa.iter().sum::<f64>(), sb.iter().sum::<f64>());
    for (x, y) in ra.iter().zip(rb) {
        ta += x;
        tb += y;
        peak = peak.max(x.abs()).max(y.abs());
    }
    let (ma, mb) = (ta / nf, tb / nf);
    let (mut sab, mut saa, mut sbb) = ([0.0; L], [0.0; L], [0.0; L]);
    for (x, y) in a.chunks_exact(L).zip(b.chunks_exact(L)) {
        for l in 0..L {
            let (dx, dy) = (x[l] - ma, y[l] - mb);
            sab[l] += dx * dy;
            saa[l] += dx * dx;
            sbb[l] += dy * dy;
        }
    }
    let (mut xab, mut xaa, mut xbb) = (sab.iter().sum::<f64>(), saa.iter().sum::<f64>(), sbb.iter().sum::<f64>());
    for (x, y) in ra.iter().zip(rb) {
        let (dx, dy) = (x - ma, y - mb);
        xab += dx * dy;
        xaa += dx * dx;
        xbb += dy * dy;
    }
    let floor = 1e-24 * nf * peak * peak;
    if xaa <= floor || xbb <= floor || peak == 0.0 {
        return Pearson { r: 0.0, degenerate: true };
    }
    Pearson { r: (xab / (xaa.sqrt() * xbb.sqrt())).clamp(-1.0, 1.0), degenerate: false }
}

/// Pearson correlation over the columns shared at shift `t`, or `None` when
/// the overlap is below `min_overlap`.
pub fn shifted_pearson(a: &DMatrix<f64>, b: &DMatrix<f64>, t: i64, min_overlap: usize) -> Option<Pearson> {
    let (n1, n2) = (a.ncols() as i64, b.ncols() as i64);
    let c0 = (-t).max(0);
    let c1 = n2.min(n1 - t);
    if c1 - c0 < min_overlap as i64 || a.nrows() != b.nrows() {
        return None;
    }
    let rows = a.nrows();
    let n = rows * (c1 - c0) as usize;
    if n < 2 {
        return None;
    }
    // Column-major storage: a run of whole columns is one contiguous slice.
    let sa = &a.as_slice()[(c0 + t) as usize * rows..(c1 + t) as usize * rows];
    let sb = &b.as_slice()[c0 as usize * rows..c1 as usize * rows];
    Some(pearson_slices(sa, sb))
}

/// Correlation for every shift in `[-t_max, t_max]`; excluded shifts are
/// `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostCurve {
    pub t_max: usize,
    pub values: Vec<Option<Pearson>>,
}

impl CostCurve {
    pub fn compute(a: &DMatrix<f64>, b: &DMatrix<f64>, t_max: usize, min_overlap: usize) -> Self {
        let t = t_max as i64;
        let values = (-t..=t).map(|s| shifted_pearson(a, b, s, min_overlap)).collect();
        CostCurve { t_max, values }
    }

    pub fn shift(&self, i: usize) -> i64 {
        i as i64 - self.t_max as i64
    }

    pub fn value(&self, shift: i64) -> Option<Pearson> {
        let i = shift + self.t_max as i64;
        if i < 0 {
            return None;
        }
        self.values.get(i as usize).copied().flatten()
    }

    /// True when every admissible shift is degenerate.
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().flatten().all(|p| p.degenerate)
    }

    /// Best shift and its correlation. Ties go to the smallest |T|, then to
    /// the negative shift.
    pub fn argmax(&self) -> Option<(i64, f64)> {
        let mut best: Option<(i64, f64)> = None;
        for (i, v) in self.values.iter().enumerate() {
            let Some(p) = v else { continue };
            if p.degenerate {
                continue;
            }
            let s = self.shift(i);
            best = match best {
                None => Some((s, p.r)),
                Some((bs, br)) => {
                    let better = p.r > br || (p.r == br && (s.abs() < bs.abs() || (s.abs() == bs.abs() && s < bs)));
                    if better { Some((s, p.r)) } else { Some((bs, br)) }
                }
            };
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Along-track translation of the second submap's start relative to the
    /// first, m.
    pub translation: f64,
    pub confidence: f64,
    pub accepted: bool,
    /// Shift in columns behind `translation` (rounded for the learned model).
    pub shift: i64,
}

/// Exhaustive Pearson search over column shifts of the raw submap images.
pub fn engineered_register(
    s1: &Radargram,
    s2: &Radargram,
    cfg: &RegistrationConfig,
    gate_threshold: f64,
) -> Result<RegistrationResult> {
    check_pair(s1, s2)?;
    let cols = s1.cols().min(s2.cols());
    let curve = CostCurve::compute(&s1.data, &s2.data, cfg.max_shift(cols), cfg.min_overlap(cols));
    let (shift, r) = curve.argmax().unwrap_or((0, 0.0));
    let confidence = r.clamp(0.0, 1.0);
    Ok(RegistrationResult {
        translation: shift as f64 * s1.spacing,
        confidence,
        accepted: confidence >= gate_threshold,
        shift,
    })
}

fn check_pair(s1: &Radargram, s2: &Radargram) -> Result<()> {
    if s1.rows() != s2.rows() {
        return Err(Error::LengthMismatch { expected: s1.rows(), got: s2.rows() });
    }
    if (s1.spacing - s2.spacing).abs() > 1e-12 * s1.spacing.abs().max(1.0) {
        return Err(Error::Data(format!("column spacings differ: {} vs {}", s1.spacing, s2.spacing)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelKind {
    Identity,
    /// Line detector for structures at `degrees` from horizontal.
    Line { degrees: f64 },
    LaplacianOfGaussian { sigma: f64 },
    RandomSparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub kind: KernelKind,
    /// Square stencil, row-major rows × cols.
    pub weights: DMatrix<f64>,
}

/// Fixed convolutional filter bank producing the feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub kernels: Vec<Kernel>,
}

pub const KERNEL_SIZE: usize = 5;

fn zero_mean_unit(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.mean();
    m.add_scalar_mut(-mean);
    let norm = m.norm();
    if norm > 0.0 {
        m /= norm;
    }
    m
}

fn line_kernel(degrees: f64) -> DMatrix<f64> {
    let h = (KERNEL_SIZE / 2) as f64;
    let th = degrees.to_radians();
    let sigma2 = 0.8_f64.powi(2);
    let m = DMatrix::from_fn(KERNEL_SIZE, KERNEL_SIZE, |r, c| {
        let (dr, dc) = (r as f64 - h, c as f64 - h);
        // Rows grow downward, so the line direction is (cos θ, −sin θ) in (col, row).
        let u = dc * th.sin() + dr * th.cos();
        (1.0 - u * u / sigma2) * (-u * u / (2.0 * sigma2)).exp()
    });
    zero_mean_unit(m)
}

fn log_kernel(sigma: f64) -> DMatrix<f64> {
    let h = (KERNEL_SIZE / 2) as f64;
    let s2 = sigma * sigma;
    let m = DMatrix::from_fn(KERNEL_SIZE, KERNEL_SIZE, |r, c| {
        let q = ((r as f64 - h).powi(2) + (c as f64 - h).powi(2)) / (2.0 * s2);
        -(1.0 - q) * (-q).exp()
    });
    zero_mean_unit(m)
}

fn random_sparse_kernel(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let nnz = rng.random_range(3..=6);
        let mut cells: Vec<usize> = (0..KERNEL_SIZE * KERNEL_SIZE).collect();
        let mut m = DMatrix::zeros(KERNEL_SIZE, KERNEL_SIZE);
        for i in 0..nnz {
            let j = rng.random_range(i..cells.len());
            cells.swap(i, j);
            let w: f64 = rng.sample(StandardNormal);
            m[(cells[i] / KERNEL_SIZE, cells[i] % KERNEL_SIZE)] = w;
        }
        let mean = m.sum() / nnz as f64;
        for &cell in cells.iter().take(nnz) {
            m[(cell / KERNEL_SIZE, cell % KERNEL_SIZE)] -= mean;
        }
        let norm = m.norm();
        if norm > 1e-6 {
            return m / norm;
        }
    }
}

impl FilterBank {
    /// Identity, four line detectors, two LoG scales, then seeded random
    /// sparse stencils up to `k` kernels.
    pub fn standard(k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("filter bank needs k >= 2, got {k}")));
        }
        let mut id = DMatrix::zeros(KERNEL_SIZE, KERNEL_SIZE);
        id[(KERNEL_SIZE / 2, KERNEL_SIZE / 2)] = 1.0;
        let mut kernels = vec![Kernel { kind: KernelKind::Identity, weights: id }];
        for deg in [90.0, 0.0, 45.0, -45.0] {
            kernels.push(Kernel { kind: KernelKind::Line { degrees: deg }, weights: line_kernel(deg) });
        }
        for sigma in [0.7, 1.2] {
            kernels.push(Kernel { kind: KernelKind::LaplacianOfGaussian { sigma }, weights: log_kernel(sigma) });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while kernels.len() < k {
            kernels.push(Kernel { kind: KernelKind::RandomSparse, weights: random_sparse_kernel(&mut rng) });
        }
        kernels.truncate(k);
        Ok(FilterBank { kernels })
    }

    pub fn from_kernels(kernels: Vec<Kernel>) -> Result<Self> {
        if kernels.len() < 2 {
            return Err(Error::Config("filter bank needs at least two kernels".into()));
        }
        let size = kernels[0].weights.nrows();
        if kernels.iter().any(|k| k.weights.nrows() != size || k.weights.ncols() != size) {
            return Err(Error::Config("filter bank kernels must share one square size".into()));
        }
        Ok(FilterBank { kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.weights.nrows())
    }
}

/// Valid-mode 2D convolution (kernel flipped).
pub fn convolve_valid(img: &DMatrix<f64>, kernel: &DMatrix<f64>) -> DMatrix<f64> {
    let (kr, kc) = kernel.shape();
    let (rows, cols) = img.shape();
    if rows < kr || cols < kc {
        return DMatrix::zeros(0, 0);
    }
    let (orow, ocol) = (rows - kr + 1, cols - kc + 1);
    let mut out = DMatrix::zeros(orow, ocol);
    for j in 0..kc {
        for i in 0..kr {
            let w = kernel[(kr - 1 - i, kc - 1 - j)];
            if w == 0.0 {
                continue;
            }
            for c in 0..ocol {
                let src = img.column(c + j);
                let mut dst = out.column_mut(c);
                for r in 0..orow {
                    dst[r] += w * src[r + i];
                }
            }
        }
    }
    out
}

pub fn feature_maps(img: &Radargram, bank: &FilterBank) -> Result<Vec<DMatrix<f64>>> {
    let ks = bank.kernel_size();
    if img.rows() < ks || img.cols() < ks {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than the {ks}x{ks} kernels",
            img.rows(),
            img.cols()
        )));
    }
    Ok(bank.kernels.iter().map(|k| convolve_valid(&img.data, &k.weights)).collect())
}

/// Argmax vector over per-filter cost curves.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrFeat {
    pub shifts: Vec<i64>,
    /// True where the filter's cost curve was degenerate; the entry is 0.
    pub mask: Vec<bool>,
    /// Max over T of the mean unmasked per-filter correlation.
    pub gate_score: f64,
}

impl CorrFeat {
    pub fn as_f64(&self) -> Vec<f64> {
        self.shifts.iter().map(|&s| s as f64).collect()
    }
}

/// Correlation features of two precomputed feature-map stacks. `image_cols`
/// sets the shift range so that both models search the same shifts.
pub fn corr_feat_maps(
    f1: &[DMatrix<f64>],
    f2: &[DMatrix<f64>],
    image_cols: usize,
    cfg: &RegistrationConfig,
) -> CorrFeat {
    let t_max = cfg.max_shift(image_cols);
    let fcols = f1.first().map_or(0, |m| m.ncols()).min(f2.first().map_or(0, |m| m.ncols()));
    let min_overlap = cfg.min_overlap(fcols);
    let curves: Vec<CostCurve> = f1
        .iter()
        .zip(f2)
        .map(|(a, b)| CostCurve::compute(a, b, t_max, min_overlap))
        .collect();
    let mut shifts = Vec::with_capacity(curves.len());
    let mut mask = Vec::with_capacity(curves.len());
    for c in &curves {
        match (c.is_degenerate(), c.argmax()) {
            (false, Some((s, _))) => {
                shifts.push(s);
                mask.push(false);
            }
            _ => {
                shifts.push(0);
                mask.push(true);
            }
        }
    }
    let mut gate_score = 0.0_f64;
    let active: Vec<&CostCurve> = curves.iter().zip(&mask).filter(|(_, m)| !**m).map(|(c, _)| c).collect();
    if !active.is_empty() {
        let t = t_max as i64;
        for s in -t..=t {
            let vals: Vec<f64> = active.iter().filter_map(|c| c.value(s)).map(|p| p.r).collect();
            if vals.len() == active.len() {
                gate_score = gate_score.max(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    CorrFeat { shifts, mask, gate_score }
}

pub fn corr_feat(s1: &Radargram, s2: &Radargram, bank: &FilterBank, cfg: &RegistrationConfig) -> Result<CorrFeat> {
    check_pair(s1, s2)?;
    let f1 = feature_maps(s1, bank)?;
    let f2 = feature_maps(s2, bank)?;
    Ok(corr_feat_maps(&f1, &f2, s1.cols().min(s2.cols()), cfg))
}

/// Correlation gate on feature maps.
pub fn gate(s1: &Radargram, s2: &Radargram, bank: &FilterBank, cfg: &RegistrationConfig, threshold: f64) -> Result<bool> {
    Ok(corr_feat(s1, s2, bank, cfg)?.gate_score >= threshold)
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Huber threshold, m.
    pub delta: f64,
    /// Convergence threshold on the largest parameter change.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { delta: 0.1, tolerance: 1e-8, max_iterations: 500, ridge: 1e-6 }
    }
}

/// `translation = K · Σ wᵢ aᵢ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Metres per column.
    pub pixel_to_meter: f64,
    /// Mean Huber loss on the training pairs, m.
    pub loss: f64,
    pub iterations: usize,
    /// Set when the ridge fallback was needed.
    pub ridge_used: bool,
}

impl LinearHead {
    pub fn predict(&self, argmax: &[f64]) -> f64 {
        let s: f64 = self.weights.iter().zip(argmax).map(|(w, a)| w * a).sum();
        s * self.pixel_to_meter + self.bias
    }
}

/// Fits the linear head by iteratively reweighted least squares on the
/// Huber loss.
pub fn train_linear_head(pairs: &[(Vec<f64>, f64)], pixel_to_meter: f64, cfg: &TrainConfig) -> Result<LinearHead> {
    let k = pairs.first().map_or(0, |p| p.0.len());
    if k == 0 {
        return Err(Error::TooFew { needed: 1, have: 0 });
    }
    if pairs.len() < 10 * k {
        return Err(Error::TooFew { needed: 10 * k, have: pairs.len() });
    }
    if pairs.iter().any(|p| p.0.len() != k) {
        return Err(Error::Data("training pairs have different feature lengths".into()));
    }
    if !(cfg.delta > 0.0 && pixel_to_meter > 0.0) {
        return Err(Error::Config("training: delta and pixel_to_meter must be positive".into()));
    }
    let n = pairs.len();
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j < k { pairs[i].0[j] * pixel_to_meter } else { 1.0 });
    let y = DVector::from_iterator(n, pairs.iter().map(|p| p.1));

    let mut theta = DVector::zeros(k + 1);
    let mut weights = DVector::from_element(n, 1.0);
    let mut ridge_used = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations.max(1) {
        iterations = it + 1;
        let mut xtwx = DMatrix::zeros(k + 1, k + 1);
        let mut xtwy = DVector::zeros(k + 1);
        for i in 0..n {
            let row = x.row(i);
            let w = weights[i];
            xtwx += w * row.transpose() * row;
            xtwy += w * y[i] * row.transpose();
        }
        let eig = xtwx.clone().symmetric_eigen();
        let max_e = eig.eigenvalues.max();
        let min_e = eig.eigenvalues.min();
        if !(max_e > 0.0) || min_e <= 1e-12 * max_e {
            ridge_used = true;
            for j in 0..k {
                xtwx[(j, j)] += cfg.ridge;
            }
        }
        let next = xtwx
            .cholesky()
            .map(|c| c.solve(&xtwy))
            .ok_or_else(|| Error::NotPositiveDefinite("training normal equations".into()))?;
        let change = (&next - &theta).amax();
        theta = next;
        let resid = &x * &theta - &y;
        for i in 0..n {
            let a = resid[i].abs();
            weights[i] = if a <= cfg.delta { 1.0 } else { cfg.delta / a };
        }
        if change < cfg.tolerance {
            break;
        }
    }
    let resid = &x * &theta - &y;
    let loss = resid.iter().map(|r| huber(*r, cfg.delta)).sum::<f64>() / n as f64;
    Ok(LinearHead {
        weights: theta.rows(0, k).iter().copied().collect(),
        bias: theta[k],
        pixel_to_meter,
        loss,
        iterations,
        ridge_used,
    })
}

/// Filter bank, trained head and gate threshold: everything the learned
/// model needs at run time.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedModel {
    pub bank: FilterBank,
    pub head: LinearHead,
    pub gate_threshold: f64,
}

impl LearnedModel {
    /// Registers from precomputed feature maps. The translation is clamped
    /// to the searched shift range.
    pub fn register_maps(
        &self,
        f1: &[DMatrix<f64>],
        f2: &[DMatrix<f64>],
        image_cols: usize,
        cfg: &RegistrationConfig,
    ) -> RegistrationResult {
        let cf = corr_feat_maps(f1, f2, image_cols, cfg);
        self.from_corr_feat(&cf, image_cols, cfg)
    }

    pub fn from_corr_feat(&self, cf: &CorrFeat, image_cols: usize, cfg: &RegistrationConfig) -> RegistrationResult {
        let limit = cfg.max_shift(image_cols) as f64 * self.head.pixel_to_meter;
        let translation = self.head.predict(&cf.as_f64()).clamp(-limit, limit);
        RegistrationResult {
            translation,
            confidence: cf.gate_score.clamp(0.0, 1.0),
            accepted: cf.gate_score >= self.gate_threshold,
            shift: (translation / self.head.pixel_to_meter).round() as i64,
        }
    }
}

pub fn learned_register(
    s1: &Radargram,
    s2: &Radargram,
    model: &LearnedModel,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let cf = corr_feat(s1, s2, &model.bank, cfg)?;
    Ok(model.from_corr_feat(&cf, s1.cols().min(s2.cols()), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn crop(big: &DMatrix<f64>, start: usize, cols: usize) -> Radargram {
        Radargram::new(big.columns(start, cols).into_owned(), 0.25, 0.05)
    }

    #[test]
    fn pearson_identities() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap().r - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-12);
        let c = vec![2.0; 20];
        let p = pearson(&c, &c).unwrap();
        assert!(p.degenerate && p.r == 0.0);
        assert!(pearson(&x[..1], &x[..1]).is_err());
    }

    #[test]
    fn pearson_of_independent_noise_is_small() {
        let a = noise_image(100, 100, 1);
        let b = noise_image(100, 100, 2);
        assert!(pearson(a.as_slice(), b.as_slice()).unwrap().r.abs() < 0.1);
    }

    #[test]
    fn engineered_recovers_shift() {
        let big = noise_image(40, 80, 3);
        let s1 = crop(&big, 10, 41);
        let s2 = crop(&big, 18, 41);
        let r = engineered_register(&s1, &s2, &RegistrationConfig::default(), 0.5).unwrap();
        assert_eq!(r.shift, 8);
        assert!((r.translation - 0.4).abs() < 1e-12);
        assert!((r.confidence - 1.0).abs() < 1e-12);
        let same = engineered_register(&s1, &s1, &RegistrationConfig::default(), 0.5).unwrap();
        assert_eq!(same.shift, 0);
    }

    #[test]
    fn bank_is_zero_mean_except_identity() {
        let bank = FilterBank::standard(16, 9).unwrap();
        assert_eq!(bank.len(), 16);
        for k in &bank.kernels[1..] {
            assert!(k.weights.sum().abs() < 1e-12);
        }
        assert!(FilterBank::standard(1, 9).is_err());
    }

    #[test]
    fn vertical_line_detector_peaks_on_line() {
        let mut img = DMatrix::zeros(12, 15);
        img.column_mut(7).fill(1.0);
        let out = convolve_valid(&img, &line_kernel(90.0));
        let (_, c) = out.row(3).iter().enumerate().fold((0.0, 0), |acc, (i, v)| if *v > acc.0 { (*v, i) } else { acc });
        assert_eq!(c + 2, 7);
        let flat = convolve_valid(&DMatrix::from_element(12, 15, 4.0), &line_kernel(90.0));
        assert!(flat.amax() < 1e-12);
    }

    #[test]
    fn identity_kernel_crops() {
        let img = noise_image(10, 10, 4);
        let bank = FilterBank::standard(2, 0).unwrap();
        let maps = feature_maps(&Radargram::new(img.clone(), 0.25, 0.05), &bank).unwrap();
        assert_eq!(maps[0], img.view((2, 2), (6, 6)).into_owned());
    }

    #[test]
    fn huber_fit_ignores_noise_filter_and_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 4;
        let mut pairs = Vec::new();
        for _ in 0..60 {
            let t = rng.random_range(-10..=10) as f64;
            let mut a = vec![t; k];
            a[3] = rng.random_range(-10..=10) as f64;
            pairs.push((a, t * 0.05));
        }
        let head = train_linear_head(&pairs, 0.05, &TrainConfig::default()).unwrap();
        assert!(head.weights[3].abs() < 0.05);
        let sum: f64 = head.weights[..3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
