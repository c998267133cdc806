//! Token-visibility masks: patch-wise, block-wise and cropping strategies,
//! plus the positional table attached to visible tokens.
//!
//! Masking granularity is the transformer token (one image patch). Masked
//! tokens are dropped from the model input; the sorted visible-index
//! subsequence `tau` identifies which marginal a masked sample comes from.

use rand::Rng;

use crate::compute::{Scalar, Tensor};
use crate::error::{err_fmt, Error, Result};

/// Token-grid dimensions of a patchified image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(err_fmt!(Config, "token grid must be non-empty, got {rows}x{cols}"));
        }
        Ok(TokenGrid { rows, cols })
    }

    /// Grid for an image of `h`×`w` pixels cut into `patch`×`patch` tokens.
    pub fn for_image(h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(err_fmt!(Config, "patch {patch} does not divide image {h}x{w}"));
        }
        TokenGrid::new(h / patch, w / patch)
    }

    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Uniform occlusion of individual tokens.
    Patch,
    /// Union of disjoint b×b tiles.
    Block(usize),
    /// Everything outside one contiguous square is masked.
    Crop,
}

/// A binary token-visibility vector with its strategy, rate and the sorted
/// visible-index subsequence.
#[derive(Debug, Clone)]
pub struct Mask {
    grid: TokenGrid,
    bits: Vec<bool>,
    tau: Vec<usize>,
    strategy: MaskStrategy,
    requested_rate: f64,
    achieved_rate: f64,
}

impl Mask {
    fn from_bits(
        grid: TokenGrid,
        bits: Vec<bool>,
        strategy: MaskStrategy,
        requested_rate: f64,
    ) -> Result<Self> {
        debug_assert_eq!(bits.len(), grid.n_tokens());
        let tau: Vec<usize> =
            bits.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        if tau.is_empty() {
            return Err(Error::FullMask);
        }
        let achieved_rate = 1.0 - tau.len() as f64 / grid.n_tokens() as f64;
        Ok(Mask { grid, bits, tau, strategy, requested_rate, achieved_rate })
    }

    /// Mask with every token visible.
    pub fn identity(grid: TokenGrid) -> Self {
        let n = grid.n_tokens();
        Mask {
            grid,
            bits: vec![true; n],
            tau: (0..n).collect(),
            strategy: MaskStrategy::Patch,
            requested_rate: 0.0,
            achieved_rate: 0.0,
        }
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    /// 1 = visible.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Sorted visible token indices (the subsequence τ).
    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    /// S, the visible-token count.
    pub fn visible_count(&self) -> usize {
        self.tau.len()
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn requested_rate(&self) -> f64 {
        self.requested_rate
    }

    pub fn achieved_rate(&self) -> f64 {
        self.achieved_rate
    }

    pub fn is_identity(&self) -> bool {
        self.tau.len() == self.grid.n_tokens()
    }
}

fn check_rate(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(err_fmt!(Config, "mask rate must be in [0, 1), got {m}"));
    }
    Ok(())
}

/// Round-half-up, the documented tie-break for masked counts.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Mask exactly round(m·N) tokens chosen uniformly without replacement.
pub fn sample_patch_mask<R: Rng + ?Sized>(grid: TokenGrid, m: f64, rng: &mut R) -> Result<Mask> {
    check_rate(m)?;
    let n = grid.n_tokens();
    let masked = round_half_up(m * n as f64);
    let mut bits = vec![true; n];
    for idx in rand::seq::index::sample(rng, n, masked.min(n)) {
        bits[idx] = false;
    }
    Mask::from_bits(grid, bits, MaskStrategy::Patch, m)
}

/// Partition the grid into b×b tiles and mask exactly round(m·n_tiles) of
/// them uniformly; all tokens of a masked tile are masked.
pub fn sample_block_mask<R: Rng + ?Sized>(
    grid: TokenGrid,
    b: usize,
    m: f64,
    rng: &mut R,
) -> Result<Mask> {
    check_rate(m)?;
    if b == 0 || grid.rows % b != 0 || grid.cols % b != 0 {
        return Err(err_fmt!(
            Config,
            "block side {b} does not divide grid {}x{}",
            grid.rows,
            grid.cols
        ));
    }
    let tile_cols = grid.cols / b;
    let tile_rows = grid.rows / b;
    let n_tiles = tile_rows * tile_cols;
    let masked_tiles = round_half_up(m * n_tiles as f64);
    let mut bits = vec![true; grid.n_tokens()];
    for tile in rand::seq::index::sample(rng, n_tiles, masked_tiles.min(n_tiles)) {
        let tr = tile / tile_cols;
        let tc = tile % tile_cols;
        for r in 0..b {
            for c in 0..b {
                bits[(tr * b + r) * grid.cols + (tc * b + c)] = false;
            }
        }
    }
    Mask::from_bits(grid, bits, MaskStrategy::Block(b), m)
}

/// One visible square of side max(1, round(√((1−m)·N))) at a uniformly random
/// in-bounds top-left corner; everything outside it is masked.
pub fn sample_crop_mask<R: Rng + ?Sized>(grid: TokenGrid, m: f64, rng: &mut R) -> Result<Mask> {
    check_rate(m)?;
    let n = grid.n_tokens();
    let side = round_half_up(((1.0 - m) * n as f64).sqrt())
        .max(1)
        .min(grid.rows)
        .min(grid.cols);
    let r0 = rng.gen_range(0..=grid.rows - side);
    let c0 = rng.gen_range(0..=grid.cols - side);
    let mut bits = vec![false; n];
    for r in r0..r0 + side {
        for c in c0..c0 + side {
            bits[r * grid.cols + c] = true;
        }
    }
    Mask::from_bits(grid, bits, MaskStrategy::Crop, m)
}

/// Select the visible subsequence of a token sequence (rows of a 2-D tensor),
/// order-preserving.
pub fn apply_mask<'m, T: Scalar>(
    token_seq: &Tensor<T>,
    mask: &'m Mask,
) -> Result<(Tensor<T>, &'m [usize])> {
    let (rows, _) = token_seq.dims2()?;
    if rows != mask.grid().n_tokens() {
        return Err(err_fmt!(
            Contract,
            "token sequence has {rows} rows, mask grid has {}",
            mask.grid().n_tokens()
        ));
    }
    Ok((token_seq.gather_rows(mask.tau())?, mask.tau()))
}

/// Mask spec string for the CLI: `patch:0.5`, `block2:0.5`, `crop:0.9`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub rate: f64,
}

impl MaskSpec {
    pub fn sample<R: Rng + ?Sized>(&self, grid: TokenGrid, rng: &mut R) -> Result<Mask> {
        match self.strategy {
            MaskStrategy::Patch => sample_patch_mask(grid, self.rate, rng),
            MaskStrategy::Block(b) => sample_block_mask(grid, b, self.rate, rng),
            MaskStrategy::Crop => sample_crop_mask(grid, self.rate, rng),
        }
    }

    /// Validate against a grid without consuming randomness.
    pub fn validate(&self, grid: TokenGrid) -> Result<()> {
        check_rate(self.rate)?;
        if let MaskStrategy::Block(b) = self.strategy {
            if b == 0 || grid.rows % b != 0 || grid.cols % b != 0 {
                return Err(err_fmt!(
                    Config,
                    "block side {b} does not divide grid {}x{}",
                    grid.rows,
                    grid.cols
                ));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for MaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rate) = s
            .split_once(':')
            .ok_or_else(|| err_fmt!(Config, "mask spec '{s}' missing ':rate'"))?;
        let rate: f64 =
            rate.parse().map_err(|_| err_fmt!(Config, "bad mask rate in '{s}'"))?;
        check_rate(rate)?;
        let strategy = if head == "patch" {
            MaskStrategy::Patch
        } else if head == "crop" {
            MaskStrategy::Crop
        } else if let Some(b) = head.strip_prefix("block") {
            let b: usize =
                b.parse().map_err(|_| err_fmt!(Config, "bad block side in '{s}'"))?;
            if b == 0 {
                return Err(err_fmt!(Config, "block side must be >= 1 in '{s}'"));
            }
            MaskStrategy::Block(b)
        } else {
            return Err(err_fmt!(Config, "unknown mask strategy '{head}'"));
        };
        Ok(MaskSpec { strategy, rate })
    }
}

impl std::fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.strategy {
            MaskStrategy::Patch => write!(f, "patch:{}", self.rate),
            MaskStrategy::Block(b) => write!(f, "block{b}:{}", self.rate),
            MaskStrategy::Crop => write!(f, "crop:{}", self.rate),
        }
    }
}

/// Per-token positional embeddings plus one slot for the time token.
///
/// Row `i < n_tokens` is attached to token `i`; row `n_tokens` belongs to the
/// time token, which is never maskable.
pub struct PositionalTable<T> {
    table: Tensor<T>,
}

impl<T: Scalar> PositionalTable<T> {
    /// Learnable init: truncated normal, std 0.02.
    pub fn learned<R: Rng + ?Sized>(grid: TokenGrid, dim: usize, rng: &mut R) -> Self {
        let table = Tensor::trunc_normal(vec![grid.n_tokens() + 1, dim], 0.02, rng);
        PositionalTable { table }
    }

    /// Frozen init: fixed sinusoid over the flat token index.
    pub fn sinusoidal(grid: TokenGrid, dim: usize) -> Self {
        let n = grid.n_tokens() + 1;
        let mut data = Vec::with_capacity(n * dim);
        let half = dim / 2;
        for i in 0..n {
            for j in 0..dim {
                let (k, is_cos) = if j < half { (j, false) } else { (j - half, true) };
                let freq = (10000f64).powf(-(k as f64) / half as f64);
                let arg = i as f64 * freq;
                data.push(T::from_f64(if is_cos { arg.cos() } else { arg.sin() }));
            }
        }
        PositionalTable { table: Tensor::new(vec![n, dim], data).expect("sized above") }
    }

    pub fn time_slot(grid: TokenGrid) -> usize {
        grid.n_tokens()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patch_mask_exact_count() {
        let grid = TokenGrid::new(8, 8).unwrap();
        let m = sample_patch_mask(grid, 0.75, &mut rng(1)).unwrap();
        assert_eq!(m.visible_count(), 16);
        assert!((m.achieved_rate() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn patch_mask_rate_zero_is_identity() {
        let grid = TokenGrid::new(8, 8).unwrap();
        let m = sample_patch_mask(grid, 0.0, &mut rng(2)).unwrap();
        assert_eq!(m.tau(), (0..64).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn patch_mask_rejects_bad_rate() {
        let grid = TokenGrid::new(4, 4).unwrap();
        assert!(matches!(sample_patch_mask(grid, 1.0, &mut rng(0)), Err(Error::Config(_))));
        assert!(matches!(sample_patch_mask(grid, -0.1, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn patch_mask_uniformity() {
        // m=0.5 on 8x8: per-token masked frequency 0.5 +- 0.02 over 10k draws
        let grid = TokenGrid::new(8, 8).unwrap();
        let mut r = rng(3);
        let mut masked_counts = vec![0u32; 64];
        let draws = 10_000;
        for _ in 0..draws {
            let m = sample_patch_mask(grid, 0.5, &mut r).unwrap();
            for (i, &vis) in m.bits().iter().enumerate() {
                if !vis {
                    masked_counts[i] += 1;
                }
            }
        }
        for &c in &masked_counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn block_mask_tile_counts() {
        let grid = TokenGrid::new(8, 8).unwrap();
        let m = sample_block_mask(grid, 2, 0.5, &mut rng(4)).unwrap();
        assert_eq!(m.visible_count(), 32); // 8 of 16 tiles -> 32 tokens masked
    }

    #[test]
    fn block_mask_is_tile_union() {
        let grid = TokenGrid::new(8, 8).unwrap();
        for seed in 0..50 {
            let m = sample_block_mask(grid, 2, 0.5, &mut rng(seed)).unwrap();
            for r in (0..8).step_by(2) {
                for c in (0..8).step_by(2) {
                    let vals: Vec<bool> = (0..2)
                        .flat_map(|dr| (0..2).map(move |dc| (dr, dc)))
                        .map(|(dr, dc)| m.bits()[(r + dr) * 8 + (c + dc)])
                        .collect();
                    assert!(vals.iter().all(|&v| v == vals[0]), "tile not uniform");
                }
            }
        }
    }

    #[test]
    fn block_full_mask_rejected() {
        // single whole-grid tile, m rounding to 1 masked tile -> nothing visible
        let grid = TokenGrid::new(4, 4).unwrap();
        assert!(matches!(sample_block_mask(grid, 4, 0.5, &mut rng(5)), Err(Error::FullMask)));
    }

    #[test]
    fn block_side_must_divide() {
        let grid = TokenGrid::new(8, 8).unwrap();
        assert!(matches!(sample_block_mask(grid, 3, 0.5, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn block1_equals_patch_under_same_rng() {
        let grid = TokenGrid::new(8, 8).unwrap();
        for seed in 0..200 {
            let a = sample_patch_mask(grid, 0.43, &mut rng(seed)).unwrap();
            let b = sample_block_mask(grid, 1, 0.43, &mut rng(seed)).unwrap();
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn crop_mask_arithmetic() {
        // 16x16, m=0.9: side = round(sqrt(25.6)) = 5 -> 25 visible
        let grid = TokenGrid::new(16, 16).unwrap();
        let m = sample_crop_mask(grid, 0.9, &mut rng(6)).unwrap();
        assert_eq!(m.visible_count(), 25);
        assert!((m.achieved_rate() - (1.0 - 25.0 / 256.0)).abs() < 1e-12);
    }

    #[test]
    fn crop_mask_full_visibility_at_rate_zero() {
        let grid = TokenGrid::new(16, 16).unwrap();
        let m = sample_crop_mask(grid, 0.0, &mut rng(7)).unwrap();
        assert_eq!(m.visible_count(), 256);
        assert_eq!(m.achieved_rate(), 0.0);
    }

    #[test]
    fn crop_mask_visible_set_is_square_and_in_bounds() {
        let grid = TokenGrid::new(16, 16).unwrap();
        let mut r = rng(8);
        for _ in 0..10_000 {
            let m = sample_crop_mask(grid, 0.9, &mut r).unwrap();
            let rows: Vec<usize> = m.tau().iter().map(|i| i / 16).collect();
            let cols: Vec<usize> = m.tau().iter().map(|i| i % 16).collect();
            let (rmin, rmax) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
            let (cmin, cmax) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
            assert_eq!(rmax - rmin + 1, 5);
            assert_eq!(cmax - cmin + 1, 5);
            assert_eq!(m.visible_count(), 25);
            assert!(rmax < 16 && cmax < 16);
        }
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let grid = TokenGrid::new(8, 8).unwrap();
        for seed in 0..20 {
            let a = sample_patch_mask(grid, 0.6, &mut rng(seed)).unwrap();
            let b = sample_patch_mask(grid, 0.6, &mut rng(seed)).unwrap();
            assert_eq!(a.bits(), b.bits());
            let a = sample_crop_mask(grid, 0.6, &mut rng(seed)).unwrap();
            let b = sample_crop_mask(grid, 0.6, &mut rng(seed)).unwrap();
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn apply_mask_selects_subsequence() {
        let grid = TokenGrid::new(1, 3).unwrap();
        let mask = Mask::from_bits(
            grid,
            vec![true, false, true],
            MaskStrategy::Patch,
            1.0 / 3.0,
        )
        .unwrap();
        let seq = Tensor::new(vec![3, 2], vec![1.0f32, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let (vis, tau) = apply_mask(&seq, &mask).unwrap();
        assert_eq!(tau, &[0, 2]);
        assert_eq!(vis.data(), &[1.0, 10.0, 3.0, 30.0]);

        let bad = Tensor::<f32>::zeros(vec![4, 2]);
        assert!(matches!(apply_mask(&bad, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_mask_roundtrip() {
        let grid = TokenGrid::new(2, 2).unwrap();
        let mask = Mask::identity(grid);
        let seq = Tensor::new(vec![4, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (vis, _) = apply_mask(&seq, &mask).unwrap();
        assert_eq!(vis.data(), seq.data());
    }

    #[test]
    fn mask_spec_parsing() {
        let s: MaskSpec = "patch:0.5".parse().unwrap();
        assert_eq!(s, MaskSpec { strategy: MaskStrategy::Patch, rate: 0.5 });
        let s: MaskSpec = "block2:0.5".parse().unwrap();
        assert_eq!(s, MaskSpec { strategy: MaskStrategy::Block(2), rate: 0.5 });
        let s: MaskSpec = "block4:0.9".parse().unwrap();
        assert_eq!(s, MaskSpec { strategy: MaskStrategy::Block(4), rate: 0.9 });
        let s: MaskSpec = "crop:0.9".parse().unwrap();
        assert_eq!(s, MaskSpec { strategy: MaskStrategy::Crop, rate: 0.9 });
        assert!("block:0.5".parse::<MaskSpec>().is_err());
        assert!("patch".parse::<MaskSpec>().is_err());
        assert!("patch:1.0".parse::<MaskSpec>().is_err());
        assert!("towers:0.5".parse::<MaskSpec>().is_err());
        // round trip through Display
        for s in ["patch:0.5", "block2:0.5", "crop:0.9"] {
            let spec: MaskSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }

    #[test]
    fn positional_table_dimensions() {
        let grid = TokenGrid::new(2, 2).unwrap();
        let t = PositionalTable::<f32>::learned(grid, 8, &mut rng(0)).into_tensor();
        assert_eq!(t.shape(), &[5, 8]);
        let t = PositionalTable::<f32>::sinusoidal(grid, 8).into_tensor();
        assert_eq!(t.shape(), &[5, 8]);
        assert_eq!(PositionalTable::<f32>::time_slot(grid), 4);
    }

    #[test]
    fn tau_is_strictly_increasing() {
        let grid = TokenGrid::new(8, 8).unwrap();
        let mut r = rng(11);
        for _ in 0..100 {
            let m = sample_block_mask(grid, 2, 0.7, &mut r).unwrap();
            assert!(m.tau().windows(2).all(|w| w[0] < w[1]));
            assert!(m.tau().iter().all(|&i| i < 64));
            assert_eq!(m.visible_count(), m.bits().iter().filter(|&&b| b).count());
        }
    }
}
