//! U-ViT-style noise-prediction backbone operating on visible tokens plus a
//! time token.
//!
//! Pre-norm transformer blocks with long skip connections: block k of the
//! first half is paired with block depth−1−k of the second half through a
//! concat + linear merge (odd depth leaves the middle block unpaired). The
//! output head is norm + linear only, no trailing convolutions. Time enters
//! as one extra token; positional rows H[τ] attach to the visible tokens so
//! the model can tell marginals apart.

use rand::Rng;

use crate::compute::{NodeId, ParamSet, Scalar, Tape, Tensor};
use crate::error::{err_fmt, Error, Result};
use crate::masking::{Mask, PositionalTable, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    SinusoidalFrozen,
}

impl std::str::FromStr for Positional {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Positional::Learned),
            "sinusoidal-frozen" => Ok(Positional::SinusoidalFrozen),
            other => Err(err_fmt!(Config, "unknown positional mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Tiny,
    MaskDmS,
    MaskDmB,
}

impl std::str::FromStr for ModelPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ModelPreset::Tiny),
            "maskdm-s" => Ok(ModelPreset::MaskDmS),
            "maskdm-b" => Ok(ModelPreset::MaskDmB),
            other => Err(err_fmt!(Config, "unknown model preset '{other}'")),
        }
    }
}

impl std::fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelPreset::Tiny => write!(f, "tiny"),
            ModelPreset::MaskDmS => write!(f, "maskdm-s"),
            ModelPreset::MaskDmB => write!(f, "maskdm-b"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub positional: Positional,
}

impl UViTConfig {
    /// Architecture preset; image size and channels bind to the dataset via
    /// [`UViTConfig::for_image`].
    pub fn preset(preset: ModelPreset) -> UViTConfig {
        let (depth, dim, mlp_dim, heads, patch) = match preset {
            ModelPreset::Tiny => (4, 64, 128, 4, 2),
            ModelPreset::MaskDmS => (13, 512, 2048, 8, 4),
            ModelPreset::MaskDmB => (12, 768, 3172, 12, 4),
        };
        UViTConfig {
            depth,
            dim,
            mlp_dim,
            heads,
            patch,
            channels: 3,
            image_h: 64,
            image_w: 64,
            positional: Positional::Learned,
        }
    }

    pub fn for_image(mut self, channels: usize, h: usize, w: usize) -> Self {
        self.channels = channels;
        self.image_h = h;
        self.image_w = w;
        self
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch = patch;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_positional(mut self, positional: Positional) -> Self {
        self.positional = positional;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(err_fmt!(Config, "depth must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(err_fmt!(Config, "heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.dim % 2 != 0 {
            return Err(err_fmt!(Config, "dim must be even for the sinusoidal time features"));
        }
        if self.patch == 0
            || self.image_h % self.patch != 0
            || self.image_w % self.patch != 0
        {
            return Err(err_fmt!(
                Config,
                "patch {} does not divide image {}x{}",
                self.patch,
                self.image_h,
                self.image_w
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid::for_image(self.image_h, self.image_w, self.patch).expect("validated")
    }

    pub fn n_tokens(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Flattened patch length p²·C.
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }


    /// Number of concat+linear skip merges (second-half blocks).
    fn n_merges(&self) -> usize {
        self.depth / 2
    }
}

/// Initialize all learnable tensors: truncated normal (std 0.02) for
/// embeddings and linear weights, zeros for biases and the output head.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &UViTConfig, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let dim = cfg.dim;
    let td = cfg.token_dim();
    let tn = |shape: Vec<usize>, rng: &mut R| Tensor::trunc_normal(shape, 0.02, rng);

    p.insert("patch_embed.w", tn(vec![td, dim], rng));
    p.insert("patch_embed.b", Tensor::zeros(vec![dim]));
    p.insert("time_mlp.w1", tn(vec![dim, dim], rng));
    p.insert("time_mlp.b1", Tensor::zeros(vec![dim]));
    p.insert("time_mlp.w2", tn(vec![dim, dim], rng));
    p.insert("time_mlp.b2", Tensor::zeros(vec![dim]));
    match cfg.positional {
        Positional::Learned => {
            p.insert("pos_table", PositionalTable::learned(cfg.grid(), dim, rng).into_tensor());
        }
        Positional::SinusoidalFrozen => {
            p.insert_with(
                "pos_table",
                PositionalTable::sinusoidal(cfg.grid(), dim).into_tensor(),
                false,
            );
        }
    }
    for k in 0..cfg.depth {
        p.insert(&format!("block{k}.norm1.g"), Tensor::full(vec![dim], T::ONE));
        p.insert(&format!("block{k}.norm1.b"), Tensor::zeros(vec![dim]));
        p.insert(&format!("block{k}.qkv.w"), tn(vec![dim, 3 * dim], rng));
        p.insert(&format!("block{k}.qkv.b"), Tensor::zeros(vec![3 * dim]));
        p.insert(&format!("block{k}.proj.w"), tn(vec![dim, dim], rng));
        p.insert(&format!("block{k}.proj.b"), Tensor::zeros(vec![dim]));
        p.insert(&format!("block{k}.norm2.g"), Tensor::full(vec![dim], T::ONE));
        p.insert(&format!("block{k}.norm2.b"), Tensor::zeros(vec![dim]));
        p.insert(&format!("block{k}.mlp.w1"), tn(vec![dim, cfg.mlp_dim], rng));
        p.insert(&format!("block{k}.mlp.b1"), Tensor::zeros(vec![cfg.mlp_dim]));
        p.insert(&format!("block{k}.mlp.w2"), tn(vec![cfg.mlp_dim, dim], rng));
        p.insert(&format!("block{k}.mlp.b2"), Tensor::zeros(vec![dim]));
    }
    for j in 0..cfg.n_merges() {
        p.insert(&format!("merge{j}.w"), tn(vec![2 * dim, dim], rng));
        p.insert(&format!("merge{j}.b"), Tensor::zeros(vec![dim]));
    }
    p.insert("out_norm.g", Tensor::full(vec![dim], T::ONE));
    p.insert("out_norm.b", Tensor::zeros(vec![dim]));
    p.insert("head.w", Tensor::zeros(vec![dim, td]));
    p.insert("head.b", Tensor::zeros(vec![td]));
    Ok(p)
}

/// Cut a C×H×W image into row-major tokens, each the flattened p×p×C patch
/// (channel-major within the token).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let dims = image.shape().to_vec();
    let [c, h, w] = dims.as_slice() else {
        return Err(err_fmt!(Shape, "patchify expects C x H x W, got {dims:?}"));
    };
    let (c, h, w) = (*c, *h, *w);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(err_fmt!(Config, "patch {patch} does not divide image {h}x{w}"));
    }
    let (gr, gc) = (h / patch, w / patch);
    let td = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(gr * gc * td);
    for tr in 0..gr {
        for tc in 0..gc {
            for ch in 0..c {
                for py in 0..patch {
                    let y = tr * patch + py;
                    let row = &src[ch * h * w + y * w + tc * patch..];
                    data.extend_from_slice(&row[..patch]);
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, td], data)
}

/// Inverse of [`patchify`]; with a mask, only visible tokens are provided and
/// masked grid slots are filled with `fill`.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    grid: TokenGrid,
    patch: usize,
    channels: usize,
    fill: T,
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    let (rows, td) = tokens.dims2()?;
    if td != patch * patch * channels {
        return Err(err_fmt!(Shape, "token dim {td} != {patch}x{patch}x{channels}"));
    }
    let expected = match mask {
        Some(m) => {
            if m.grid() != grid {
                return Err(err_fmt!(Contract, "mask grid does not match"));
            }
            m.visible_count()
        }
        None => grid.n_tokens(),
    };
    if rows != expected {
        return Err(err_fmt!(Contract, "got {rows} tokens, expected {expected}"));
    }
    let (h, w) = (grid.rows * patch, grid.cols * patch);
    let mut img = vec![fill; channels * h * w];
    let full: Vec<usize>;
    let slots: &[usize] = match mask {
        Some(m) => m.tau(),
        None => {
            full = (0..grid.n_tokens()).collect();
            &full
        }
    };
    for (token, &slot) in tokens.data().chunks_exact(td).zip(slots.iter()) {
        let (tr, tc) = (slot / grid.cols, slot % grid.cols);
        let mut i = 0;
        for ch in 0..channels {
            for py in 0..patch {
                let y = tr * patch + py;
                let dst = ch * h * w + y * w + tc * patch;
                img[dst..dst + patch].copy_from_slice(&token[i..i + patch]);
                i += patch;
            }
        }
    }
    Tensor::new(vec![channels, h, w], img)
}

/// Sinusoidal features for step `t`: [sin(t·f_k), cos(t·f_k)] with
/// f_k = 10000^(−k/half), k < half = dim/2.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(err_fmt!(Config, "time embedding dim must be even, got {dim}"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (10000f64).powf(-(k as f64) / half as f64);
        data.push(T::from_f64((t as f64 * freq).sin()));
    }
    for k in 0..half {
        let freq = (10000f64).powf(-(k as f64) / half as f64);
        data.push(T::from_f64((t as f64 * freq).cos()));
    }
    Tensor::new(vec![1, dim], data)
}

struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    fn register<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Self {
        let ids = params
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.trainable {
                    tape.param(i, &e.tensor)
                } else {
                    tape.leaf(e.tensor.clone())
                }
            })
            .collect();
        ParamNodes { ids }
    }

    fn get<T: Scalar>(&self, params: &ParamSet<T>, name: &str) -> NodeId {
        self.ids[params.index_of(name).unwrap_or_else(|| panic!("missing param {name}"))]
    }
}

/// One transformer sequence per sample: `visible_tokens[b]` is S_b×token_dim
/// with positions `taus[b]` and timestep `ts[b]`.
pub struct BatchInput<'a, T: Scalar> {
    pub visible_tokens: Vec<Tensor<T>>,
    pub taus: Vec<&'a [usize]>,
    pub ts: Vec<usize>,
}

/// Run the backbone over a batch on an existing tape. The returned node holds
/// the concatenated per-visible-token noise predictions (ΣS_b × token_dim),
/// sample-major in input order.
pub fn predict_noise_batch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &UViTConfig,
    input: &BatchInput<'_, T>,
) -> Result<NodeId> {
    let b = input.visible_tokens.len();
    if b == 0 || b != input.taus.len() || b != input.ts.len() {
        return Err(err_fmt!(Contract, "batch arrays disagree or empty"));
    }
    let td = cfg.token_dim();
    let mut seq_lens = Vec::with_capacity(b);
    let mut cat_tokens: Vec<T> = Vec::new();
    let mut cat_taus: Vec<usize> = Vec::new();
    for (tokens, tau) in input.visible_tokens.iter().zip(input.taus.iter()) {
        let (s, d) = tokens.dims2()?;
        if s == 0 {
            return Err(Error::FullMask);
        }
        if d != td || s != tau.len() {
            return Err(err_fmt!(
                Contract,
                "sample has {s} tokens of dim {d}, tau len {}, want dim {td}",
                tau.len()
            ));
        }
        if tau.iter().any(|&i| i >= cfg.n_tokens()) {
            return Err(err_fmt!(Contract, "tau index out of range"));
        }
        seq_lens.push(s);
        cat_tokens.extend_from_slice(tokens.data());
        cat_taus.extend_from_slice(tau);
    }
    let total_s: usize = seq_lens.iter().sum();

    let pn = ParamNodes::register(tape, params);
    let g = |name: &str| pn.get(params, name);

    // token embedding plus positional rows
    let tokens = tape.leaf(Tensor::new(vec![total_s, td], cat_tokens)?);
    let proj = tape.matmul(tokens, g("patch_embed.w"))?;
    let proj = tape.add_bias(proj, g("patch_embed.b"))?;
    let pos = tape.gather_rows(g("pos_table"), &cat_taus)?;
    let emb = tape.add(proj, pos)?;

    // time tokens: sinusoid -> 2-layer MLP, plus the table's time slot
    let mut sin_data = Vec::with_capacity(b * cfg.dim);
    for &t in &input.ts {
        sin_data.extend_from_slice(time_embedding::<T>(t, cfg.dim)?.data());
    }
    let sins = tape.leaf(Tensor::new(vec![b, cfg.dim], sin_data)?);
    let t1 = tape.matmul(sins, g("time_mlp.w1"))?;
    let t1 = tape.add_bias(t1, g("time_mlp.b1"))?;
    let t1 = tape.gelu(t1)?;
    let t2 = tape.matmul(t1, g("time_mlp.w2"))?;
    let t2 = tape.add_bias(t2, g("time_mlp.b2"))?;
    let time_slot = vec![cfg.n_tokens(); b];
    let tpos = tape.gather_rows(g("pos_table"), &time_slot)?;
    let time_tokens = tape.add(t2, tpos)?;

    // interleave: [time_b ; tokens_b] per sample
    let mut seqs = Vec::with_capacity(2 * b);
    let mut off = 0;
    for (bi, &s) in seq_lens.iter().enumerate() {
        let tt = tape.slice_rows(time_tokens, bi, 1)?;
        let tk = tape.slice_rows(emb, off, s)?;
        seqs.push(tt);
        seqs.push(tk);
        off += s;
    }
    let mut x = tape.concat_rows(&seqs)?;

    // per-sample row offsets inside the packed matrix
    let mut row_offsets = Vec::with_capacity(b);
    let mut acc = 0;
    for &s in &seq_lens {
        row_offsets.push(acc);
        acc += s + 1;
    }

    let half = cfg.depth / 2;
    let mut skips: Vec<NodeId> = Vec::with_capacity(half);
    let mut merge_idx = 0;
    for k in 0..cfg.depth {
        if k >= cfg.depth - half {
            let skip = skips.pop().expect("skip stack");
            let cat = tape.concat_cols(&[x, skip])?;
            let merged = tape.matmul(cat, g(&format!("merge{merge_idx}.w")))?;
            x = tape.add_bias(merged, g(&format!("merge{merge_idx}.b")))?;
            merge_idx += 1;
        }
        x = transformer_block(tape, &pn, params, cfg, k, x, &row_offsets, &seq_lens)?;
        if k < half {
            skips.push(x);
        }
    }

    let out = tape.layer_norm(x, g("out_norm.g"), g("out_norm.b"))?;
    let out = tape.matmul(out, g("head.w"))?;
    let out = tape.add_bias(out, g("head.b"))?;

    // drop time rows, keep per-sample token predictions in order
    let mut parts = Vec::with_capacity(b);
    for (bi, &s) in seq_lens.iter().enumerate() {
        parts.push(tape.slice_rows(out, row_offsets[bi] + 1, s)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

#[allow(clippy::too_many_arguments)]
fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    pn: &ParamNodes,
    params: &ParamSet<T>,
    cfg: &UViTConfig,
    k: usize,
    x: NodeId,
    row_offsets: &[usize],
    seq_lens: &[usize],
) -> Result<NodeId> {
    let g = |name: &str| pn.get(params, name);

    let h = tape.layer_norm(x, g(&format!("block{k}.norm1.g")), g(&format!("block{k}.norm1.b")))?;
    let qkv = tape.matmul(h, g(&format!("block{k}.qkv.w")))?;
    let qkv = tape.add_bias(qkv, g(&format!("block{k}.qkv.b")))?;

    let spans: Vec<(usize, usize)> =
        row_offsets.iter().zip(seq_lens.iter()).map(|(&o, &s)| (o, s + 1)).collect();
    let attn_out = tape.attention(qkv, cfg.heads, &spans)?;
    let proj = tape.matmul(attn_out, g(&format!("block{k}.proj.w")))?;
    let proj = tape.add_bias(proj, g(&format!("block{k}.proj.b")))?;
    let x = tape.add(x, proj)?;

    let h2 = tape.layer_norm(x, g(&format!("block{k}.norm2.g")), g(&format!("block{k}.norm2.b")))?;
    let m1 = tape.matmul(h2, g(&format!("block{k}.mlp.w1")))?;
    let m1 = tape.add_bias(m1, g(&format!("block{k}.mlp.b1")))?;
    let m1 = tape.gelu(m1)?;
    let m2 = tape.matmul(m1, g(&format!("block{k}.mlp.w2")))?;
    let m2 = tape.add_bias(m2, g(&format!("block{k}.mlp.b2")))?;
    tape.add(x, m2)
}

/// Inference-only single-sample forward: predictions aligned with `tau`.
/// When `tau` covers all tokens this is the unmasked fine-tuning path.
pub fn predict_noise<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &UViTConfig,
    visible_tokens: &Tensor<T>,
    tau: &[usize],
    t: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let input = BatchInput {
        visible_tokens: vec![visible_tokens.clone()],
        taus: vec![tau],
        ts: vec![t],
    };
    let out = predict_noise_batch(&mut tape, params, cfg, &input)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> UViTConfig {
        UViTConfig::preset(ModelPreset::Tiny).for_image(1, 4, 4)
    }

    #[test]
    fn patchify_single_token() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let t = patchify(&img, 4).unwrap();
        assert_eq!(t.shape(), &[1, 16]);
        assert_eq!(t.data(), img.data());
    }

    #[test]
    fn patchify_unpatchify_roundtrip() {
        let mut r = rng(1);
        let img = Tensor::<f32>::randn(vec![3, 8, 8], &mut r);
        let t = patchify(&img, 4).unwrap();
        assert_eq!(t.shape(), &[4, 48]);
        let grid = TokenGrid::for_image(8, 8, 4).unwrap();
        let back = unpatchify(&t, grid, 4, 3, 0.0, None).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patchify_token3_is_bottom_right_block() {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f32).collect()).unwrap();
        let t = patchify(&img, 4).unwrap();
        let tok3 = &t.data()[3 * 16..4 * 16];
        let mut want = Vec::new();
        for y in 4..8 {
            for x in 4..8 {
                want.push((y * 8 + x) as f32);
            }
        }
        assert_eq!(tok3, want.as_slice());
    }

    #[test]
    fn unpatchify_with_mask_fills() {
        let grid = TokenGrid::new(2, 2).unwrap();
        let mut r = rng(2);
        let mask = crate::masking::sample_patch_mask(grid, 0.75, &mut r).unwrap();
        assert_eq!(mask.visible_count(), 1);
        let tokens = Tensor::full(vec![1, 4], 0.5f32);
        let img = unpatchify(&tokens, grid, 2, 1, -0.25, Some(&mask)).unwrap();
        let visible_slot = mask.tau()[0];
        let (tr, tc) = (visible_slot / 2, visible_slot % 2);
        for y in 0..4 {
            for x in 0..4 {
                let inside = (y / 2, x / 2) == (tr, tc);
                let want = if inside { 0.5 } else { -0.25 };
                assert_eq!(img.data()[y * 4 + x], want, "pixel {y},{x}");
            }
        }
    }

    #[test]
    fn unpatchify_count_mismatch_rejected() {
        let grid = TokenGrid::new(2, 2).unwrap();
        let tokens = Tensor::<f32>::zeros(vec![3, 4]);
        assert!(matches!(
            unpatchify(&tokens, grid, 2, 1, 0.0, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn time_embedding_deterministic_and_distinct() {
        let a = time_embedding::<f64>(5, 8).unwrap();
        let b = time_embedding::<f64>(5, 8).unwrap();
        assert_eq!(a.data(), b.data());
        let c = time_embedding::<f64>(6, 8).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn time_embedding_matches_sinusoid_oracle() {
        // dim=8, t=5: freq_k = 10000^(-k/4)
        let e = time_embedding::<f64>(5, 8).unwrap();
        for k in 0..4 {
            let f = (10000f64).powf(-(k as f64) / 4.0);
            assert!((e.data()[k] - (5.0 * f).sin()).abs() < 1e-15);
            assert!((e.data()[4 + k] - (5.0 * f).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn structural_param_counts_match_reported_sizes() {
        let s = UViTConfig::preset(ModelPreset::MaskDmS).for_image(3, 64, 64);
        let p: ParamSet<f32> = init_params(&s, &mut rng(0)).unwrap();
        let n = p.total_elements() as f64;
        assert!((n - 44e6).abs() / 44e6 < 0.05, "MaskDM-S params {n}");

        let b = UViTConfig::preset(ModelPreset::MaskDmB).for_image(3, 256, 256);
        let p: ParamSet<f32> = init_params(&b, &mut rng(0)).unwrap();
        let n = p.total_elements() as f64;
        assert!((n - 102e6).abs() / 102e6 < 0.05, "MaskDM-B params {n}");
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let params: ParamSet<f32> = init_params(&cfg, &mut rng(3)).unwrap();
        let mut r = rng(4);
        let tokens = Tensor::<f32>::randn(vec![3, cfg.token_dim()], &mut r);
        let tau = [0usize, 2, 3];
        let out1 = predict_noise(&params, &cfg, &tokens, &tau, 7).unwrap();
        let out2 = predict_noise(&params, &cfg, &tokens, &tau, 7).unwrap();
        assert_eq!(out1.shape(), &[3, cfg.token_dim()]);
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn empty_tau_is_full_mask_error() {
        let cfg = tiny_cfg();
        let params: ParamSet<f32> = init_params(&cfg, &mut rng(3)).unwrap();
        let tokens = Tensor::<f32>::zeros(vec![0, cfg.token_dim()]);
        let r = predict_noise(&params, &cfg, &tokens, &[], 1);
        assert!(matches!(r, Err(Error::FullMask)));
    }

    #[test]
    fn permutation_equivariance_with_zero_positional() {
        let cfg = tiny_cfg();
        let mut params: ParamSet<f32> = init_params(&cfg, &mut rng(5)).unwrap();
        // head is zero-initialized; give it signal so outputs are non-trivial
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) = Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.1, &mut rng(6));
        let pt = params.index_of("pos_table").unwrap();
        *params.get_mut(pt) = Tensor::zeros(vec![cfg.n_tokens() + 1, cfg.dim]);

        let mut r = rng(7);
        let tokens = Tensor::<f32>::randn(vec![4, cfg.token_dim()], &mut r);
        let tau = [0usize, 1, 2, 3];
        let out = predict_noise(&params, &cfg, &tokens, &tau, 3).unwrap();

        // permute rows 0..4 by [2,0,3,1]
        let perm = [2usize, 0, 3, 1];
        let ptokens = tokens.gather_rows(&perm).unwrap();
        let pout = predict_noise(&params, &cfg, &ptokens, &tau, 3).unwrap();
        let want = out.gather_rows(&perm).unwrap();
        for (a, b) in pout.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 2e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn active_positional_follows_permutation() {
        let cfg = tiny_cfg();
        let mut params: ParamSet<f32> = init_params(&cfg, &mut rng(8)).unwrap();
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) = Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.1, &mut rng(9));

        let mut r = rng(10);
        let tokens = Tensor::<f32>::randn(vec![3, cfg.token_dim()], &mut r);
        let tau = [0usize, 1, 3];
        let out = predict_noise(&params, &cfg, &tokens, &tau, 2).unwrap();

        let perm = [1usize, 2, 0];
        let ptokens = tokens.gather_rows(&perm).unwrap();
        let ptau: Vec<usize> = perm.iter().map(|&i| tau[i]).collect();
        let pout = predict_noise(&params, &cfg, &ptokens, &ptau, 2).unwrap();
        let want = out.gather_rows(&perm).unwrap();
        for (a, b) in pout.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 2e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zeroing_merges_changes_output() {
        let cfg = tiny_cfg();
        let mut params: ParamSet<f32> = init_params(&cfg, &mut rng(11)).unwrap();
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) = Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.1, &mut rng(12));
        let mut r = rng(13);
        let tokens = Tensor::<f32>::randn(vec![4, cfg.token_dim()], &mut r);
        let tau = [0usize, 1, 2, 3];
        let out = predict_noise(&params, &cfg, &tokens, &tau, 5).unwrap();

        for j in 0..cfg.depth / 2 {
            let wi = params.index_of(&format!("merge{j}.w")).unwrap();
            *params.get_mut(wi) = Tensor::zeros(vec![2 * cfg.dim, cfg.dim]);
        }
        let ablated = predict_noise(&params, &cfg, &tokens, &tau, 5).unwrap();
        assert!(out.data().iter().zip(ablated.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn full_token_input_works_for_any_masked_training_history() {
        // params trained under any mask accept full-token input unchanged: the
        // positional table always covers all positions
        let cfg = tiny_cfg();
        let params: ParamSet<f32> = init_params(&cfg, &mut rng(14)).unwrap();
        let mut r = rng(15);
        let full = Tensor::<f32>::randn(vec![cfg.n_tokens(), cfg.token_dim()], &mut r);
        let tau: Vec<usize> = (0..cfg.n_tokens()).collect();
        let out = predict_noise(&params, &cfg, &full, &tau, 9).unwrap();
        assert_eq!(out.shape(), &[cfg.n_tokens(), cfg.token_dim()]);
    }

    #[test]
    fn batch_matches_single_runs() {
        let cfg = tiny_cfg();
        let params: ParamSet<f64> = init_params(&cfg, &mut rng(16)).unwrap();
        let mut r = rng(17);
        let a = Tensor::<f64>::randn(vec![2, cfg.token_dim()], &mut r);
        let b = Tensor::<f64>::randn(vec![3, cfg.token_dim()], &mut r);
        let tau_a = [1usize, 2];
        let tau_b = [0usize, 2, 3];

        let mut tape = Tape::new();
        let input = BatchInput {
            visible_tokens: vec![a.clone(), b.clone()],
            taus: vec![&tau_a, &tau_b],
            ts: vec![3, 8],
        };
        let out = predict_noise_batch(&mut tape, &params, &cfg, &input).unwrap();
        let batched = tape.value(out);

        let single_a = predict_noise(&params, &cfg, &a, &tau_a, 3).unwrap();
        let single_b = predict_noise(&params, &cfg, &b, &tau_b, 8).unwrap();
        let combined: Vec<f64> =
            single_a.data().iter().chain(single_b.data()).copied().collect();
        for (x, y) in batched.data().iter().zip(combined.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
