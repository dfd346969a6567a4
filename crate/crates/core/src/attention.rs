//! Patch embedding, multi-head attention and the multi-attention fusion (MAF) module.
//!
//! A MAF module turns a pair of registered RGB/thermal feature maps into
//! token sequences, runs `depth` fusion blocks over them and folds the
//! result back into feature maps with a skip connection. Each block runs
//! four attention branches on the same inputs:
//!
//! * intra-modality attention (IMA) per stream: `MHA(z, z) + z`
//! * cross-modality attention (CMA) per stream: `MHA(query = other, kv = self) + self`
//!
//! and multiplies the IMA and CMA results of each stream elementwise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::dim_err;
use crate::params::{Init, ParamId, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

/// Projection matrices of one attention head, each `[D, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub dim: usize,
    pub head_dim: usize,
    pub heads: Vec<AttentionHeadParams>,
    /// Output projection `[N_h·d, D]`.
    pub w_o: ParamId,
}

impl MultiHeadParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("embedding dim {dim} is not divisible by {heads} heads")));
        }
        let d = dim / heads;
        let heads = (0..heads)
            .map(|h| AttentionHeadParams {
                w_q: store.add(format!("{prefix}.head{h}.w_q"), init.xavier(dim, d)),
                w_k: store.add(format!("{prefix}.head{h}.w_k"), init.xavier(dim, d)),
                w_v: store.add(format!("{prefix}.head{h}.w_v"), init.xavier(dim, d)),
            })
            .collect::<Vec<_>>();
        let w_o = store.add(format!("{prefix}.w_o"), init.xavier(heads.len() * d, dim));
        Ok(Self {
            dim,
            head_dim: d,
            heads,
            w_o,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.heads.iter().flat_map(|h| [h.w_q, h.w_k, h.w_v]).collect();
        ids.push(self.w_o);
        ids
    }
}

/// Parameters of one fusion block: four independent attention units.
#[derive(Clone, Debug, PartialEq)]
pub struct MafBlockParams {
    pub ima_r: MultiHeadParams,
    pub ima_t: MultiHeadParams,
    pub cma_r: MultiHeadParams,
    pub cma_t: MultiHeadParams,
}

impl MafBlockParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ima_r: MultiHeadParams::init(store, init, &format!("{prefix}.ima_r"), dim, heads)?,
            ima_t: MultiHeadParams::init(store, init, &format!("{prefix}.ima_t"), dim, heads)?,
            cma_r: MultiHeadParams::init(store, init, &format!("{prefix}.cma_r"), dim, heads)?,
            cma_t: MultiHeadParams::init(store, init, &format!("{prefix}.cma_t"), dim, heads)?,
        })
    }

    /// The same block with RGB and thermal parameter sets exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            ima_r: self.ima_t.clone(),
            ima_t: self.ima_r.clone(),
            cma_r: self.cma_t.clone(),
            cma_t: self.cma_r.clone(),
        }
    }
}

/// Patch partition plus the forward and backward linear projections.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedConfig {
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    /// `[P²·C, D]`
    pub e: ParamId,
    /// `[D, P²·C]`
    pub e_back: ParamId,
    /// Learned `[max_tokens, D]` table, present when positional embedding is on.
    pub pos: Option<ParamId>,
}

impl PatchEmbedConfig {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        patch: usize,
        channels: usize,
        dim: usize,
        positional_tokens: Option<usize>,
    ) -> Result<Self> {
        if patch == 0 || channels == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "patch embedding needs positive P, C, D (got {patch}, {channels}, {dim})"
            )));
        }
        let flat = patch * patch * channels;
        let e = store.add(format!("{prefix}.embed.e"), init.xavier(flat, dim));
        let e_back = store.add(format!("{prefix}.embed.e_back"), init.xavier(dim, flat));
        let pos = positional_tokens.map(|n| store.add(format!("{prefix}.embed.pos"), init.xavier(n, dim)));
        Ok(Self {
            patch,
            channels,
            dim,
            e,
            e_back,
            pos,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MafModuleParams {
    pub embed: PatchEmbedConfig,
    pub blocks: Vec<MafBlockParams>,
}

impl MafModuleParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        patch: usize,
        depth: usize,
        dim: usize,
        heads: usize,
        positional_tokens: Option<usize>,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config(format!("{prefix}: fusion depth must be >= 1")));
        }
        let embed = PatchEmbedConfig::init(store, init, prefix, patch, channels, dim, positional_tokens)?;
        let blocks = (0..depth)
            .map(|l| MafBlockParams::init(store, init, &format!("{prefix}.block{l}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

// ---------------------------------------------------------------- attention log

/// Which attention unit of a block produced a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    ImaRgb,
    ImaThermal,
    CmaRgb,
    CmaThermal,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::ImaRgb => "ima_r",
            Branch::ImaThermal => "ima_t",
            Branch::CmaRgb => "cma_r",
            Branch::CmaThermal => "cma_t",
        }
    }
}

/// One post-softmax attention matrix `[N_query, N_key]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub module: usize,
    pub block: usize,
    pub branch: Branch,
    pub head: usize,
    pub weights: Var,
}

impl AttentionRecord {
    pub fn name(&self) -> String {
        format!(
            "module{}_block{}_{}_head{}",
            self.module,
            self.block,
            self.branch.label(),
            self.head
        )
    }
}

/// Collects attention matrices while a forward pass runs.
#[derive(Clone, Debug, Default)]
pub struct AttentionLog {
    pub records: Vec<AttentionRecord>,
    module: usize,
    block: usize,
    branch: Option<Branch>,
}

impl AttentionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_module(&mut self, module: usize) {
        self.module = module;
    }

    fn enter(&mut self, block: usize, branch: Branch) {
        self.block = block;
        self.branch = Some(branch);
    }
}

fn embedding_shape<T: Scalar>(tape: &Tape<T>, z: Var, what: &str) -> Result<(usize, usize)> {
    match tape.value(z).shape() {
        &[n, d] => Ok((n, d)),
        s => Err(dim_err!("{what}: expected token matrix [N, D], got {:?}", s)),
    }
}

/// `concat_h(softmax(Q_h·K_hᵀ/√d)·V_h)·W_O` with queries from `zq` and keys/values from `zkv`.
///
/// No residual is added here.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    zq: Var,
    zkv: Var,
    p: &MultiHeadParams,
    mut log: Option<&mut AttentionLog>,
) -> Result<Var> {
    let (_, dq) = embedding_shape(tape, zq, "attention query")?;
    let (_, dkv) = embedding_shape(tape, zkv, "attention key/value")?;
    if dq != p.dim || dkv != p.dim {
        return Err(dim_err!(
            "attention: token widths {} (query) and {} (key/value) must equal D = {}",
            dq,
            dkv,
            p.dim
        ));
    }
    let inv_sqrt_d = T::one() / T::from_f64_lossy(p.head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(p.heads.len());
    for (h, head) in p.heads.iter().enumerate() {
        let q = tape.matmul(zq, tape.p(head.w_q))?;
        let k = tape.matmul(zkv, tape.p(head.w_k))?;
        let v = tape.matmul(zkv, tape.p(head.w_v))?;
        let kt = tape.transpose(k, &[1, 0])?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, inv_sqrt_d);
        let weights = tape.softmax(logits, 1)?;
        if let Some(log) = log.as_deref_mut() {
            log.records.push(AttentionRecord {
                module: log.module,
                block: log.block,
                branch: log.branch.unwrap_or(Branch::ImaRgb),
                head: h,
                weights,
            });
        }
        outputs.push(tape.matmul(weights, v)?);
    }
    let cat = tape.concat(&outputs, 1)?;
    tape.matmul(cat, tape.p(p.w_o))
}

/// Intra-modality attention: `MHA(z, z) + z`.
pub fn ima<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &MultiHeadParams, log: Option<&mut AttentionLog>) -> Result<Var> {
    let attended = multi_head_attention(tape, z, z, p, log)?;
    tape.add(attended, z)
}

/// Cross-modality attention: `MHA(query = z_other, key/value = z_self) + z_self`.
pub fn cma<T: Scalar>(tape: &mut Tape<T>, z_self: Var, z_other: Var, p: &MultiHeadParams, log: Option<&mut AttentionLog>) -> Result<Var> {
    let (n_self, _) = embedding_shape(tape, z_self, "cma")?;
    let (n_other, _) = embedding_shape(tape, z_other, "cma")?;
    if n_self != n_other {
        return Err(dim_err!("cma: token counts differ across modalities ({} vs {})", n_self, n_other));
    }
    let attended = multi_head_attention(tape, z_other, z_self, p, log)?;
    tape.add(attended, z_self)
}

/// One fusion block. All four branches read the block inputs; the outputs are
/// `ima(z_r) ⊙ cma(z_r ← z_t)` and `ima(z_t) ⊙ cma(z_t ← z_r)`.
pub fn maf_block<T: Scalar>(
    tape: &mut Tape<T>,
    z_r: Var,
    z_t: Var,
    p: &MafBlockParams,
    block: usize,
    mut log: Option<&mut AttentionLog>,
) -> Result<(Var, Var)> {
    if tape.value(z_r).shape() != tape.value(z_t).shape() {
        return Err(dim_err!(
            "maf_block: modality embeddings differ in shape ({:?} vs {:?})",
            tape.value(z_r).shape(),
            tape.value(z_t).shape()
        ));
    }
    let branch = |log: &mut Option<&mut AttentionLog>, b: Branch| {
        if let Some(l) = log.as_deref_mut() {
            l.enter(block, b);
        }
    };
    branch(&mut log, Branch::ImaRgb);
    let ir = ima(tape, z_r, &p.ima_r, log.as_deref_mut())?;
    branch(&mut log, Branch::ImaThermal);
    let it = ima(tape, z_t, &p.ima_t, log.as_deref_mut())?;
    branch(&mut log, Branch::CmaRgb);
    let cr = cma(tape, z_r, z_t, &p.cma_r, log.as_deref_mut())?;
    branch(&mut log, Branch::CmaThermal);
    let ct = cma(tape, z_t, z_r, &p.cma_t, log)?;
    Ok((tape.mul(ir, cr)?, tape.mul(it, ct)?))
}

/// Flattens `[C,H,W]` into `[N, P²·C]` patches and projects them to `[N, D]`.
pub fn patch_embed<T: Scalar>(tape: &mut Tape<T>, f: Var, cfg: &PatchEmbedConfig) -> Result<Var> {
    let s = tape.value(f).shape().to_vec();
    if s.len() != 3 || s[0] != cfg.channels {
        return Err(dim_err!("patch_embed: expected [{}, H, W], got {:?}", cfg.channels, s));
    }
    if !s[1].is_multiple_of(cfg.patch) || !s[2].is_multiple_of(cfg.patch) {
        return Err(dim_err!("patch_embed: H={} W={} not divisible by P={}", s[1], s[2], cfg.patch));
    }
    let patches = tape.patchify(f, cfg.patch)?;
    let z = tape.matmul(patches, tape.p(cfg.e))?;
    match cfg.pos {
        None => Ok(z),
        Some(pos) => {
            let n = tape.value(z).shape()[0];
            let table = tape.p(pos);
            let available = tape.value(table).shape()[0];
            if n > available {
                return Err(dim_err!(
                    "patch_embed: {} tokens exceed the positional table ({} rows)",
                    n,
                    available
                ));
            }
            let rows = tape.slice(table, 0, 0, n)?;
            tape.add(z, rows)
        }
    }
}

/// Full fusion module on a `[C,H,W]` feature pair; outputs keep the input shape.
pub fn maf_module<T: Scalar>(
    tape: &mut Tape<T>,
    f_r: Var,
    f_t: Var,
    p: &MafModuleParams,
    mut log: Option<&mut AttentionLog>,
) -> Result<(Var, Var)> {
    let shape = tape.value(f_r).shape().to_vec();
    if shape != tape.value(f_t).shape() {
        return Err(dim_err!(
            "maf_module: paired feature maps differ ({:?} vs {:?})",
            shape,
            tape.value(f_t).shape()
        ));
    }
    let mut z_r = patch_embed(tape, f_r, &p.embed)?;
    let mut z_t = patch_embed(tape, f_t, &p.embed)?;
    for (l, block) in p.blocks.iter().enumerate() {
        (z_r, z_t) = maf_block(tape, z_r, z_t, block, l, log.as_deref_mut())?;
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let fold = |tape: &mut Tape<T>, z: Var, skip: Var| -> Result<Var> {
        let flat = tape.matmul(z, tape.p(p.embed.e_back))?;
        let map = tape.unpatchify(flat, c, h, w, p.embed.patch)?;
        tape.add(map, skip)
    };
    let out_r = fold(tape, z_r, f_r)?;
    let out_t = fold(tape, z_t, f_t)?;
    Ok((out_r, out_t))
}

/// Replaces the value of every parameter in `ids` with zeros.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dim: usize, heads: usize) -> (ParamStore<f64>, MultiHeadParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(7);
        let p = MultiHeadParams::init(&mut store, &mut init, "mha", dim, heads).unwrap();
        (store, p)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        assert!(MultiHeadParams::init(&mut store, &mut init, "x", 10, 4).is_err());
    }

    #[test]
    fn zero_output_projection_gives_zeros() {
        let (mut store, p) = setup(8, 2);
        zero_params(&mut store, &[p.w_o]);
        let mut init = Init::new(3);
        let mut tape = Tape::new();
        tape.bind(&store);
        let z = tape.constant(init.normal(&[5, 8], 1.0));
        let y = multi_head_attention(&mut tape, z, z, &p, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ima_and_cma_residual_identity() {
        let (mut store, p) = setup(8, 2);
        zero_params(&mut store, &[p.w_o]);
        let mut init = Init::new(3);
        let mut tape = Tape::new();
        tape.bind(&store);
        let z = tape.constant(init.normal(&[5, 8], 1.0));
        let other = tape.constant(init.normal(&[5, 8], 1.0));
        let y = ima(&mut tape, z, &p, None).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
        let y = cma(&mut tape, z, other, &p, None).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (store, p) = setup(8, 4);
        let mut tape = Tape::new();
        tape.bind(&store);
        let z = tape.constant(Tensor::zeros([3, 8]));
        let y = ima(&mut tape, z, &p, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cma_with_itself_equals_ima() {
        let (store, p) = setup(8, 2);
        let mut init = Init::new(9);
        let mut tape = Tape::new();
        tape.bind(&store);
        let z = tape.constant(init.normal(&[6, 8], 1.0));
        let a = ima(&mut tape, z, &p, None).unwrap();
        let b = cma(&mut tape, z, z, &p, None).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn cma_rejects_token_mismatch() {
        let (store, p) = setup(8, 2);
        let mut tape = Tape::new();
        tape.bind(&store);
        let a = tape.constant(Tensor::zeros([3, 8]));
        let b = tape.constant(Tensor::zeros([4, 8]));
        assert!(matches!(cma(&mut tape, a, b, &p, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let (store, p) = setup(8, 2);
        let mut tape = Tape::new();
        tape.bind(&store);
        let a = tape.constant(Tensor::zeros([3, 6]));
        assert!(matches!(multi_head_attention(&mut tape, a, a, &p, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_token_attention_collapses_to_value_path() {
        let (store, p) = setup(8, 2);
        let mut init = Init::new(11);
        let zq = init.normal::<f64>(&[1, 8], 1.0);
        let zkv = init.normal::<f64>(&[1, 8], 1.0);
        let mut tape = Tape::new();
        tape.bind(&store);
        let q = tape.constant(zq);
        let kv = tape.constant(zkv.clone());
        let y = multi_head_attention(&mut tape, q, kv, &p, None).unwrap();

        // weight is exactly 1: output = concat_h(zkv·W_v^h)·W_O
        let mut cat = Vec::new();
        for head in &p.heads {
            let wv = store.get(head.w_v);
            for j in 0..4 {
                let mut acc = 0.0;
                for i in 0..8 {
                    acc += zkv.data()[i] * wv.data()[i * 4 + j];
                }
                cat.push(acc);
            }
        }
        let wo = store.get(p.w_o);
        for j in 0..8 {
            let mut acc = 0.0;
            for (i, &c) in cat.iter().enumerate() {
                acc += c * wo.data()[i * 8 + j];
            }
            assert!((tape.value(y).data()[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_embed_counts_tokens_and_checks_divisibility() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1);
        let cfg = PatchEmbedConfig::init(&mut store, &mut init, "m", 2, 1, 6, None).unwrap();
        let mut tape = Tape::new();
        tape.bind(&store);
        let f = tape.constant(init.normal(&[1, 4, 4], 1.0));
        let z = patch_embed(&mut tape, f, &cfg).unwrap();
        assert_eq!(tape.value(z).shape(), &[4, 6]);
        let bad = tape.constant(Tensor::zeros([1, 5, 4]));
        let err = patch_embed(&mut tape, bad, &cfg).unwrap_err();
        assert!(alloc::format!("{err}").contains("H=5 W=4"));
    }

    #[test]
    fn zero_projection_embeds_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1);
        let cfg = PatchEmbedConfig::init(&mut store, &mut init, "m", 2, 3, 5, None).unwrap();
        zero_params(&mut store, &[cfg.e]);
        let mut tape = Tape::new();
        tape.bind(&store);
        let f = tape.constant(init.normal(&[3, 4, 6], 1.0));
        let z = patch_embed(&mut tape, f, &cfg).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_patch_embedding_is_pixelwise_projection() {
        let (c, h, w, d) = (3, 2, 3, 4);
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(5);
        let cfg = PatchEmbedConfig::init(&mut store, &mut init, "m", 1, c, d, None).unwrap();
        let f = init.normal::<f64>(&[c, h, w], 1.0);
        let mut tape = Tape::new();
        tape.bind(&store);
        let fv = tape.constant(f.clone());
        let z = patch_embed(&mut tape, fv, &cfg).unwrap();
        let e = store.get(cfg.e);
        for pix in 0..h * w {
            for j in 0..d {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += f.data()[ch * h * w + pix] * e.data()[ch * d + j];
                }
                assert!((tape.value(z).data()[pix * d + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_table_is_added_and_bounded() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1);
        let cfg = PatchEmbedConfig::init(&mut store, &mut init, "m", 1, 1, 2, Some(4)).unwrap();
        zero_params(&mut store, &[cfg.e]);
        let mut tape = Tape::new();
        tape.bind(&store);
        let f = tape.constant(Tensor::ones([1, 2, 2]));
        let z = patch_embed(&mut tape, f, &cfg).unwrap();
        assert_eq!(tape.value(z).data(), store.get(cfg.pos.unwrap()).data());
        let big = tape.constant(Tensor::ones([1, 3, 3]));
        assert!(patch_embed(&mut tape, big, &cfg).is_err());
    }

    #[test]
    fn attention_log_records_every_head() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(2);
        let p = MafModuleParams::init(&mut store, &mut init, "maf0", 4, 2, 2, 8, 2, None).unwrap();
        let mut tape = Tape::new();
        tape.bind(&store);
        let fr = tape.constant(init.normal(&[4, 4, 4], 1.0));
        let ft = tape.constant(init.normal(&[4, 4, 4], 1.0));
        let mut log = AttentionLog::new();
        maf_module(&mut tape, fr, ft, &p, Some(&mut log)).unwrap();
        assert_eq!(log.records.len(), 2 * 4 * 2);
        assert_eq!(log.records[0].name(), "module0_block0_ima_r_head0");
        assert_eq!(log.records.last().unwrap().name(), "module0_block1_cma_t_head1");
        for r in &log.records {
            assert_eq!(tape.value(r.weights).shape(), &[4, 4]);
        }
    }
}
