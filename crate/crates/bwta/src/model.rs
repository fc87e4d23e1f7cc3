//! Toy sequence classifier used by the training demo and the gradient
//! checks: FP embedding, a stack of BWTA transformer blocks, mean pooling,
//! FP classifier head. First and last layers stay full precision on purpose;
//! everything between them is quantized.
//!
//! Checkpoints are a directory: one `.bwta` file per quantized linear (sign
//! plane + weight scale), raw `.f32` sidecars for the FP pieces, and a
//! `manifest.txt` with dimensions, the current stage level, and every
//! activation scale. A loaded model has no latent weights — inference only.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::block::{BlockCache, BlockGrads, FpBlockCache, Tap, TransformerBlock};
use crate::error::{Error, Result};
use crate::io::{
    parse_kv_lines, read_bwta, read_f32_matrix, write_bwta, write_f32_matrix, PackedPayload,
};
use crate::layers::{BwtaLinear, FpCache, FpGrads, FpLinear, LayerNorm};
use crate::quant::{QuantMode, QuantState};
use crate::tensor::{random_matrix, DenseMatrix, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            n_blocks: 1,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0
            || self.d_model == 0
            || self.heads == 0
            || self.d_ff == 0
            || self.n_blocks == 0
        {
            return Err(Error::ZeroDim { op: "ModelConfig::validate" });
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid {
                op: "ModelConfig::validate",
                detail: format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            });
        }
        if self.n_classes < 2 {
            return Err(Error::Invalid {
                op: "ModelConfig::validate",
                detail: "need at least two classes".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub embed: FpLinear,
    pub blocks: Vec<TransformerBlock>,
    pub head: FpLinear,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    embed: FpCache,
    blocks: Vec<BlockCache>,
    seq_len: usize,
    head: FpCache,
}

#[derive(Debug, Clone)]
pub struct ModelCacheFp {
    embed: FpCache,
    blocks: Vec<FpBlockCache>,
    seq_len: usize,
    head: FpCache,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embed: FpGrads,
    pub blocks: Vec<BlockGrads>,
    pub head: FpGrads,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig, mode: QuantMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let embed_std = 1.0 / (cfg.d_in as f32).sqrt();
        let head_std = 1.0 / (cfg.d_model as f32).sqrt();
        let embed = FpLinear::new(random_matrix(
            cfg.d_model,
            cfg.d_in,
            &Scheme::Normal { mean: 0.0, std: embed_std },
            seed.wrapping_add(101),
        )?);
        let head = FpLinear::new(random_matrix(
            cfg.n_classes,
            cfg.d_model,
            &Scheme::Normal { mean: 0.0, std: head_std },
            seed.wrapping_add(102),
        )?);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            blocks.push(TransformerBlock::new(
                format!("b{i}"),
                cfg.d_model,
                cfg.heads,
                cfg.d_ff,
                mode,
                seed.wrapping_add(1000 + 7 * i as u64),
            )?);
        }
        Ok(ToyModel { cfg, embed, blocks, head })
    }

    /// All quantizer sites across blocks, in forward order.
    pub fn site_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.site_names()).collect()
    }

    pub fn quant_states(&self) -> Vec<(String, &QuantState)> {
        self.blocks.iter().flat_map(|b| b.quant_states()).collect()
    }

    pub fn quant_states_mut(&mut self) -> Vec<(String, &mut QuantState)> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.quant_states_mut())
            .collect()
    }

    pub fn scale_snapshot(&self) -> Vec<(String, f32)> {
        self.quant_states()
            .into_iter()
            .map(|(n, s)| (n, s.scale))
            .collect()
    }

    pub fn set_level(&mut self, l: u32) -> Result<()> {
        for b in &mut self.blocks {
            b.set_level(l)?;
        }
        Ok(())
    }

    pub fn refresh_weights(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            b.refresh_weights()?;
        }
        Ok(())
    }

    fn pool(out: &DenseMatrix) -> Result<DenseMatrix> {
        let t = out.rows() as f32;
        let mut pooled = DenseMatrix::zeros(1, out.cols())?;
        for r in 0..out.rows() {
            for (c, &v) in out.row(r).iter().enumerate() {
                pooled.as_mut_slice()[c] += v / t;
            }
        }
        Ok(pooled)
    }

    /// Quantized inference: `[T x d_in] -> [1 x n_classes]` logits.
    pub fn forward(&self, seq: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = self.embed.apply(seq)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.head.apply(&Self::pool(&h)?)
    }

    /// Quantized training forward with caches (same values as `forward`).
    pub fn forward_train(
        &self,
        seq: &DenseMatrix,
        mut tap: Option<&mut Tap>,
    ) -> Result<(DenseMatrix, ModelCache)> {
        let (mut h, embed_cache) = self.embed.forward(seq)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward_train(&h, tap.as_deref_mut())?;
            blocks.push(cache);
            h = next;
        }
        let seq_len = h.rows();
        let (logits, head_cache) = self.head.forward(&Self::pool(&h)?)?;
        Ok((
            logits,
            ModelCache { embed: embed_cache, blocks, seq_len, head: head_cache },
        ))
    }

    pub fn backward(
        &self,
        cache: &ModelCache,
        d_logits: &DenseMatrix,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let d_pooled = self.head.backward(&cache.head, d_logits, &mut grads.head)?;
        let t = cache.seq_len;
        let mut d = DenseMatrix::zeros(t, d_pooled.cols())?;
        for r in 0..t {
            let row = d.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v = d_pooled.get(0, c) / t as f32;
            }
        }
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            d = b.backward(c, &d, &mut grads.blocks[i])?;
        }
        self.embed.backward(&cache.embed, &d, &mut grads.embed)?;
        Ok(())
    }

    /// Full-precision forward with caches (quantizers switched off).
    pub fn forward_train_fp(&self, seq: &DenseMatrix) -> Result<(DenseMatrix, ModelCacheFp)> {
        let (mut h, embed_cache) = self.embed.forward(seq)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward_train_fp(&h)?;
            blocks.push(cache);
            h = next;
        }
        let seq_len = h.rows();
        let (logits, head_cache) = self.head.forward(&Self::pool(&h)?)?;
        Ok((
            logits,
            ModelCacheFp { embed: embed_cache, blocks, seq_len, head: head_cache },
        ))
    }

    pub fn backward_fp(
        &self,
        cache: &ModelCacheFp,
        d_logits: &DenseMatrix,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let d_pooled = self.head.backward(&cache.head, d_logits, &mut grads.head)?;
        let t = cache.seq_len;
        let mut d = DenseMatrix::zeros(t, d_pooled.cols())?;
        for r in 0..t {
            let row = d.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v = d_pooled.get(0, c) / t as f32;
            }
        }
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            d = b.backward_fp(c, &d, &mut grads.blocks[i])?;
        }
        self.embed.backward(&cache.embed, &d, &mut grads.embed)?;
        Ok(())
    }

    pub fn zero_grads(&self) -> Result<ModelGrads> {
        Ok(ModelGrads {
            embed: self.embed.zero_grads()?,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.zero_grads())
                .collect::<Result<Vec<_>>>()?,
            head: self.head.zero_grads()?,
        })
    }

    /// Set every activation scale from data: for each site in forward order,
    /// run the calibration batch and set `s = 2 * mean|input|` over all
    /// tensors the site sees. Earlier sites are already calibrated when a
    /// later site's input is measured, so the estimates are consistent with
    /// the scales actually used downstream.
    pub fn calibrate(&mut self, seqs: &[DenseMatrix]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput {
                op: "ToyModel::calibrate",
                detail: "calibration batch is empty",
            });
        }
        let sites = self.site_names();
        for site in &sites {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for seq in seqs {
                let mut tap = Tap::new();
                self.forward_train(seq, Some(&mut tap))?;
                for (name, tensor) in &tap {
                    if name == site {
                        sum += tensor
                            .as_slice()
                            .iter()
                            .map(|&v| v.abs() as f64)
                            .sum::<f64>();
                        count += tensor.len();
                    }
                }
            }
            if count == 0 {
                return Err(Error::Invalid {
                    op: "ToyModel::calibrate",
                    detail: format!("site {site} never observed"),
                });
            }
            // The statistic sizes the total dequantized range (about
            // +-2*mean|A|); a multi-level grid subdivides that same range,
            // so the per-step scale shrinks with the level count.
            let base = 2.0 * (sum / count as f64) as f32;
            for (name, st) in self.quant_states_mut() {
                if &name == site {
                    st.set_scale(base / st.mode.half_range() as f32);
                }
            }
        }
        Ok(())
    }

    /// Mean loss and accuracy over a labeled set (quantized inference path).
    pub fn evaluate(&self, seqs: &[DenseMatrix], labels: &[usize]) -> Result<(f32, f32)> {
        if seqs.is_empty() || seqs.len() != labels.len() {
            return Err(Error::Invalid {
                op: "ToyModel::evaluate",
                detail: format!("{} sequences vs {} labels", seqs.len(), labels.len()),
            });
        }
        let mut loss_sum = 0.0f64;
        let mut hits = 0usize;
        for (seq, &label) in seqs.iter().zip(labels) {
            let logits = self.forward(seq)?;
            let (loss, _) = softmax_cross_entropy(&logits, label)?;
            loss_sum += loss as f64;
            if argmax(logits.row(0)) == label {
                hits += 1;
            }
        }
        Ok((
            (loss_sum / seqs.len() as f64) as f32,
            hits as f32 / seqs.len() as f32,
        ))
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy on a single-row logits matrix. Returns the loss and
/// the logits gradient `softmax(z) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &DenseMatrix, label: usize) -> Result<(f32, DenseMatrix)> {
    if logits.rows() != 1 {
        return Err(Error::Invalid {
            op: "softmax_cross_entropy",
            detail: format!("expected a single logits row, got {}", logits.rows()),
        });
    }
    if label >= logits.cols() {
        return Err(Error::Invalid {
            op: "softmax_cross_entropy",
            detail: format!("label {label} out of range for {} classes", logits.cols()),
        });
    }
    let z = logits.row(0);
    let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = z.iter().map(|&v| (v - max).exp()).sum();
    let loss = sum.ln() - (z[label] - max);
    let mut d = DenseMatrix::zeros(1, z.len())?;
    for (c, v) in d.as_mut_slice().iter_mut().enumerate() {
        *v = (z[c] - max).exp() / sum;
    }
    d.as_mut_slice()[label] -= 1.0;
    Ok((loss, d))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MANIFEST: &str = "manifest.txt";
const LINEAR_TAGS: [&str; 6] = ["q", "k", "v", "o", "ffn1", "ffn2"];

fn vec_as_row(v: &[f32]) -> Result<DenseMatrix> {
    DenseMatrix::new(1, v.len(), v.to_vec())
}

/// Write a trained model to `dir`: packed sign planes, FP sidecars, and a
/// manifest with dimensions, stage level and activation scales.
pub fn save_checkpoint(model: &ToyModel, dir: impl AsRef<Path>, stage_l: u32) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let cfg = &model.cfg;
    let mut manifest = String::new();
    manifest.push_str("version=1\n");
    manifest.push_str(&format!("d_in={}\n", cfg.d_in));
    manifest.push_str(&format!("d_model={}\n", cfg.d_model));
    manifest.push_str(&format!("heads={}\n", cfg.heads));
    manifest.push_str(&format!("d_ff={}\n", cfg.d_ff));
    manifest.push_str(&format!("n_blocks={}\n", cfg.n_blocks));
    manifest.push_str(&format!("n_classes={}\n", cfg.n_classes));
    manifest.push_str(&format!("stage_l={stage_l}\n"));
    for (name, st) in model.quant_states() {
        // f32 Display is shortest-roundtrip, so the text survives exactly.
        manifest.push_str(&format!("scale.{name}={}\n", st.scale));
    }
    fs::write(dir.join(MANIFEST), manifest).map_err(|e| Error::io(dir.join(MANIFEST).display().to_string(), e))?;

    write_f32_matrix(dir.join("embed.w.f32"), &model.embed.w)?;
    write_f32_matrix(dir.join("embed.b.f32"), &vec_as_row(&model.embed.b)?)?;
    write_f32_matrix(dir.join("head.w.f32"), &model.head.w)?;
    write_f32_matrix(dir.join("head.b.f32"), &vec_as_row(&model.head.b)?)?;
    for b in &model.blocks {
        let linears: [&BwtaLinear; 6] =
            [&b.q_proj, &b.k_proj, &b.v_proj, &b.o_proj, &b.ffn1, &b.ffn2];
        for (tag, lin) in LINEAR_TAGS.iter().zip(linears) {
            let path = dir.join(format!("{}.{tag}.bwta", b.name));
            let payload = PackedPayload::Binary(lin.packed_weight().clone());
            write_bwta(path, &payload, lin.weight_scale())?;
        }
        write_f32_matrix(dir.join(format!("{}.ln1.gain.f32", b.name)), &vec_as_row(&b.ln1.gain)?)?;
        write_f32_matrix(dir.join(format!("{}.ln1.bias.f32", b.name)), &vec_as_row(&b.ln1.bias)?)?;
        write_f32_matrix(dir.join(format!("{}.ln2.gain.f32", b.name)), &vec_as_row(&b.ln2.gain)?)?;
        write_f32_matrix(dir.join(format!("{}.ln2.bias.f32", b.name)), &vec_as_row(&b.ln2.bias)?)?;
    }
    Ok(())
}

fn manifest_get<'a>(
    map: &'a HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<&'a str> {
    map.get(key).map(String::as_str).ok_or_else(|| Error::FileFormat {
        detail: format!("{}: missing key {key}", path.display()),
    })
}

fn parse_num<T: std::str::FromStr>(raw: &str, key: &str, path: &Path) -> Result<T> {
    raw.parse().map_err(|_| Error::FileFormat {
        detail: format!("{}: bad value for {key}: {raw}", path.display()),
    })
}

/// Load a checkpoint directory as an inference-only model (no latent
/// weights; training methods refuse to run on it).
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut map = HashMap::new();
    for (_, k, v) in parse_kv_lines(&text)? {
        map.insert(k, v);
    }
    let version: u32 = parse_num(manifest_get(&map, "version", &mpath)?, "version", &mpath)?;
    if version != 1 {
        return Err(Error::FileFormat {
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let cfg = ModelConfig {
        d_in: parse_num(manifest_get(&map, "d_in", &mpath)?, "d_in", &mpath)?,
        d_model: parse_num(manifest_get(&map, "d_model", &mpath)?, "d_model", &mpath)?,
        heads: parse_num(manifest_get(&map, "heads", &mpath)?, "heads", &mpath)?,
        d_ff: parse_num(manifest_get(&map, "d_ff", &mpath)?, "d_ff", &mpath)?,
        n_blocks: parse_num(manifest_get(&map, "n_blocks", &mpath)?, "n_blocks", &mpath)?,
        n_classes: parse_num(manifest_get(&map, "n_classes", &mpath)?, "n_classes", &mpath)?,
    };
    cfg.validate()?;
    let stage_l: u32 = parse_num(manifest_get(&map, "stage_l", &mpath)?, "stage_l", &mpath)?;
    if stage_l == 0 {
        return Err(Error::FileFormat {
            detail: "stage_l must be at least 1".to_string(),
        });
    }
    let scale_of = |site: &str| -> Result<f32> {
        let key = format!("scale.{site}");
        parse_num(manifest_get(&map, &key, &mpath)?, &key, &mpath)
    };
    let tern_mode = QuantMode::Levelwise(stage_l);

    let read_vec = |name: String, want: usize| -> Result<Vec<f32>> {
        let m = read_f32_matrix(dir.join(&name))?;
        if m.rows() != 1 || m.cols() != want {
            return Err(Error::FileFormat {
                detail: format!("{name}: expected 1x{want}, got {}x{}", m.rows(), m.cols()),
            });
        }
        Ok(m.as_slice().to_vec())
    };

    let embed_w = read_f32_matrix(dir.join("embed.w.f32"))?;
    let head_w = read_f32_matrix(dir.join("head.w.f32"))?;
    let mut embed = FpLinear::new(embed_w);
    embed.b = read_vec("embed.b.f32".to_string(), cfg.d_model)?;
    let mut head = FpLinear::new(head_w);
    head.b = read_vec("head.b.f32".to_string(), cfg.n_classes)?;

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let bname = format!("b{i}");
        let mut linears = Vec::with_capacity(6);
        for tag in LINEAR_TAGS {
            let path = dir.join(format!("{bname}.{tag}.bwta"));
            let file = read_bwta(&path)?;
            let packed = match file.payload {
                PackedPayload::Binary(p) => p,
                PackedPayload::Ternary(_) => {
                    return Err(Error::FileFormat {
                        detail: format!(
                            "{}: weight planes must be sign-binary",
                            path.display()
                        ),
                    })
                }
            };
            let site = match tag {
                "q" => "q_in",
                "k" => "k_in",
                "v" => "v_in",
                "o" => "o_in",
                "ffn1" => "ffn1_in",
                _ => "ffn2_in",
            };
            let mode = if tag == "ffn2" { QuantMode::Bool } else { tern_mode };
            let act = QuantState::new(mode, scale_of(&format!("{bname}.{site}"))?)?;
            linears.push(BwtaLinear::from_packed(
                format!("{bname}.{tag}"),
                packed,
                file.scale,
                act,
            )?);
        }
        // Pop in reverse declaration order.
        let ffn2 = linears.pop().expect("six linears");
        let ffn1 = linears.pop().expect("six linears");
        let o = linears.pop().expect("six linears");
        let v = linears.pop().expect("six linears");
        let k = linears.pop().expect("six linears");
        let q = linears.pop().expect("six linears");
        let mut ln1 = LayerNorm::new(cfg.d_model);
        ln1.gain = read_vec(format!("{bname}.ln1.gain.f32"), cfg.d_model)?;
        ln1.bias = read_vec(format!("{bname}.ln1.bias.f32"), cfg.d_model)?;
        let mut ln2 = LayerNorm::new(cfg.d_model);
        ln2.gain = read_vec(format!("{bname}.ln2.gain.f32"), cfg.d_model)?;
        ln2.bias = read_vec(format!("{bname}.ln2.bias.f32"), cfg.d_model)?;
        blocks.push(TransformerBlock {
            name: bname.clone(),
            q_proj: q,
            k_proj: k,
            v_proj: v,
            o_proj: o,
            attn: crate::block::AttentionParams {
                s_q: QuantState::new(tern_mode, scale_of(&format!("{bname}.s_q"))?)?,
                s_k: QuantState::new(tern_mode, scale_of(&format!("{bname}.s_k"))?)?,
                s_att: QuantState::new(QuantMode::Bool, scale_of(&format!("{bname}.s_att"))?)?,
                s_v: QuantState::new(tern_mode, scale_of(&format!("{bname}.s_v"))?)?,
                heads: cfg.heads,
                head_dim: cfg.d_model / cfg.heads,
            },
            ln1,
            ln2,
            ffn1,
            ffn2,
        });
    }
    Ok(ToyModel { cfg, embed, blocks, head })
}
