use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, ArchConfig};
use super::koopman::init_koopman;
use super::layers::{DenseBlock, DenseCache, Linear, ResidualBlock, ResidualCache, SkipDense};
use crate::dataset::schema::{Modality, N_TARGETS};
use crate::error::{Error, Result};
use crate::numerics::matrix::{
    dot, gemv_t_acc, outer_acc, sigmoid, silu, silu_grad, softmax_in_place,
};
use crate::numerics::optim::{GradSet, ParamId, ParamStore};

#[derive(Debug, Clone)]
struct GroupEncoder {
    modality: Modality,
    layers: Vec<DenseBlock>,
}

/// Parameter handles of every stage.
#[derive(Debug, Clone)]
pub struct Net {
    pub config: ArchConfig,
    pub flags: AblationFlags,
    encoders: Vec<GroupEncoder>,
    fusion: Linear,
    res: Vec<ResidualBlock>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    feat_keys: Vec<Linear>,
    feat_vals: Vec<Linear>,
    gate: Linear,
    pub k: ParamId,
    decoder: Vec<SkipDense>,
    head: Linear,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forward {
    pub y_hat: [f64; N_TARGETS],
    /// Temporal weights averaged over heads, oldest visit first.
    pub alpha: Vec<f64>,
    pub alpha_heads: Vec<Vec<f64>>,
    /// Modality weights in [`ArchConfig::groups`] order.
    pub beta: Vec<f64>,
    pub gate: Vec<f64>,
    pub c_time: Vec<f64>,
    pub c_feat: Vec<f64>,
    pub c: Vec<f64>,
    pub z_enc: Vec<Vec<f64>>,
    pub z_ref: Vec<Vec<f64>>,
    /// Modality embeddings at the last input visit.
    pub embeddings: Vec<Vec<f64>>,
    pub z_next: Vec<f64>,
    /// `Σ‖z_{τ+1} − K z_τ − c‖²` over in-window pairs.
    pub koop_sq: f64,
    pub koop_pairs: usize,
}

#[derive(Debug, Clone)]
struct StepCache {
    enc: Vec<Vec<DenseCache>>,
    cat: Vec<f64>,
    fusion_pre: Vec<f64>,
    res: Vec<ResidualCache>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    v: Vec<f64>,
    ukeys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    gate_in: Vec<f64>,
}

/// Intermediates retained for [`Net::backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    steps: Vec<StepCache>,
    attn: Option<AttnCache>,
    dec: Vec<DenseCache>,
    dec_h: Vec<f64>,
    resid: Vec<Vec<f64>>,
    pub out: Forward,
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl Net {
    pub fn build(
        config: &ArchConfig,
        flags: AblationFlags,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        flags.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_z = config.d_z;
        let d_k = config.d_k();
        let groups = config.groups();
        let mut encoders = Vec::new();
        for &g in &groups {
            let mut inp = g.width();
            let mut layers = Vec::new();
            for (l, &h) in config.hidden(g).iter().enumerate() {
                layers.push(DenseBlock::new(
                    store,
                    &mut rng,
                    &format!("enc.{}.{l}", g.name()),
                    inp,
                    h,
                ));
                inp = h;
            }
            encoders.push(GroupEncoder {
                modality: g,
                layers,
            });
        }
        let cat: usize = groups.iter().map(|&g| config.embed_dim(g)).sum();
        let fusion = Linear::new(store, &mut rng, "fusion", cat, d_z, true);
        let res = (0..config.n_res_blocks)
            .map(|i| ResidualBlock::new(store, &mut rng, &format!("res.{i}"), d_z))
            .collect();
        let wq = Linear::new(store, &mut rng, "attn.q", d_z, d_z, false);
        let wk = Linear::new(store, &mut rng, "attn.k", d_z, d_z, false);
        let wv = Linear::new(store, &mut rng, "feat.query", d_z, d_k, false);
        let feat_keys = groups
            .iter()
            .map(|&g| {
                Linear::new(
                    store,
                    &mut rng,
                    &format!("feat.key.{}", g.name()),
                    config.embed_dim(g),
                    d_k,
                    true,
                )
            })
            .collect();
        let feat_vals = groups
            .iter()
            .map(|&g| {
                Linear::new(
                    store,
                    &mut rng,
                    &format!("feat.value.{}", g.name()),
                    config.embed_dim(g),
                    d_z,
                    true,
                )
            })
            .collect();
        let gate = Linear::new(store, &mut rng, "gate", 2 * d_z, d_z, true);
        let k = store.add(
            "koopman",
            init_koopman(d_z, config.sigma_init, config.rho_init, seed ^ 0x4b4f_4f50)?,
        );
        let decoder = (0..config.decoder_layers - 1)
            .map(|i| SkipDense {
                block: DenseBlock::new(store, &mut rng, &format!("dec.{i}"), d_z, d_z),
            })
            .collect();
        let head = Linear::new(store, &mut rng, "dec.head", d_z, N_TARGETS, true);
        Ok(Self {
            config: config.clone(),
            flags,
            encoders,
            fusion,
            res,
            wq,
            wk,
            wv,
            feat_keys,
            feat_vals,
            gate,
            k,
            decoder,
            head,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.encoders.len()
    }

    /// Per-modality encoders followed by fusion: `(z_enc, embeddings)`.
    pub fn encode(&self, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (z, emb, _) = self.encode_cached(store, x, None)?;
        Ok((z, emb))
    }

    fn encode_cached(
        &self,
        store: &ParamStore,
        x: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(
        Vec<f64>,
        Vec<Vec<f64>>,
        (Vec<Vec<DenseCache>>, Vec<f64>, Vec<f64>),
    )> {
        if x.len() != crate::dataset::schema::N_FEATURES {
            return Err(Error::Dimension {
                op: "encode",
                left: (1, x.len()),
                right: (1, crate::dataset::schema::N_FEATURES),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "encoder input (impute before forward)".into(),
            ));
        }
        let p = self.config.dropout;
        let mut embeds = Vec::with_capacity(self.encoders.len());
        let mut caches = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let mut h = x[enc.modality.range()].to_vec();
            let mut cs = Vec::with_capacity(enc.layers.len());
            for layer in &enc.layers {
                let drop = rng.as_deref_mut().map(|r| (r, p));
                let (y, c) = layer.forward(store, &h, drop);
                cs.push(c);
                h = y;
            }
            embeds.push(h);
            caches.push(cs);
        }
        let cat: Vec<f64> = embeds.iter().flatten().copied().collect();
        let pre = self.fusion.forward(store, &cat);
        let z = pre.iter().map(|&v| silu(v)).collect();
        Ok((z, embeds, (caches, cat, pre)))
    }

    /// Stacked residual refinement of one latent.
    pub fn refine(&self, store: &ParamStore, z: &[f64]) -> Vec<f64> {
        let mut h = z.to_vec();
        for b in &self.res {
            h = b.forward(store, &h, None).0;
        }
        h
    }

    /// Decoder MLP applied to an evolved latent.
    pub fn decode(&self, store: &ParamStore, z: &[f64]) -> [f64; N_TARGETS] {
        let mut h = z.to_vec();
        for layer in &self.decoder {
            h = layer.forward(store, &h).0;
        }
        let y = self.head.forward(store, &h);
        [y[0], y[1], y[2]]
    }

    /// Forward pass over one window of imputed, standardized visits. With
    /// `rng`, dropout is active (training mode).
    pub fn forward(
        &self,
        store: &ParamStore,
        inputs: &[Vec<f64>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Cache> {
        if inputs.is_empty() {
            return Err(Error::Contract("window has no visits".into()));
        }
        let d_z = self.config.d_z;
        let w = inputs.len();
        let p = self.config.dropout;
        let mut steps = Vec::with_capacity(w);
        let mut z_enc = Vec::with_capacity(w);
        let mut z_ref = Vec::with_capacity(w);
        let mut embeddings = Vec::new();
        for x in inputs {
            let (z, emb, (enc, cat, fusion_pre)) =
                self.encode_cached(store, x, rng.as_deref_mut())?;
            let mut h = z.clone();
            let mut res = Vec::with_capacity(self.res.len());
            for b in &self.res {
                let drop = rng.as_deref_mut().map(|r| (r, p));
                let (y, c) = b.forward(store, &h, drop);
                res.push(c);
                h = y;
            }
            z_enc.push(z);
            z_ref.push(h);
            embeddings = emb;
            steps.push(StepCache {
                enc,
                cat,
                fusion_pre,
                res,
            });
        }
        let last = &z_ref[w - 1];

        let mut out = Forward {
            y_hat: [0.0; N_TARGETS],
            alpha: Vec::new(),
            alpha_heads: Vec::new(),
            beta: Vec::new(),
            gate: Vec::new(),
            c_time: Vec::new(),
            c_feat: Vec::new(),
            c: vec![0.0; d_z],
            z_enc,
            z_ref: Vec::new(),
            embeddings: Vec::new(),
            z_next: Vec::new(),
            koop_sq: 0.0,
            koop_pairs: w - 1,
        };
        let attn = if self.flags.no_control {
            None
        } else {
            Some(self.attention(store, &z_ref, &embeddings, &mut out))
        };

        let k = store.value(self.k);
        let mut z_next = k.matvec(last)?;
        add_into(&mut z_next, &out.c);
        let mut resid = Vec::with_capacity(w - 1);
        for t in 0..w - 1 {
            let kz = k.matvec(&z_ref[t])?;
            let r: Vec<f64> = (0..d_z)
                .map(|i| z_ref[t + 1][i] - kz[i] - out.c[i])
                .collect();
            out.koop_sq += dot(&r, &r);
            resid.push(r);
        }

        let mut h = z_next.clone();
        let mut dec = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, c) = layer.forward(store, &h);
            dec.push(c);
            h = y;
        }
        let y = self.head.forward(store, &h);
        out.y_hat = [y[0], y[1], y[2]];
        out.z_ref = z_ref;
        out.embeddings = embeddings;
        out.z_next = z_next;
        Ok(Cache {
            steps,
            attn,
            dec,
            dec_h: h,
            resid,
            out,
        })
    }

    fn attention(
        &self,
        store: &ParamStore,
        z_ref: &[Vec<f64>],
        embeds: &[Vec<f64>],
        out: &mut Forward,
    ) -> AttnCache {
        let d_z = self.config.d_z;
        let d_k = self.config.d_k();
        let heads = self.config.n_heads;
        let w = z_ref.len();
        let last = &z_ref[w - 1];
        let scale = 1.0 / (d_k as f64).sqrt();

        let q = self.wq.forward(store, last);
        let keys: Vec<Vec<f64>> = z_ref.iter().map(|z| self.wk.forward(store, z)).collect();
        let mut c_time = vec![0.0; d_z];
        if self.flags.no_temporal_attention {
            for z in z_ref {
                for (c, v) in c_time.iter_mut().zip(z) {
                    *c += v / w as f64;
                }
            }
            out.alpha_heads = vec![vec![1.0 / w as f64; w]; heads];
        } else {
            for h in 0..heads {
                let s = h * d_k..(h + 1) * d_k;
                let mut a: Vec<f64> = keys
                    .iter()
                    .map(|k| dot(&q[s.clone()], &k[s.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut a);
                for (alpha, z) in a.iter().zip(z_ref) {
                    for i in s.clone() {
                        c_time[i] += alpha * z[i];
                    }
                }
                out.alpha_heads.push(a);
            }
        }
        out.alpha = (0..w)
            .map(|t| out.alpha_heads.iter().map(|a| a[t]).sum::<f64>() / heads as f64)
            .collect();

        let v = self.wv.forward(store, last);
        let ukeys: Vec<Vec<f64>> = self
            .feat_keys
            .iter()
            .zip(embeds)
            .map(|(l, e)| l.forward(store, e))
            .collect();
        let vals: Vec<Vec<f64>> = self
            .feat_vals
            .iter()
            .zip(embeds)
            .map(|(l, e)| l.forward(store, e))
            .collect();
        let n_g = embeds.len();
        let beta = if self.flags.no_feature_attention {
            vec![1.0 / n_g as f64; n_g]
        } else {
            let mut b: Vec<f64> = ukeys.iter().map(|u| dot(&v, u) * scale).collect();
            softmax_in_place(&mut b);
            b
        };
        let mut c_feat = vec![0.0; d_z];
        for (b, val) in beta.iter().zip(&vals) {
            for (c, x) in c_feat.iter_mut().zip(val) {
                *c += b * x;
            }
        }

        let mut gate_in = last.clone();
        gate_in.extend_from_slice(&c_time);
        let g: Vec<f64> = self
            .gate
            .forward(store, &gate_in)
            .into_iter()
            .map(sigmoid)
            .collect();
        out.c = (0..d_z)
            .map(|i| g[i] * c_feat[i] + (1.0 - g[i]) * c_time[i])
            .collect();
        out.beta = beta;
        out.gate = g;
        out.c_time = c_time;
        out.c_feat = c_feat;
        AttnCache {
            q,
            keys,
            v,
            ukeys,
            vals,
            gate_in,
        }
    }

    /// Accumulate gradients of `d_y·ŷ + koop_coef·koop_sq` into `grads`.
    /// With `koop_k == false` the residual term is left out of `∂/∂K`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &Cache,
        d_y: &[f64; N_TARGETS],
        koop_coef: f64,
        koop_k: bool,
        grads: &mut GradSet,
    ) {
        let d_z = self.config.d_z;
        let out = &cache.out;
        let w = out.z_ref.len();
        let k = store.value(self.k);

        let mut dh = vec![0.0; d_z];
        self.head
            .backward(store, &cache.dec_h, d_y, grads, Some(&mut dh));
        for (layer, c) in self.decoder.iter().zip(&cache.dec).rev() {
            dh = layer.backward(store, c, &dh, grads);
        }
        let dz_next = dh;

        let mut dz_ref = vec![vec![0.0; d_z]; w];
        outer_acc(grads.get_mut(self.k), 1.0, &dz_next, &out.z_ref[w - 1]);
        gemv_t_acc(k, &dz_next, &mut dz_ref[w - 1]);
        let mut dc = dz_next.clone();

        if koop_coef != 0.0 {
            for (t, r) in cache.resid.iter().enumerate() {
                let dr: Vec<f64> = r.iter().map(|x| 2.0 * koop_coef * x).collect();
                add_into(&mut dz_ref[t + 1], &dr);
                let neg: Vec<f64> = dr.iter().map(|x| -x).collect();
                gemv_t_acc(k, &neg, &mut dz_ref[t]);
                if koop_k {
                    outer_acc(grads.get_mut(self.k), -1.0, &dr, &out.z_ref[t]);
                }
                for (a, b) in dc.iter_mut().zip(&dr) {
                    *a -= b;
                }
            }
        }

        let mut d_embed = vec![Vec::new(); self.encoders.len()];
        if let Some(attn) = &cache.attn {
            d_embed = self.attention_backward(store, attn, out, &dc, &mut dz_ref, grads);
        }

        for (t, step) in cache.steps.iter().enumerate() {
            let mut dz = dz_ref[t].clone();
            for (b, c) in self.res.iter().zip(&step.res).rev() {
                dz = b.backward(store, c, &dz, grads);
            }
            let df: Vec<f64> = dz
                .iter()
                .zip(&step.fusion_pre)
                .map(|(d, &p)| d * silu_grad(p))
                .collect();
            let mut dcat = vec![0.0; step.cat.len()];
            self.fusion
                .backward(store, &step.cat, &df, grads, Some(&mut dcat));
            let mut off = 0;
            for (gi, (enc, caches)) in self.encoders.iter().zip(&step.enc).enumerate() {
                let width = self.config.embed_dim(enc.modality);
                let mut d = dcat[off..off + width].to_vec();
                off += width;
                if t == w - 1 && !d_embed[gi].is_empty() {
                    add_into(&mut d, &d_embed[gi]);
                }
                for (layer, c) in enc.layers.iter().zip(caches).rev() {
                    d = layer.backward(store, c, &d, grads);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        store: &ParamStore,
        attn: &AttnCache,
        out: &Forward,
        dc: &[f64],
        dz_ref: &mut [Vec<f64>],
        grads: &mut GradSet,
    ) -> Vec<Vec<f64>> {
        let d_z = self.config.d_z;
        let d_k = self.config.d_k();
        let w = out.z_ref.len();
        let n_g = self.encoders.len();
        let scale = 1.0 / (d_k as f64).sqrt();
        let g = &out.gate;

        let mut dcf = vec![0.0; d_z];
        let mut dct = vec![0.0; d_z];
        let mut dpre = vec![0.0; d_z];
        for i in 0..d_z {
            dcf[i] = dc[i] * g[i];
            dct[i] = dc[i] * (1.0 - g[i]);
            let dg = dc[i] * (out.c_feat[i] - out.c_time[i]);
            dpre[i] = dg * g[i] * (1.0 - g[i]);
        }
        let mut dgate_in = vec![0.0; 2 * d_z];
        self.gate
            .backward(store, &attn.gate_in, &dpre, grads, Some(&mut dgate_in));
        add_into(&mut dz_ref[w - 1], &dgate_in[..d_z]);
        add_into(&mut dct, &dgate_in[d_z..]);

        let mut d_embed: Vec<Vec<f64>> =
            out.embeddings.iter().map(|e| vec![0.0; e.len()]).collect();
        let dbeta: Vec<f64> = attn.vals.iter().map(|v| dot(&dcf, v)).collect();
        for gi in 0..n_g {
            let dval: Vec<f64> = dcf.iter().map(|d| d * out.beta[gi]).collect();
            self.feat_vals[gi].backward(
                store,
                &out.embeddings[gi],
                &dval,
                grads,
                Some(&mut d_embed[gi]),
            );
        }
        if !self.flags.no_feature_attention {
            let mix: f64 = out.beta.iter().zip(&dbeta).map(|(b, d)| b * d).sum();
            let mut dv = vec![0.0; d_k];
            for gi in 0..n_g {
                let ds = out.beta[gi] * (dbeta[gi] - mix) * scale;
                for (a, u) in dv.iter_mut().zip(&attn.ukeys[gi]) {
                    *a += ds * u;
                }
                let du: Vec<f64> = attn.v.iter().map(|x| ds * x).collect();
                self.feat_keys[gi].backward(
                    store,
                    &out.embeddings[gi],
                    &du,
                    grads,
                    Some(&mut d_embed[gi]),
                );
            }
            self.wv.backward(
                store,
                &out.z_ref[w - 1],
                &dv,
                grads,
                Some(&mut dz_ref[w - 1]),
            );
        }

        if self.flags.no_temporal_attention {
            for dz in dz_ref.iter_mut() {
                for (a, b) in dz.iter_mut().zip(&dct) {
                    *a += b / w as f64;
                }
            }
        } else {
            let mut dq = vec![0.0; d_z];
            let mut dkeys = vec![vec![0.0; d_z]; w];
            for (h, alpha) in out.alpha_heads.iter().enumerate() {
                let s = h * d_k..(h + 1) * d_k;
                let dalpha: Vec<f64> = out
                    .z_ref
                    .iter()
                    .map(|z| dot(&dct[s.clone()], &z[s.clone()]))
                    .collect();
                let mix: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                for t in 0..w {
                    for i in s.clone() {
                        dz_ref[t][i] += alpha[t] * dct[i];
                    }
                    let ds = alpha[t] * (dalpha[t] - mix) * scale;
                    for i in s.clone() {
                        dq[i] += ds * attn.keys[t][i];
                        dkeys[t][i] += ds * attn.q[i];
                    }
                }
            }
            self.wq.backward(
                store,
                &out.z_ref[w - 1],
                &dq,
                grads,
                Some(&mut dz_ref[w - 1]),
            );
            for t in 0..w {
                let (z, dk) = (&out.z_ref[t], &dkeys[t]);
                self.wk.backward(store, z, dk, grads, Some(&mut dz_ref[t]));
            }
        }
        d_embed
    }
}

/// Architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct NkmModel {
    pub net: Net,
    pub store: ParamStore,
    pub seed: u64,
}

impl NkmModel {
    pub fn new(config: &ArchConfig, flags: AblationFlags, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Net::build(config, flags, seed, &mut store)?;
        Ok(Self { net, store, seed })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.net.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.net.flags
    }

    pub fn koopman(&self) -> &crate::numerics::Matrix {
        self.store.value(self.net.k)
    }

    pub fn koopman_mut(&mut self) -> &mut crate::numerics::Matrix {
        self.store.value_mut(self.net.k)
    }

    /// Evaluation-mode forward pass (dropout off).
    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<Forward> {
        Ok(self.net.forward(&self.store, inputs, None)?.out)
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<[f64; N_TARGETS]> {
        Ok(self.forward(inputs)?.y_hat)
    }
}
