//! Forward and backward passes of the full network over a batch of pairs,
//! plus single-flow entry points that work on padded n-step arrays.

use ndarray::{s, Array2, ArrayView1, Axis};

use super::layers::{BiGru, BiGruCache, Linear, Packing};
use super::{Branch, ModelState, Params};
use crate::error::{Error, Result};
use crate::flow::{FlowSequence, ParallelFlowPair};
use crate::train::losses::{cosine_loss, softmax_ce, LossParts, LossWeights};

/// One training pair, as valid (unpadded) token slices.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub tls: &'a [u16],
    pub tun: &'a [u16],
    pub label: usize,
}

impl<'a> From<&'a ParallelFlowPair> for PairInput<'a> {
    fn from(p: &'a ParallelFlowPair) -> Self {
        PairInput {
            tls: p.tls.valid_tokens(),
            tun: p.tun.valid_tokens(),
            label: p.label,
        }
    }
}

/// How the protocol-head gradient re-enters the protocol encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrlMode {
    Reverse,
    /// Plain backpropagation, for comparisons only.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// The full two-branch objective. Terms with zero weight are skipped
    /// entirely and report 0.
    Dual { weights: LossWeights, grl: GrlMode },
    /// App-head cross-entropy on the tunnel branch alone.
    TunnelOnly,
}

fn check_tokens(seq: &[u16], vocab: usize) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidInput("flow has no valid tokens".into()));
    }
    if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Config(format!("token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

fn embed_packed(emb: &Array2<f64>, seqs: &[&[u16]]) -> Result<(Packing, Vec<u16>, Array2<f64>)> {
    for s in seqs {
        check_tokens(s, emb.nrows())?;
    }
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let pk = Packing::new(&lens);
    let tokens: Vec<u16> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let mut x = Array2::zeros((tokens.len(), emb.ncols()));
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r).assign(&emb.row(t as usize));
    }
    Ok((pk, tokens, x))
}

fn pool(z: &Array2<f64>, pk: &Packing) -> Array2<f64> {
    let mut out = Array2::zeros((pk.batch(), z.ncols()));
    for b in 0..pk.batch() {
        let rows = z.slice(s![pk.rows_of(b), ..]);
        out.row_mut(b).assign(&rows.mean_axis(Axis(0)).expect("non-empty sequence"));
    }
    out
}

fn unpool_into(dpool: &Array2<f64>, pk: &Packing, dz: &mut Array2<f64>) {
    for b in 0..pk.batch() {
        let scale = 1.0 / pk.len_of(b) as f64;
        for r in pk.rows_of(b) {
            dz.row_mut(r).scaled_add(scale, &dpool.row(b));
        }
    }
}

struct Encoded {
    pk: Packing,
    tokens: Vec<u16>,
    x: Array2<f64>,
    zp: Option<BiGruCache>,
    za: BiGruCache,
    pool_p: Option<Array2<f64>>,
    pool_a: Array2<f64>,
}

impl Encoded {
    fn new(emb: &Array2<f64>, br: &Branch, seqs: &[&[u16]], with_protocol: bool) -> Result<Self> {
        let (pk, tokens, x) = embed_packed(emb, seqs)?;
        let za = br.enc_a.forward(x.clone(), &pk);
        let pool_a = pool(&za.out, &pk);
        let zp = with_protocol.then(|| br.enc_p.forward(x.clone(), &pk));
        let pool_p = zp.as_ref().map(|c| pool(&c.out, &pk));
        Ok(Encoded {
            pk,
            tokens,
            x,
            zp,
            za,
            pool_p,
            pool_a,
        })
    }

    fn zp(&self) -> &Array2<f64> {
        &self.zp.as_ref().expect("protocol view computed").out
    }
}

/// Decoder input rows follow `pk_p`; the app half of step t comes from the
/// `za` sequence of the same sample when it has a step t, else zeros.
fn decoder_input(zp: &Array2<f64>, pk_p: &Packing, za: &Array2<f64>, pk_a: &Packing) -> Array2<f64> {
    let w = zp.ncols();
    let mut input = Array2::zeros((zp.nrows(), 2 * w));
    input.slice_mut(s![.., ..w]).assign(zp);
    for b in 0..pk_p.batch() {
        let shared = pk_p.len_of(b).min(pk_a.len_of(b));
        for t in 0..shared {
            input
                .slice_mut(s![pk_p.row(b, t), w..])
                .assign(&za.row(pk_a.row(b, t)));
        }
    }
    input
}

struct Decoded {
    gru: BiGruCache,
    out: Array2<f64>,
}

fn decode_packed(params: &Params, input: Array2<f64>, pk: &Packing) -> Decoded {
    let gru = params.dec.forward(input, pk);
    let out = params.dec_out.forward(&gru.out);
    Decoded { gru, out }
}

/// Returns the gradient with respect to the decoder input.
fn decode_backward(params: &Params, dec: &Decoded, pk: &Packing, d_out: &Array2<f64>, g: &mut Params) -> Array2<f64> {
    let d_gru = params.dec_out.backward(&dec.gru.out, d_out, &mut g.dec_out);
    params.dec.backward(&dec.gru, pk, d_gru, &mut g.dec)
}

/// Squared reconstruction error and its gradient, weighted by `w`.
fn recon_error(out: &Array2<f64>, x: &Array2<f64>, w: f64) -> (f64, Array2<f64>) {
    let diff = out - x;
    let err = diff.iter().map(|v| v * v).sum();
    (err, diff * (2.0 * w))
}

fn head_ce(
    head: &Linear,
    pooled: &Array2<f64>,
    labels: &[usize],
    w: f64,
) -> (f64, Array2<f64>) {
    let logits = head.forward(pooled);
    let mut dlog = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let (l, g) = softmax_ce(logits.row(b).as_slice().expect("contiguous"), y);
        total += l;
        dlog.row_mut(b).assign(&ArrayView1::from(&g[..]));
    }
    dlog *= w;
    (total, dlog)
}

fn branch_grads(g: &mut Params, i: usize) -> &mut Branch {
    if i == 0 {
        &mut g.tls
    } else {
        &mut g.tun
    }
}

/// Loss terms of a batch, each summed over samples and multiplied by
/// `scale` (1 / full batch size when the batch is split into shards).
/// Gradients of the weighted objective are added into `grads`.
pub fn batch_loss(
    params: &Params,
    grl_lambda: f64,
    batch: &[PairInput],
    objective: &Objective,
    scale: f64,
    grads: Option<&mut Params>,
) -> Result<LossParts> {
    batch_loss_with_targets(params, grl_lambda, batch, objective, scale, grads, None)
}

/// As [`batch_loss`], but reconstruction targets are looked up in
/// `targets` instead of the live embedding. Targets never receive
/// gradient, so this is how finite differences hold them fixed.
pub(crate) fn batch_loss_with_targets(
    params: &Params,
    grl_lambda: f64,
    batch: &[PairInput],
    objective: &Objective,
    scale: f64,
    grads: Option<&mut Params>,
    targets: Option<&Array2<f64>>,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Ok(LossParts::default());
    }
    match objective {
        Objective::Dual { weights, grl } => {
            let factor = match grl {
                GrlMode::Reverse => -grl_lambda,
                GrlMode::Identity => 1.0,
            };
            dual_loss(params, factor, batch, weights, scale, grads, targets)
        }
        Objective::TunnelOnly => tunnel_loss(params, batch, scale, grads),
    }
}

fn tunnel_loss(params: &Params, batch: &[PairInput], scale: f64, mut grads: Option<&mut Params>) -> Result<LossParts> {
    let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();
    let seqs: Vec<&[u16]> = batch.iter().map(|p| p.tun).collect();
    let enc = Encoded::new(&params.emb, &params.tun, &seqs, false)?;
    let (ce, dlog) = head_ce(&params.app_head, &enc.pool_a, &labels, scale);
    if let Some(g) = grads.as_deref_mut() {
        let dpool = params.app_head.backward(&enc.pool_a, &dlog, &mut g.app_head);
        let mut dz = Array2::zeros(enc.za.out.raw_dim());
        unpool_into(&dpool, &enc.pk, &mut dz);
        let dx = params.tun.enc_a.backward(&enc.za, &enc.pk, dz, &mut g.tun.enc_a);
        scatter_embedding(&mut g.emb, &enc.tokens, &dx);
    }
    Ok(LossParts {
        asc: ce * scale,
        ..LossParts::default()
    })
}

fn scatter_embedding(g: &mut Array2<f64>, tokens: &[u16], dx: &Array2<f64>) {
    for (r, &t) in tokens.iter().enumerate() {
        g.row_mut(t as usize).scaled_add(1.0, &dx.row(r));
    }
}

fn dual_loss(
    params: &Params,
    grl_factor: f64,
    batch: &[PairInput],
    w: &LossWeights,
    scale: f64,
    mut grads: Option<&mut Params>,
    targets: Option<&Array2<f64>>,
) -> Result<LossParts> {
    let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();
    let with_p = w.lambda1 > 0.0 || w.lambda2 > 0.0 || w.lambda3 > 0.0;
    let tls_seqs: Vec<&[u16]> = batch.iter().map(|p| p.tls).collect();
    let tun_seqs: Vec<&[u16]> = batch.iter().map(|p| p.tun).collect();
    let enc = [
        Encoded::new(&params.emb, &params.tls, &tls_seqs, with_p)?,
        Encoded::new(&params.emb, &params.tun, &tun_seqs, with_p)?,
    ];
    let branches = [&params.tls, &params.tun];
    let backward = grads.is_some();

    let mut parts = LossParts::default();
    let mut dpool_p: Vec<Array2<f64>> = enc.iter().map(|e| Array2::zeros(e.pool_a.raw_dim())).collect();
    let mut dpool_a = dpool_p.clone();
    let mut dz_p: Vec<Array2<f64>> = enc.iter().map(|e| Array2::zeros(e.za.out.raw_dim())).collect();
    let mut dz_a = dz_p.clone();

    if w.lambda2 > 0.0 {
        for i in 0..2 {
            let pooled = enc[i].pool_p.as_ref().expect("protocol view computed");
            let head = &branches[i].proto_head;
            let (ce, dlog) = head_ce(head, pooled, &labels, scale * w.lambda2);
            parts.psm += ce * scale;
            if let Some(g) = grads.as_deref_mut() {
                let dpool = head.backward(pooled, &dlog, &mut branch_grads(g, i).proto_head);
                dpool_p[i].scaled_add(grl_factor, &dpool);
            }
        }
    }

    if w.lambda5 > 0.0 {
        for i in 0..2 {
            let (ce, dlog) = head_ce(&params.app_head, &enc[i].pool_a, &labels, scale * w.lambda5);
            parts.asc += ce * scale;
            if let Some(g) = grads.as_deref_mut() {
                dpool_a[i] += &params.app_head.backward(&enc[i].pool_a, &dlog, &mut g.app_head);
            }
        }
    }

    if w.lambda4 > 0.0 {
        let k = w.lambda4 * scale;
        for b in 0..batch.len() {
            let (l, ga, gb) = cosine_loss(
                enc[0].pool_a.row(b).as_slice().expect("contiguous"),
                enc[1].pool_a.row(b).as_slice().expect("contiguous"),
            );
            parts.asa += l * scale;
            if backward {
                dpool_a[0].row_mut(b).scaled_add(k, &ArrayView1::from(&ga[..]));
                dpool_a[1].row_mut(b).scaled_add(k, &ArrayView1::from(&gb[..]));
            }
        }
    }

    // (target branch, app-feature source branch, weight); self then cross
    let mut decodes = Vec::new();
    if w.lambda1 > 0.0 {
        decodes.extend([(0, 0, w.lambda1), (1, 1, w.lambda1)]);
    }
    if w.lambda3 > 0.0 {
        decodes.extend([(0, 1, w.lambda3), (1, 0, w.lambda3)]);
    }
    for (i, j, lambda) in decodes {
        let (ei, ej) = (&enc[i], &enc[j]);
        let input = decoder_input(ei.zp(), &ei.pk, &ej.za.out, &ej.pk);
        let dec = decode_packed(params, input, &ei.pk);
        let fixed;
        let target = match targets {
            Some(table) => {
                fixed = table.select(Axis(0), &ei.tokens.iter().map(|&t| t as usize).collect::<Vec<_>>());
                &fixed
            }
            None => &ei.x,
        };
        let (err, d_out) = recon_error(&dec.out, target, scale * lambda);
        if i == j {
            parts.src += err * scale;
        } else {
            parts.cpd += err * scale;
        }
        if let Some(g) = grads.as_deref_mut() {
            let d_in = decode_backward(params, &dec, &ei.pk, &d_out, g);
            let h2 = ei.za.out.ncols();
            dz_p[i] += &d_in.slice(s![.., ..h2]);
            for b in 0..batch.len() {
                for t in 0..ei.pk.len_of(b).min(ej.pk.len_of(b)) {
                    dz_a[j]
                        .row_mut(ej.pk.row(b, t))
                        .scaled_add(1.0, &d_in.slice(s![ei.pk.row(b, t), h2..]));
                }
            }
        }
    }

    if let Some(g) = grads {
        for i in 0..2 {
            let e = &enc[i];
            let mut dza = std::mem::take(&mut dz_a[i]);
            unpool_into(&dpool_a[i], &e.pk, &mut dza);
            let gb = branch_grads(g, i);
            let mut dx = branches[i].enc_a.backward(&e.za, &e.pk, dza, &mut gb.enc_a);
            if let Some(zp) = &e.zp {
                let mut dzp = std::mem::take(&mut dz_p[i]);
                unpool_into(&dpool_p[i], &e.pk, &mut dzp);
                dx += &branches[i].enc_p.backward(zp, &e.pk, dzp, &mut gb.enc_p);
            }
            scatter_embedding(&mut g.emb, &e.tokens, &dx);
        }
    }
    Ok(parts)
}

/// Pooled app-view features and app-head logits of tunnel flows. Reads only
/// the embedding, the tunnel app-view encoder and the app head.
pub fn tunnel_features(params: &Params, seqs: &[&[u16]]) -> Result<(Array2<f64>, Array2<f64>)> {
    if seqs.is_empty() {
        let h2 = 2 * params.tun.enc_a.hidden();
        return Ok((Array2::zeros((0, h2)), Array2::zeros((0, params.app_head.b.ncols()))));
    }
    let (pk, _, x) = embed_packed(&params.emb, seqs)?;
    let za = params.tun.enc_a.forward(x, &pk);
    let pooled = pool(&za.out, &pk);
    let logits = params.app_head.forward(&pooled);
    Ok((pooled, logits))
}

/// Gradient reversal, forward: identity.
pub fn grl_forward(v: &Array2<f64>) -> Array2<f64> {
    v.clone()
}

/// Gradient reversal, backward: scales by −λ.
pub fn grl_backward(g: &Array2<f64>, lambda: f64) -> Array2<f64> {
    g * -lambda
}

/// Embeds a padded flow; `mask[i]` marks non-pad tokens.
pub fn embed(flow: &FlowSequence, state: &ModelState) -> Result<(Array2<f64>, Vec<bool>)> {
    let emb = &state.params.emb;
    if let Some(&t) = flow.tokens.iter().find(|&&t| t as usize >= emb.nrows()) {
        return Err(Error::Config(format!("token {t} outside vocabulary of {}", emb.nrows())));
    }
    let mut x = Array2::zeros((flow.tokens.len(), emb.ncols()));
    for (i, &t) in flow.tokens.iter().enumerate() {
        x.row_mut(i).assign(&emb.row(t as usize));
    }
    Ok((x, flow.mask()))
}

fn valid_rows(mask: &[bool]) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("mask has no valid step".into()));
    }
    Ok(rows)
}

fn compact(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

fn expand(z: &Array2<f64>, rows: &[usize], n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, z.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(r).assign(&z.row(k));
    }
    out
}

/// Runs a bidirectional stack over the valid steps of an n-step input.
/// Pad steps are skipped and come out as zero rows.
pub fn bigru_encode(x: &Array2<f64>, mask: &[bool], enc: &BiGru) -> Result<Array2<f64>> {
    if mask.len() != x.nrows() {
        return Err(Error::InvalidInput("mask length differs from input".into()));
    }
    let rows = valid_rows(mask)?;
    let pk = Packing::new(&[rows.len()]);
    let z = enc.forward(compact(x, &rows), &pk).out;
    Ok(expand(&z, &rows, x.nrows()))
}

/// Reconstructs n × d embeddings from per-step protocol and app features.
pub fn decode(z_p: &Array2<f64>, z_a: &Array2<f64>, mask: &[bool], params: &Params) -> Result<Array2<f64>> {
    if z_p.dim() != z_a.dim() || z_p.nrows() != mask.len() {
        return Err(Error::InvalidInput("decoder inputs disagree in shape".into()));
    }
    let rows = valid_rows(mask)?;
    let pk = Packing::new(&[rows.len()]);
    let input = ndarray::concatenate(Axis(1), &[compact(z_p, &rows).view(), compact(z_a, &rows).view()])
        .expect("equal row counts");
    let out = decode_packed(params, input, &pk).out;
    Ok(expand(&out, &rows, mask.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchActivations {
    /// n × d
    pub x: Array2<f64>,
    pub mask: Vec<bool>,
    /// n × 2H
    pub z_p: Array2<f64>,
    pub z_a: Array2<f64>,
    pub pooled_p: Vec<f64>,
    pub pooled_a: Vec<f64>,
    pub logits_p: Vec<f64>,
    pub logits_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairActivations {
    pub tls: BranchActivations,
    pub tun: BranchActivations,
    /// Self reconstructions.
    pub recon_tls: Array2<f64>,
    pub recon_tun: Array2<f64>,
    /// Reconstructions with app features swapped between branches.
    pub cross_tls: Array2<f64>,
    pub cross_tun: Array2<f64>,
}

fn masked_mean(z: &Array2<f64>, mask: &[bool]) -> Vec<f64> {
    let rows = valid_rows(mask).expect("validated flow");
    compact(z, &rows).mean_axis(Axis(0)).expect("non-empty").to_vec()
}

fn branch_forward(flow: &FlowSequence, br: &Branch, state: &ModelState) -> Result<BranchActivations> {
    let (x, mask) = embed(flow, state)?;
    let z_p = bigru_encode(&x, &mask, &br.enc_p)?;
    let z_a = bigru_encode(&x, &mask, &br.enc_a)?;
    let pooled_p = masked_mean(&z_p, &mask);
    let pooled_a = masked_mean(&z_a, &mask);
    let head = |l: &Linear, v: &[f64]| {
        let row = Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
        l.forward(&grl_forward(&row)).row(0).to_vec()
    };
    let logits_p = head(&br.proto_head, &pooled_p);
    let logits_a = head(&state.params.app_head, &pooled_a);
    Ok(BranchActivations {
        x,
        mask,
        z_p,
        z_a,
        pooled_p,
        pooled_a,
        logits_p,
        logits_a,
    })
}

/// Full forward pass of one pair, as padded n-step arrays.
pub fn forward_pair(pair: &ParallelFlowPair, state: &ModelState) -> Result<PairActivations> {
    let p = &state.params;
    let tls = branch_forward(&pair.tls, &p.tls, state)?;
    let tun = branch_forward(&pair.tun, &p.tun, state)?;
    if tls.x.nrows() != tun.x.nrows() {
        return Err(Error::InvalidInput("pair branches have different sequence lengths".into()));
    }
    let recon_tls = decode(&tls.z_p, &tls.z_a, &tls.mask, p)?;
    let recon_tun = decode(&tun.z_p, &tun.z_a, &tun.mask, p)?;
    let cross_tls = decode(&tls.z_p, &tun.z_a, &tls.mask, p)?;
    let cross_tun = decode(&tun.z_p, &tls.z_a, &tun.mask, p)?;
    Ok(PairActivations {
        tls,
        tun,
        recon_tls,
        recon_tun,
        cross_tls,
        cross_tun,
    })
}
