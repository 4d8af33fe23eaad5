//! Classification heads over spatial feature grids.
//!
//! Two episode heads share an embedder: pooled prototypes compared by squared
//! Euclidean or cosine distance, and cross-attention alignment where each
//! query position attends over every support image and position of a class to
//! build a query-aligned prototype. A test-time logistic regression over
//! pooled features can be blended into the attention logits.

use crate::embedder::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum_f32, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Linear key/query and value maps. One matrix produces both keys and
/// queries; values use their own map. No biases anywhere.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// [D, d_k]
    pub key_query: Tensor,
    /// [D, d_v]
    pub value: Tensor,
}

impl HeadParams {
    pub fn init(d: usize, d_k: usize, d_v: usize, rng: &mut ChaCha8Rng) -> Result<HeadParams> {
        if d == 0 || d_k == 0 || d_v == 0 {
            return Err(Error::Config(format!(
                "head dims must be positive, got D={d} d_k={d_k} d_v={d_v}"
            )));
        }
        let std = (1.0 / d as f32).sqrt();
        Ok(HeadParams {
            key_query: Tensor::randn(&[d, d_k], std, rng),
            value: Tensor::randn(&[d, d_v], std, rng),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.key_query.shape[0]
    }

    pub fn d_k(&self) -> usize {
        self.key_query.shape[1]
    }

    pub fn d_v(&self) -> usize {
        self.value.shape[1]
    }

    /// Softmax temperature sqrt(d_k).
    pub fn temperature(&self) -> f32 {
        (self.d_k() as f32).sqrt()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("head.key_query".to_string(), &self.key_query), ("head.value".to_string(), &self.value)]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.key_query".to_string(), &mut self.key_query),
            ("head.value".to_string(), &mut self.value),
        ]
    }
}

pub struct HeadVars {
    pub key_query: Var,
    pub value: Var,
}

pub fn bind(g: &mut Graph, params: &HeadParams) -> HeadVars {
    HeadVars { key_query: g.leaf(&params.key_query), value: g.leaf(&params.value) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtoMetric {
    SqEuclid,
    Cosine,
}

// ----- value-level cross-attention ops -----

/// Raw scores and normalized weights over (support image j, support position
/// m) for each query position p. Layout: index (j*m + m')*p + p'.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub raw: Vec<f32>,
    pub weights: Vec<f32>,
}

impl AttentionTensor {
    #[inline]
    pub fn weight(&self, j: usize, m: usize, p: usize) -> f32 {
        self.weights[(j * self.m + m) * self.p + p]
    }

    #[inline]
    pub fn raw_score(&self, j: usize, m: usize, p: usize) -> f32 {
        self.raw[(j * self.m + m) * self.p + p]
    }

    /// The p=m delta pattern on support image j_star: weight 1 where the
    /// support position equals the query position, 0 elsewhere.
    pub fn delta(n: usize, m: usize, j_star: usize) -> Result<AttentionTensor> {
        if j_star >= n {
            return Err(Error::shape("delta_attention", format!("image {j_star} of {n}")));
        }
        let p = m;
        let mut weights = vec![0.0f32; n * m * p];
        for pos in 0..p {
            weights[(j_star * m + pos) * p + pos] = 1.0;
        }
        Ok(AttentionTensor { n, m, p, raw: weights.clone(), weights })
    }
}

/// Applies a [D, out] linear map to every grid position: rows [P, out].
fn map_positions(fm: &FeatureMap, mat: &Tensor) -> Result<Vec<f32>> {
    if mat.shape.len() != 2 || mat.shape[0] != fm.d {
        return Err(Error::shape(
            "head_map",
            format!("map {:?} does not take {}-dim features", mat.shape, fm.d),
        ));
    }
    let out_dim = mat.shape[1];
    let p = fm.positions();
    let mut out = vec![0.0f32; p * out_dim];
    for pos in 0..p {
        let row = fm.row(pos);
        for o in 0..out_dim {
            let mut acc = 0.0f64;
            for (ch, &f) in row.iter().enumerate() {
                acc += f as f64 * mat.data[ch * out_dim + o] as f64;
            }
            out[pos * out_dim + o] = acc as f32;
        }
    }
    Ok(out)
}

/// Per-image value vectors [P, d_v] for a class's support feature maps.
pub fn support_values(fms: &[FeatureMap], params: &HeadParams) -> Result<Vec<Vec<f32>>> {
    fms.iter().map(|fm| map_positions(fm, &params.value)).collect()
}

/// Query value vectors w_p, layout [P, d_v].
pub fn query_values(fm: &FeatureMap, params: &HeadParams) -> Result<Vec<f32>> {
    map_positions(fm, &params.value)
}

/// Attention of one query against one class's support set.
pub fn ctx_attention(
    query_fm: &FeatureMap,
    support_fms: &[FeatureMap],
    params: &HeadParams,
) -> Result<AttentionTensor> {
    if support_fms.is_empty() {
        return Err(Error::Episode("attention over an empty support class".to_string()));
    }
    for fm in support_fms {
        if (fm.h, fm.w, fm.d) != (query_fm.h, query_fm.w, query_fm.d) {
            return Err(Error::shape(
                "ctx_attention",
                format!(
                    "support grid {}x{}x{} vs query {}x{}x{}",
                    fm.h, fm.w, fm.d, query_fm.h, query_fm.w, query_fm.d
                ),
            ));
        }
    }
    if params.d_k() == 0 {
        return Err(Error::Config("d_k must be positive".to_string()));
    }
    let d_k = params.d_k();
    let n = support_fms.len();
    let m = support_fms[0].positions();
    let p = query_fm.positions();
    let q_keys = map_positions(query_fm, &params.key_query)?;
    let mut keys = Vec::with_capacity(n);
    for fm in support_fms {
        keys.push(map_positions(fm, &params.key_query)?);
    }

    let mut raw = vec![0.0f32; n * m * p];
    for (j, kj) in keys.iter().enumerate() {
        for mm in 0..m {
            for pp in 0..p {
                let mut acc = 0.0f64;
                for t in 0..d_k {
                    acc += kj[mm * d_k + t] as f64 * q_keys[pp * d_k + t] as f64;
                }
                raw[(j * m + mm) * p + pp] = acc as f32;
            }
        }
    }

    let inv_tau = 1.0f32 / (d_k as f32).sqrt();
    let mut weights = vec![0.0f32; n * m * p];
    for pp in 0..p {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            for mm in 0..m {
                let s = (raw[(j * m + mm) * p + pp] * inv_tau) as f64;
                if s > max {
                    max = s;
                }
            }
        }
        let mut denom = 0.0f64;
        for j in 0..n {
            for mm in 0..m {
                denom += (((raw[(j * m + mm) * p + pp] * inv_tau) as f64) - max).exp();
            }
        }
        for j in 0..n {
            for mm in 0..m {
                let e = (((raw[(j * m + mm) * p + pp] * inv_tau) as f64) - max).exp();
                weights[(j * m + mm) * p + pp] = (e / denom) as f32;
            }
        }
    }
    Ok(AttentionTensor { n, m, p, raw, weights })
}

/// Query-aligned prototype t_p = sum over (j,m) of weight * value, [P, d_v].
pub fn ctx_aligned_prototype(
    att: &AttentionTensor,
    values: &[Vec<f32>],
    d_v: usize,
) -> Result<Vec<f32>> {
    if values.len() != att.n {
        return Err(Error::shape(
            "ctx_aligned_prototype",
            format!("{} value maps for {} support images", values.len(), att.n),
        ));
    }
    for v in values {
        if v.len() != att.m * d_v {
            return Err(Error::shape(
                "ctx_aligned_prototype",
                format!("value map has {} entries, want {}", v.len(), att.m * d_v),
            ));
        }
    }
    let mut out = vec![0.0f32; att.p * d_v];
    for pp in 0..att.p {
        for k in 0..d_v {
            let mut acc = 0.0f64;
            for (j, vj) in values.iter().enumerate() {
                for mm in 0..att.m {
                    acc += att.weight(j, mm, pp) as f64 * vj[mm * d_v + k] as f64;
                }
            }
            out[pp * d_v + k] = acc as f32;
        }
    }
    Ok(out)
}

/// Mean over positions of the squared distance between aligned prototype and
/// query values; 32-bit with pairwise summation over positions.
pub fn ctx_distance(proto: &[f32], qvals: &[f32], positions: usize) -> Result<f32> {
    if proto.len() != qvals.len() || positions == 0 || proto.len() % positions != 0 {
        return Err(Error::shape(
            "ctx_distance",
            format!("{} vs {} entries over {positions} positions", proto.len(), qvals.len()),
        ));
    }
    let d_v = proto.len() / positions;
    let mut per_pos = vec![0.0f32; positions];
    for pp in 0..positions {
        let mut acc = 0.0f32;
        for k in 0..d_v {
            let d = proto[pp * d_v + k] - qvals[pp * d_v + k];
            acc += d * d;
        }
        per_pos[pp] = acc;
    }
    Ok((pairwise_sum_f32(&per_pos) / positions as f64) as f32)
}

// ----- graph-level episode pipelines -----

fn episode_class_members(support_class: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if n_classes == 0 {
        return Err(Error::Episode("episode has no classes".to_string()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (j, &c) in support_class.iter().enumerate() {
        let slot = by_class
            .get_mut(c)
            .ok_or_else(|| Error::Episode(format!("support label {c} outside 0..{n_classes}")))?;
        slot.push(j);
    }
    if let Some(empty) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::Episode(format!("class {empty} has no support images")));
    }
    Ok(by_class)
}

fn check_episode_grids(g: &Graph, support_feats: Var, query_feats: Var) -> Result<(usize, usize)> {
    let s = g.shape(support_feats).to_vec();
    let q = g.shape(query_feats).to_vec();
    if s.len() != 4 || q.len() != 4 {
        return Err(Error::shape("episode_logits", format!("want rank-4 features, got {s:?}/{q:?}")));
    }
    if s[1..] != q[1..] {
        return Err(Error::shape("episode_logits", format!("support {s:?} vs query {q:?}")));
    }
    Ok((s[0], q[0]))
}

/// Attention-head logits for a whole episode: [Nq, C], entry (q,c) equal to
/// minus the aligned-prototype distance.
pub fn ctx_episode_logits_graph(
    g: &mut Graph,
    vars: &HeadVars,
    support_feats: Var,
    support_class: &[usize],
    query_feats: Var,
    n_classes: usize,
) -> Result<Var> {
    let (ns, nq) = check_episode_grids(g, support_feats, query_feats)?;
    if support_class.len() != ns {
        return Err(Error::shape(
            "ctx_episode_logits",
            format!("{} labels for {ns} support images", support_class.len()),
        ));
    }
    let shape = g.shape(support_feats).to_vec();
    let (h, w) = (shape[2], shape[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "ctx_episode_logits",
            format!("correspondence needs a grid of at least 2x2, got {h}x{w}"),
        ));
    }
    let kq_shape = g.shape(vars.key_query).to_vec();
    if kq_shape.len() != 2 || kq_shape[0] != shape[1] {
        return Err(Error::shape(
            "ctx_episode_logits",
            format!("key/query map {kq_shape:?} does not take {}-dim features", shape[1]),
        ));
    }
    let d_k = kq_shape[1];
    if d_k == 0 {
        return Err(Error::Config("d_k must be positive".to_string()));
    }
    let by_class = episode_class_members(support_class, n_classes)?;
    let p = h * w;

    let q_rows: Vec<Var> =
        (0..nq).map(|i| g.image_rows(query_feats, i)).collect::<Result<Vec<_>>>()?;
    let q_rows = g.concat_rows(&q_rows)?;
    let q_keys = g.matmul(q_rows, vars.key_query)?;
    let q_vals = g.matmul(q_rows, vars.value)?;
    let q_keys_t = g.transpose2d(q_keys)?;

    let inv_tau = 1.0f32 / (d_k as f32).sqrt();
    let mut logit_rows = Vec::with_capacity(n_classes);
    for members in &by_class {
        let rows: Vec<Var> =
            members.iter().map(|&j| g.image_rows(support_feats, j)).collect::<Result<Vec<_>>>()?;
        let s_rows = g.concat_rows(&rows)?;
        let keys = g.matmul(s_rows, vars.key_query)?;
        let values = g.matmul(s_rows, vars.value)?;
        let scores = g.matmul(keys, q_keys_t)?;
        let scaled = g.scale(scores, inv_tau)?;
        let att = g.softmax(scaled, 0)?;
        let att_t = g.transpose2d(att)?;
        let aligned = g.matmul(att_t, values)?;
        let diff = g.sub(aligned, q_vals)?;
        let sq = g.block_row_sq_norm(diff, p)?;
        let neg = g.scale(sq, -1.0 / p as f32)?;
        logit_rows.push(g.reshape(neg, &[1, nq])?);
    }
    let stacked = g.concat_rows(&logit_rows)?;
    g.transpose2d(stacked)
}

/// Pooled-prototype logits for a whole episode: [Nq, C]. Squared-Euclid uses
/// the negative distance; cosine uses similarity minus one.
pub fn proto_episode_logits_graph(
    g: &mut Graph,
    support_feats: Var,
    support_class: &[usize],
    query_feats: Var,
    n_classes: usize,
    metric: ProtoMetric,
) -> Result<Var> {
    let (ns, _) = check_episode_grids(g, support_feats, query_feats)?;
    if support_class.len() != ns {
        return Err(Error::shape(
            "proto_episode_logits",
            format!("{} labels for {ns} support images", support_class.len()),
        ));
    }
    let by_class = episode_class_members(support_class, n_classes)?;
    let pooled_s = g.spatial_mean(support_feats)?;
    let pooled_q = g.spatial_mean(query_feats)?;
    let d = g.shape(pooled_s)[1];
    let mut proto_rows = Vec::with_capacity(n_classes);
    for members in &by_class {
        let rows = g.select_rows(pooled_s, members)?;
        let mean = g.mean_axis0(rows)?;
        proto_rows.push(g.reshape(mean, &[1, d])?);
    }
    let protos = g.concat_rows(&proto_rows)?;
    match metric {
        ProtoMetric::SqEuclid => {
            let dists = g.pairwise_sq_dists(pooled_q, protos)?;
            g.scale(dists, -1.0)
        }
        ProtoMetric::Cosine => {
            let qn = g.l2_normalize_rows(pooled_q)?;
            let tn = g.l2_normalize_rows(protos)?;
            let tnt = g.transpose2d(tn)?;
            let sims = g.matmul(qn, tnt)?;
            g.add_scalar(sims, -1.0)
        }
    }
}

/// Mean softmax cross-entropy of [N, K] logits against per-row labels.
pub fn mean_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let ls = g.log_softmax(logits, 1)?;
    let picked = g.pick_cols(ls, labels)?;
    let mean = g.mean_all(picked)?;
    g.scale(mean, -1.0)
}

/// Cross-entropy of a linear classifier over all training classes, applied to
/// pooled support features. Added unweighted to the episode loss when enabled.
pub fn aux_global_loss_graph(
    g: &mut Graph,
    classifier: Var,
    pooled: Var,
    global_labels: &[usize],
) -> Result<Var> {
    let k = g.shape(classifier).get(1).copied().unwrap_or(0);
    if let Some(&bad) = global_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Episode(format!("global label {bad} outside 0..{k}")));
    }
    let logits = g.matmul(pooled, classifier)?;
    mean_cross_entropy(g, logits, global_labels)
}

// ----- value-level prototype ops -----

/// Arithmetic mean of support vectors.
pub fn proto_prototype(vectors: &[&[f32]]) -> Result<Vec<f32>> {
    let Some(first) = vectors.first() else {
        return Err(Error::Episode("prototype of an empty class".to_string()));
    };
    let d = first.len();
    let mut lane = vec![0.0f32; vectors.len()];
    let mut out = vec![0.0f32; d];
    for (k, o) in out.iter_mut().enumerate() {
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::shape("proto_prototype", format!("{} vs {d} dims", v.len())));
            }
            lane[i] = v[k];
        }
        *o = (pairwise_sum_f32(&lane) / vectors.len() as f64) as f32;
    }
    Ok(out)
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return Err(Error::Numeric("cosine of a zero-norm vector".to_string()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-class logits: negative squared Euclidean distance, or cosine
/// similarity minus one (both make "closer" mean "larger").
pub fn proto_logits(
    query: &[f32],
    prototypes: &[Vec<f32>],
    metric: ProtoMetric,
) -> Result<Vec<f32>> {
    if prototypes.len() < 2 {
        return Err(Error::Episode(format!(
            "classification needs at least 2 prototypes, got {}",
            prototypes.len()
        )));
    }
    prototypes
        .iter()
        .map(|t| {
            if t.len() != query.len() {
                return Err(Error::shape("proto_logits", format!("{} vs {}", t.len(), query.len())));
            }
            match metric {
                ProtoMetric::SqEuclid => {
                    let mut acc = 0.0f64;
                    for (&q, &v) in query.iter().zip(t) {
                        let d = q as f64 - v as f64;
                        acc += d * d;
                    }
                    Ok(-acc as f32)
                }
                ProtoMetric::Cosine => Ok((cosine(query, t)? - 1.0) as f32),
            }
        })
        .collect()
}

/// Softmax of a logit vector, computed in f64.
pub fn softmax_probs(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let exps: Vec<f64> = logits.iter().map(|&l| ((l as f64) - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / denom) as f32).collect()
}

// ----- instance-discrimination reference loss -----

/// Contrastive instance-discrimination loss, coded independently of the
/// prototype head: per query, -log of the softmax over cosine similarities to
/// every support embedding, with the query's source as the positive.
pub fn nt_xent_per_query(
    support: &[Vec<f32>],
    queries: &[Vec<f32>],
    sources: &[usize],
) -> Result<Vec<f64>> {
    if queries.len() != sources.len() {
        return Err(Error::shape(
            "nt_xent",
            format!("{} queries vs {} source labels", queries.len(), sources.len()),
        ));
    }
    let mut out = Vec::with_capacity(queries.len());
    for (q, &src) in queries.iter().zip(sources) {
        if src >= support.len() {
            return Err(Error::Episode(format!("source {src} outside support of {}", support.len())));
        }
        let sims: Vec<f64> = support.iter().map(|s| cosine(q, s)).collect::<Result<Vec<_>>>()?;
        let max = sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let logsum = max + sims.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        out.push(logsum - sims[src]);
    }
    Ok(out)
}

// ----- test-time logistic regression over pooled features -----

const LR_C_REG: f64 = 10.0;
const LR_MAX_ITERS: usize = 500;
const LR_GRAD_TOL: f64 = 1e-5;
const LR_STEP: f64 = 1.0;

/// A fitted multinomial logistic regression with unpenalized intercept.
#[derive(Debug, Clone)]
pub struct LrFit {
    pub classes: usize,
    pub dim: usize,
    /// [classes, dim]
    pub weights: Vec<f64>,
    pub intercept: Vec<f64>,
    pub iterations: usize,
}

fn normalize_rows_f64(rows: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            let norm = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric("cannot L2-normalize a zero feature vector".to_string()));
            }
            Ok(r.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect()
}

/// Full-batch gradient descent on L2-regularized multinomial log loss over
/// L2-normalized support features. Regularization weight 1/(10·n); fixed 500
/// iterations or gradient norm below 1e-5.
pub fn fit_support_lr(
    features: &[Vec<f32>],
    labels: &[usize],
    n_classes: usize,
) -> Result<LrFit> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::shape(
            "lr_fit",
            format!("{} features vs {} labels", features.len(), labels.len()),
        ));
    }
    if n_classes < 2 {
        return Err(Error::Episode("logistic regression needs at least 2 classes".to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Episode(format!("label {bad} outside 0..{n_classes}")));
    }
    let x = normalize_rows_f64(features)?;
    let n = x.len();
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("lr_fit", "ragged feature dims".to_string()));
    }
    let reg = 1.0 / (LR_C_REG * n as f64);
    let mut w = vec![0.0f64; n_classes * d];
    let mut b = vec![0.0f64; n_classes];
    let mut iterations = 0;
    for it in 0..LR_MAX_ITERS {
        iterations = it + 1;
        let mut gw = vec![0.0f64; n_classes * d];
        let mut gb = vec![0.0f64; n_classes];
        let mut loss = 0.0f64;
        for (xi, &yi) in x.iter().zip(labels) {
            let mut logits = vec![0.0f64; n_classes];
            for c in 0..n_classes {
                let mut acc = b[c];
                for k in 0..d {
                    acc += w[c * d + k] * xi[k];
                }
                logits[c] = acc;
            }
            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
            loss -= logits[yi] - max - denom.ln();
            for c in 0..n_classes {
                let p = (logits[c] - max).exp() / denom;
                let err = p - if c == yi { 1.0 } else { 0.0 };
                gb[c] += err;
                for k in 0..d {
                    gw[c * d + k] += err * xi[k];
                }
            }
        }
        loss /= n as f64;
        for (g, &wv) in gw.iter_mut().zip(&w) {
            *g = *g / n as f64 + reg * wv;
        }
        for g in &mut gb {
            *g /= n as f64;
        }
        loss += 0.5 * reg * w.iter().map(|&v| v * v).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "logistic-regression fit diverged after {iterations} iterations"
            )));
        }
        let gnorm = (gw.iter().chain(&gb).map(|&g| g * g).sum::<f64>()).sqrt();
        if gnorm < LR_GRAD_TOL {
            break;
        }
        for (wv, &g) in w.iter_mut().zip(&gw) {
            *wv -= LR_STEP * g;
        }
        for (bv, &g) in b.iter_mut().zip(&gb) {
            *bv -= LR_STEP * g;
        }
    }
    Ok(LrFit { classes: n_classes, dim: d, weights: w, intercept: b, iterations })
}

/// Logits of a fitted regression on one query (normalized like the fit).
pub fn lr_logits(fit: &LrFit, query: &[f32]) -> Result<Vec<f32>> {
    if query.len() != fit.dim {
        return Err(Error::shape("lr_logits", format!("{} vs {} dims", query.len(), fit.dim)));
    }
    let q = &normalize_rows_f64(std::slice::from_ref(&query.to_vec()))?[0];
    Ok((0..fit.classes)
        .map(|c| {
            let mut acc = fit.intercept[c];
            for k in 0..fit.dim {
                acc += fit.weights[c * fit.dim + k] * q[k];
            }
            acc as f32
        })
        .collect())
}

/// Blends attention logits with a support-fitted logistic regression:
/// combined = ctx + lambda * lr, fit at test time on pooled support features.
pub fn global_lr_combine(
    ctx_logits: &[Vec<f32>],
    pooled_support: &[Vec<f32>],
    support_labels: &[usize],
    pooled_query: &[Vec<f32>],
    lambda: f32,
) -> Result<Vec<Vec<f32>>> {
    if ctx_logits.len() != pooled_query.len() {
        return Err(Error::shape(
            "global_lr_combine",
            format!("{} logit rows vs {} queries", ctx_logits.len(), pooled_query.len()),
        ));
    }
    let n_classes = ctx_logits.first().map(|r| r.len()).unwrap_or(0);
    if n_classes == 0 {
        return Ok(Vec::new());
    }
    if lambda == 0.0 {
        return Ok(ctx_logits.to_vec());
    }
    let fit = fit_support_lr(pooled_support, support_labels, n_classes)?;
    ctx_logits
        .iter()
        .zip(pooled_query)
        .map(|(row, q)| {
            if row.len() != n_classes {
                return Err(Error::shape("global_lr_combine", "ragged logit rows".to_string()));
            }
            let lr = lr_logits(&fit, q)?;
            Ok(row.iter().zip(lr).map(|(&c, l)| c + lambda * l).collect())
        })
        .collect()
}
