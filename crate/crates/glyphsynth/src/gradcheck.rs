//! Finite-difference verification of reverse-mode gradients.
//!
//! [`finite_diff_check`] rebuilds a scalar-valued graph under central
//! perturbations of every leaf coordinate and compares the numeric slope
//! against the analytic gradient. [`op_suite`] and [`composite_suite`]
//! bundle named checks over every graph operation and over realistic
//! attention/encoder compositions; both back the `grad-check` CLI command.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
/// Relative-error floor: errors are measured against at least this
/// magnitude so near-zero gradients do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-3;
/// Pass threshold for single-operation checks.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Pass threshold for multi-layer compositions.
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients of `build` (a scalar-rooted graph over the
/// given leaves) against central finite differences with step `step`.
/// Returns the worst relative error across every leaf coordinate.
pub fn finite_diff_check<F>(leaves: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        if g.value(root).shape() != [1, 1] {
            return Err(Error::Shape(format!(
                "gradient check root must be 1x1, got {:?}",
                g.value(root).shape()
            )));
        }
        Ok((g, ids, root))
    };

    let (mut g, ids, root) = eval(leaves)?;
    let mut grads = g.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(g.value(id).rows(), g.value(id).cols()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let orig = leaf.data()[e];
            work[li].data_mut()[e] = orig + step;
            let (g_plus, _, root_plus) = eval(&work)?;
            let f_plus = g_plus.value(root_plus).at(0, 0);
            work[li].data_mut()[e] = orig - step;
            let (g_minus, _, root_minus) = eval(&work)?;
            let f_minus = g_minus.value(root_minus).at(0, 0);
            work[li].data_mut()[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[li].data()[e], numeric));
        }
    }
    Ok(worst)
}

fn check<F>(name: &str, tolerance: f64, leaves: &[Tensor], build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let max_rel_err = finite_diff_check(leaves, DEFAULT_STEP, build)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err,
        tolerance,
    })
}

/// One check per graph operation, at tight single-op tolerance.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a34 = Tensor::randn(3, 4, 1.0, &mut rng);
    let b45 = Tensor::randn(4, 5, 1.0, &mut rng);
    out.push(check(
        "matmul",
        OP_TOLERANCE,
        &[a34.clone(), b45],
        |g, ids| {
            let c = g.matmul(ids[0], ids[1])?;
            Ok(g.mean_all(c))
        },
    )?);

    let x = Tensor::randn(3, 4, 1.0, &mut rng);
    let y = Tensor::randn(3, 4, 1.0, &mut rng);
    out.push(check("add", OP_TOLERANCE, &[x.clone(), y.clone()], |g, ids| {
        let c = g.add(ids[0], ids[1])?;
        Ok(g.mean_all(c))
    })?);
    out.push(check("sub", OP_TOLERANCE, &[x.clone(), y.clone()], |g, ids| {
        let c = g.sub(ids[0], ids[1])?;
        Ok(g.mean_all(c))
    })?);
    out.push(check("mul", OP_TOLERANCE, &[x.clone(), y], |g, ids| {
        let c = g.mul(ids[0], ids[1])?;
        Ok(g.mean_all(c))
    })?);

    let row = Tensor::randn(1, 4, 1.0, &mut rng);
    out.push(check("add_row", OP_TOLERANCE, &[x.clone(), row], |g, ids| {
        let c = g.add_row(ids[0], ids[1])?;
        let t = g.tanh(c);
        Ok(g.mean_all(t))
    })?);

    out.push(check("scale", OP_TOLERANCE, &[x.clone()], |g, ids| {
        let c = g.scale(ids[0], -1.75);
        Ok(g.mean_all(c))
    })?);

    out.push(check("transpose", OP_TOLERANCE, &[a34.clone()], |g, ids| {
        let t = g.transpose(ids[0]);
        let sq = g.mul(t, t)?;
        Ok(g.mean_all(sq))
    })?);

    // keep values away from the relu kink so finite differences are clean
    let mut relu_in = Tensor::randn(3, 4, 1.0, &mut rng);
    for v in relu_in.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    out.push(check("relu", OP_TOLERANCE, &[relu_in], |g, ids| {
        let r = g.relu(ids[0]);
        let sq = g.mul(r, r)?;
        Ok(g.mean_all(sq))
    })?);

    out.push(check("tanh", OP_TOLERANCE, &[x.clone()], |g, ids| {
        let t = g.tanh(ids[0]);
        Ok(g.mean_all(t))
    })?);

    let logits = Tensor::randn(4, 4, 1.0, &mut rng);
    let weights = Tensor::randn(4, 4, 1.0, &mut rng);
    let mask = Rc::new(AttnMask::new(
        4,
        4,
        vec![
            true, true, true, true, // full row
            true, false, true, false, // partial row
            false, false, false, false, // fully masked row
            true, true, false, true,
        ],
    )?);
    out.push(check(
        "masked_softmax",
        OP_TOLERANCE,
        &[logits, weights],
        move |g, ids| {
            let s = g.masked_softmax(ids[0], Rc::clone(&mask))?;
            let weighted = g.mul(s, ids[1])?;
            Ok(g.mean_all(weighted))
        },
    )?);

    let gain = Tensor::randn(1, 4, 1.0, &mut rng);
    let bias = Tensor::randn(1, 4, 1.0, &mut rng);
    let post = Tensor::randn(3, 4, 1.0, &mut rng);
    out.push(check(
        "layer_norm",
        OP_TOLERANCE,
        &[x.clone(), gain, bias, post],
        |g, ids| {
            let n = g.layer_norm(ids[0], ids[1], ids[2])?;
            let weighted = g.mul(n, ids[3])?;
            Ok(g.mean_all(weighted))
        },
    )?);

    let table = Tensor::randn(5, 3, 1.0, &mut rng);
    let idx = Rc::new(vec![0usize, 2, 2, 4, 1]);
    out.push(check("gather_rows", OP_TOLERANCE, &[table], move |g, ids| {
        let picked = g.gather_rows(ids[0], Rc::clone(&idx))?;
        let sq = g.mul(picked, picked)?;
        Ok(g.mean_all(sq))
    })?);

    let left = Tensor::randn(3, 2, 1.0, &mut rng);
    let right = Tensor::randn(3, 3, 1.0, &mut rng);
    out.push(check(
        "concat_cols_slice_cols",
        OP_TOLERANCE,
        &[left, right],
        |g, ids| {
            let cat = g.concat_cols(&[ids[0], ids[1]])?;
            let part = g.slice_cols(cat, 1..4)?;
            let sq = g.mul(part, part)?;
            Ok(g.mean_all(sq))
        },
    )?);

    let top = Tensor::randn(2, 3, 1.0, &mut rng);
    let bottom = Tensor::randn(3, 3, 1.0, &mut rng);
    out.push(check(
        "concat_rows_slice_rows",
        OP_TOLERANCE,
        &[top, bottom],
        |g, ids| {
            let cat = g.concat_rows(&[ids[0], ids[1]])?;
            let part = g.slice_rows(cat, 1..4)?;
            let sq = g.mul(part, part)?;
            Ok(g.mean_all(sq))
        },
    )?);

    out.push(check("reshape", OP_TOLERANCE, &[a34], |g, ids| {
        let r = g.reshape(ids[0], 2, 6)?;
        let sq = g.mul(r, r)?;
        Ok(g.mean_all(sq))
    })?);

    let target = Tensor::randn(3, 4, 1.0, &mut rng);
    out.push(check("mse", OP_TOLERANCE, &[x, target], |g, ids| {
        g.mse(ids[0], ids[1])
    })?);

    Ok(out)
}

/// Multi-head attention and encoder-layer compositions at small dims,
/// checked exhaustively over every parameter coordinate.
pub fn composite_suite(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::transformer::{encoder_forward, multi_head_masked_attention, StackConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // single attention block: 4 tokens, d_model 8, 2 heads, partial mask
    let d = 8usize;
    let n = 4usize;
    let x = Tensor::randn(n, d, 0.5, &mut rng);
    let wq = Tensor::randn(d, d, 0.5, &mut rng);
    let wk = Tensor::randn(d, d, 0.5, &mut rng);
    let wv = Tensor::randn(d, d, 0.5, &mut rng);
    let wo = Tensor::randn(d, d, 0.5, &mut rng);
    let mask = Rc::new(AttnMask::keys_visible(n, &[true, false, true, true]));
    out.push({
        let mask = Rc::clone(&mask);
        let max_rel_err = finite_diff_check(
            &[x.clone(), wq.clone(), wk.clone(), wv.clone(), wo.clone()],
            DEFAULT_STEP,
            move |g, ids| {
                let y = multi_head_masked_attention(
                    g, ids[0], ids[0], ids[1], ids[2], ids[3], ids[4], 2, &mask,
                )?;
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
        )?;
        CheckResult {
            name: "multi_head_attention".into(),
            max_rel_err,
            tolerance: COMPOSITE_TOLERANCE,
        }
    });

    // cross attention: queries and keys from different sequences
    let kv = Tensor::randn(6, d, 0.5, &mut rng);
    let cross_mask = Rc::new(AttnMask::full(n, 6));
    out.push({
        let cross_mask = Rc::clone(&cross_mask);
        let max_rel_err = finite_diff_check(
            &[x.clone(), kv, wq, wk, wv, wo],
            DEFAULT_STEP,
            move |g, ids| {
                let y = multi_head_masked_attention(
                    g, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], 2, &cross_mask,
                )?;
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
        )?;
        CheckResult {
            name: "cross_attention".into(),
            max_rel_err,
            tolerance: COMPOSITE_TOLERANCE,
        }
    });

    // one full encoder layer via the parameter store
    let cfg = StackConfig {
        d_model: d,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
    };
    let store = crate::transformer::init_stack(&cfg, "enc", &mut rng)?;
    let names: Vec<String> = store.names().cloned().collect();
    let leaves: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let mut all = vec![x];
    all.extend(leaves);
    let enc_mask = Rc::new(AttnMask::keys_visible(n, &[true, true, false, true]));
    out.push({
        let names = names.clone();
        let cfg = cfg.clone();
        let max_rel_err = finite_diff_check(&all, DEFAULT_STEP, move |g, ids| {
            let mut store = crate::params::ParamStore::new();
            let mut bound = crate::params::GraphParams::new();
            for (name, &id) in names.iter().zip(&ids[1..]) {
                store.insert(name, g.value(id).clone())?;
                bound.bind_existing(name, id);
            }
            let y = encoder_forward(g, &mut bound, &store, "enc", &cfg, ids[0], &enc_mask)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })?;
        CheckResult {
            name: "encoder_layer".into(),
            max_rel_err,
            tolerance: COMPOSITE_TOLERANCE,
        }
    });

    // miniature end-to-end net: 2-layer encoder into 2-layer decoder with
    // causal self-attention, every parameter a leaf
    let ecfg = StackConfig {
        d_model: 6,
        n_heads: 2,
        d_ff: 8,
        n_layers: 2,
    };
    let dcfg = ecfg.clone();
    let mut store = crate::params::ParamStore::new();
    crate::transformer::init_encoder_stack(&mut store, "enc", &ecfg, &mut rng)?;
    crate::transformer::init_decoder_stack(&mut store, "dec", &dcfg, &mut rng)?;
    let names: Vec<String> = store.names().cloned().collect();
    let x_enc = Tensor::randn(4, 6, 0.5, &mut rng);
    let x_dec = Tensor::randn(3, 6, 0.5, &mut rng);
    let mut all = vec![x_dec, x_enc];
    all.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    let enc_mask = Rc::new(AttnMask::keys_visible(4, &[true, false, true, true]));
    let self_mask = Rc::new(AttnMask::causal_keys(3, &[true, true, true]));
    let cross_mask = Rc::new(AttnMask::keys_visible(3, &[true, false, true, true]));
    out.push({
        let max_rel_err = finite_diff_check(&all, DEFAULT_STEP, move |g, ids| {
            let mut store = crate::params::ParamStore::new();
            let mut bound = crate::params::GraphParams::new();
            for (name, &id) in names.iter().zip(&ids[2..]) {
                store.insert(name, g.value(id).clone())?;
                bound.bind_existing(name, id);
            }
            let enc_out =
                encoder_forward(g, &mut bound, &store, "enc", &ecfg, ids[1], &enc_mask)?;
            let y = crate::transformer::decoder_forward(
                g, &mut bound, &store, "dec", &dcfg, ids[0], enc_out, &self_mask, &cross_mask,
            )?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })?;
        CheckResult {
            name: "two_layer_encoder_decoder".into(),
            max_rel_err,
            tolerance: COMPOSITE_TOLERANCE,
        }
    });

    Ok(out)
}

/// Every gradient check the project defines.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_suite(seed)?;
    all.extend(composite_suite(seed.wrapping_add(1))?);
    Ok(all)
}
