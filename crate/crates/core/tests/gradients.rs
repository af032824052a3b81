use tabular_mtr::model::{FtTransformer, FttConfig, Masking, Streams};
use tabular_mtr::numerics::{check_gradient, GradCheckOptions, Rng, Tape, Tensor, Var};
use tabular_mtr::objectives::{clip_tape, cross_entropy_tape, ntxent_tape};
use tabular_mtr::Result;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, "grad-input");
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Random values bounded away from zero, magnitudes in [0.3, 1.3].
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, "grad-input");
    Tensor::from_fn(shape, |_| {
        let m = 0.3 + rng.uniform();
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, "grad-input");
    Tensor::from_fn(shape, |_| 0.5 + rng.uniform())
}

/// Reduces `x` to a scalar with fixed random weights so that no output
/// direction is lost.
fn weighted_sum(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(randn(&shape, 991));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], tol: f64, mut f: F)
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        tolerance: tol,
        ..Default::default()
    };
    let report = check_gradient(|tape, v| {
        let out = f(tape, v)?;
        weighted_sum(tape, out)
    }, inputs, opts)
    .unwrap();
    assert!(report.passed, "{name}: {report:?}");
}

const PRIM: f64 = 1e-6;

#[test]
fn matmul_family() {
    check("matmul", &[randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], PRIM, |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", &[randn(&[3, 4], 3), randn(&[5, 4], 4)], PRIM, |t, v| t.matmul_nt(v[0], v[1]));
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = if ta { randn(&[2, 4, 3], 5) } else { randn(&[2, 3, 4], 5) };
        let b = if tb { randn(&[2, 5, 4], 6) } else { randn(&[2, 4, 5], 6) };
        check("bmm", &[a, b], PRIM, |t, v| t.bmm(v[0], v[1], ta, tb));
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    let a = randn(&[2, 3, 4], 7);
    let full = randn(&[2, 3, 4], 8);
    let suffix = randn(&[4], 9);
    for b in [full.clone(), suffix.clone()] {
        check("add", &[a.clone(), b.clone()], PRIM, |t, v| t.add(v[0], v[1]));
        check("sub", &[a.clone(), b.clone()], PRIM, |t, v| t.sub(v[0], v[1]));
        check("mul", &[a.clone(), b.clone()], PRIM, |t, v| t.mul(v[0], v[1]));
    }
    check("add reversed", &[suffix.clone(), a.clone()], PRIM, |t, v| t.add(v[0], v[1]));
    check("div", &[a.clone(), away_from_zero(&[2, 3, 4], 10)], PRIM, |t, v| t.div(v[0], v[1]));
    check("div suffix", &[a, away_from_zero(&[4], 11)], PRIM, |t, v| t.div(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    let x = randn(&[3, 5], 12);
    check("scale", &[x.clone()], PRIM, |t, v| Ok(t.scale(v[0], -1.7)));
    check("relu", &[away_from_zero(&[3, 5], 13)], PRIM, |t, v| Ok(t.relu(v[0])));
    check("gelu", &[x.clone()], PRIM, |t, v| Ok(t.gelu(v[0])));
    check("exp", &[x], PRIM, |t, v| Ok(t.exp(v[0])));
    check("log", &[positive(&[3, 5], 14)], PRIM, |t, v| Ok(t.log(v[0])));
    check("sqrt", &[positive(&[3, 5], 15)], PRIM, |t, v| Ok(t.sqrt(v[0])));
    let factor: Vec<f64> = (0..15).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
    check("mul_const", &[randn(&[3, 5], 16)], PRIM, |t, v| t.mul_const(v[0], factor.clone()));
}

#[test]
fn reductions() {
    let x = randn(&[2, 3, 4], 17);
    check("sum", &[x.clone()], PRIM, |t, v| Ok(t.sum(v[0])));
    check("mean", &[x.clone()], PRIM, |t, v| t.mean(v[0]));
    check("sum_last", &[x.clone()], PRIM, |t, v| t.sum_last(v[0]));
    check("softmax", &[x.clone()], PRIM, |t, v| t.softmax(v[0]));
    check("logsumexp", &[x], PRIM, |t, v| t.logsumexp(v[0]));
}

#[test]
fn normalisation() {
    let x = randn(&[4, 6], 18);
    let g = randn(&[6], 19);
    let b = randn(&[6], 20);
    check("layer_norm", &[x.clone(), g, b], PRIM, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    check("normalize_rows", &[x], PRIM, |t, v| t.normalize_rows(v[0], 1e-12));
}

#[test]
fn layout() {
    let x = randn(&[2, 3, 4], 21);
    check("reshape", &[x.clone()], PRIM, |t, v| t.reshape(v[0], &[6, 4]));
    check("permute", &[x.clone()], PRIM, |t, v| t.permute(v[0], &[2, 0, 1]));
    check("concat_last", &[randn(&[3, 4], 34), randn(&[3, 2], 22)], PRIM, |t, v| t.concat_last(v[0], v[1]));
    check("gather", &[randn(&[4, 5], 23)], PRIM, |t, v| t.gather(v[0], &[4, 0, 2, 2]));
    check("select_token", &[x], PRIM, |t, v| t.select_token(v[0], 1));
}

#[test]
fn token_ops() {
    let x = randn(&[3, 4], 24);
    let w = randn(&[4, 5], 25);
    let b = randn(&[4, 5], 26);
    check("tokenize", &[x, w, b], PRIM, |t, v| t.tokenize(v[0], v[1], v[2]));
    let tokens = randn(&[3, 4, 5], 27);
    let token = randn(&[5], 28);
    check("prepend_token", &[tokens.clone(), token.clone()], PRIM, |t, v| t.prepend_token(v[0], v[1]));
    let mask: Vec<bool> = (0..12).map(|i| i % 5 == 1 || i == 7).collect();
    check("mask_replace", &[tokens, token], PRIM, |t, v| t.mask_replace(v[0], v[1], mask.clone()));
}

#[test]
fn losses() {
    let z = randn(&[5, 3], 29);
    let zt = randn(&[5, 3], 30);
    for symmetric in [false, true] {
        let opts = GradCheckOptions {
            tolerance: PRIM,
            ..Default::default()
        };
        let r = check_gradient(
            |t, v| ntxent_tape(t, v[0], v[1], 0.7, symmetric),
            &[z.clone(), zt.clone()],
            opts,
        )
        .unwrap();
        assert!(r.passed, "ntxent symmetric={symmetric}: {r:?}");
    }
    let r = check_gradient(
        |t, v| clip_tape(t, v[0], v[1], 0.5),
        &[z, zt],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed, "clip: {r:?}");
    let r = check_gradient(
        |t, v| cross_entropy_tape(t, v[0], &[2, 0, 1, 2]),
        &[randn(&[4, 3], 31)],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed, "cross entropy: {r:?}");
}

/// The key bias has an exactly zero gradient: softmax ignores a per-query shift.
fn composite_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-4,
        tolerance: 1e-4,
        ..Default::default()
    }
}

fn tiny_config() -> FttConfig {
    FttConfig {
        n_features: 4,
        token_dim: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_factor: 4.0 / 3.0,
        residual_dropout: 0.0,
        attention_dropout: 0.0,
        ffn_dropout: 0.0,
        projection_dims: vec![8, 6],
        n_classes: 3,
        ..Default::default()
    }
}

#[test]
fn ftt_with_ntxent_composite() {
    let model = FtTransformer::<f64>::new(tiny_config(), &mut Rng::new(3, "init")).unwrap();
    let x = randn(&[6, 4], 32);
    let named = model.named_params();
    let keys: Vec<_> = named.iter().map(|(_, p)| p.key()).collect();
    let values: Vec<Tensor<f64>> = named.iter().map(|(_, p)| p.value.clone()).collect();
    let report = check_gradient(
        |tape, v| {
            for (k, &var) in keys.iter().zip(v) {
                tape.bind_param(*k, var);
            }
            let mut streams = Streams::new(11);
            let clean = model.forward_projection(tape, &x, &Masking::NONE, &mut streams, true)?;
            let noisy = model.forward_projection(tape, &x, &Masking::rate(0.45), &mut streams, true)?;
            ntxent_tape(tape, clean, noisy, 1.0, false)
        },
        &values,
        composite_options(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    // the mask token only receives gradient when some token was masked
    let mask_idx = named.iter().position(|(n, _)| n == "mask_token").unwrap();
    assert!(report.per_param[mask_idx].is_finite());
}

#[test]
fn ftt_classifier_composite() {
    let mut model = FtTransformer::<f64>::new(tiny_config(), &mut Rng::new(4, "init")).unwrap();
    model.start_finetune(&mut Rng::new(4, "head"));
    let x = randn(&[5, 4], 33);
    let forced: Vec<bool> = (0..20).map(|i| i % 7 == 3).collect();
    let named = model.named_params();
    let keys: Vec<_> = named.iter().map(|(_, p)| p.key()).collect();
    let values: Vec<Tensor<f64>> = named.iter().map(|(_, p)| p.value.clone()).collect();
    let report = check_gradient(
        |tape, v| {
            for (k, &var) in keys.iter().zip(v) {
                tape.bind_param(*k, var);
            }
            let mut streams = Streams::new(0);
            let logits = model.forward_logits(tape, &x, &Masking::forced(&forced), &mut streams, false)?;
            cross_entropy_tape(tape, logits, &[0, 1, 2, 1, 0])
        },
        &values,
        composite_options(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
