//! Invariants of the forward models, gates, finite differences and streams
//! over randomly drawn instances.

use iclmb_core::deep::{check_deep_grads, Architecture, Stacking};
use iclmb_core::fd::ridders_diff;
use iclmb_core::grad::{check_gradients, grad_all, Verdict};
use iclmb_core::model::{
    forward, forward_mamba, forward_recurrence, gating_vector, hinge_loss, sigmoid,
};
use iclmb_core::oracle::{random_deep_params, random_instance, temper_layers};
use iclmb_core::prompts::permute;
use iclmb_core::{Label, Matrix, ModelKind, RngStream, Vector};
use proptest::prelude::*;

fn instance(seed: u64, d: usize, l: usize) -> (iclmb_core::MambaParams, iclmb_core::Prompt) {
    random_instance(d, l, &mut RngStream::seeded(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gates_are_a_sub_probability_vector(seed in any::<u64>(), d in 1usize..6, l in 1usize..40) {
        let (params, prompt) = instance(seed, d, l);
        let g = gating_vector(&params.w, &prompt);
        let pre = prompt.matrix.t_matvec(&params.w);
        let rest: f64 = pre.iter().map(|&z| 1.0 - sigmoid(z)).product();
        prop_assert!(g.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let total: f64 = g.iter().sum();
        prop_assert!((total + rest - 1.0).abs() < 1e-12, "{total} + {rest}");
    }

    #[test]
    fn linear_transformer_ignores_the_gate_vector(seed in any::<u64>(), d in 1usize..6, l in 1usize..12) {
        let (mut params, prompt) = instance(seed, d, l);
        let a = forward(ModelKind::LinearTransformer, &params, &prompt);
        params.w = params.w.scaled(-3.0);
        let b = forward(ModelKind::LinearTransformer, &params, &prompt);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn linear_transformer_is_order_invariant(seed in any::<u64>(), d in 1usize..6, l in 2usize..12) {
        let (params, prompt) = instance(seed, d, l);
        let mut order: Vec<usize> = (0..l).collect();
        RngStream::seeded(seed ^ 1).shuffle(&mut order);
        let shuffled = permute(&prompt, &order);
        let a = forward(ModelKind::LinearTransformer, &params, &prompt);
        let b = forward(ModelKind::LinearTransformer, &params, &shuffled);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn closed_form_matches_recurrence(seed in any::<u64>(), d in 1usize..6, l in 1usize..10) {
        let (params, prompt) = instance(seed, d, l);
        let n = d + 1;
        let w_gate = Matrix::from_fn(n, n, |_, c| params.w[c]);
        let rec = forward_recurrence(&params.w_b, &params.w_c, &w_gate, &prompt);
        let closed = forward_mamba(&params, &prompt);
        prop_assert!((closed - rec.output).abs() < 1e-10, "{closed} vs {}", rec.output);
    }

    #[test]
    fn output_is_linear_in_the_readout(seed in any::<u64>(), d in 1usize..6, l in 1usize..10, c in -4.0f64..4.0) {
        let (mut params, prompt) = instance(seed, d, l);
        for kind in [ModelKind::Mamba, ModelKind::LinearTransformer] {
            let a = forward(kind, &params, &prompt);
            let saved = params.w_c.clone();
            params.w_c = saved.scaled(c);
            let b = forward(kind, &params, &prompt);
            params.w_c = saved;
            prop_assert!((b - c * a).abs() <= 1e-12 * (c * a).abs().max(1.0));
        }
    }

    #[test]
    fn hinge_loss_is_nonnegative_and_flat_past_the_margin(f in -10.0f64..10.0) {
        for z in [Label::Plus, Label::Minus] {
            let loss = hinge_loss(f, z);
            prop_assert!(loss >= 0.0);
            if z.value() * f >= 1.0 {
                prop_assert_eq!(loss, 0.0);
            }
        }
    }

    #[test]
    fn ridders_recovers_smooth_gradients(a in -2.0f64..2.0, b in -2.0f64..2.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let f = |v: &Vector| a * v[0].sin() * v[1].exp() + b * v[0] * v[0] * v[1];
        let p = Vector::from_vec(vec![x, y]).unwrap();
        let (g, err) = ridders_diff(f, &p, 0.1).unwrap();
        let exact = [a * x.cos() * y.exp() + 2.0 * b * x * y, a * x.sin() * y.exp() + b * x * x];
        for j in 0..2 {
            prop_assert!((g[j] - exact[j]).abs() < 1e-9, "{} vs {}", g[j], exact[j]);
            prop_assert!(err[j] < 1e-8);
        }
    }

    #[test]
    fn split_streams_are_reproducible(seed in any::<u64>(), tag in any::<u64>()) {
        let root = RngStream::seeded(seed);
        let mut a = root.split(tag);
        let mut b = root.split(tag);
        let mut c = root.split(tag.wrapping_add(1));
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        prop_assert_eq!(&xs, &ys);
        prop_assert_ne!(&xs, &zs);
    }
}

#[test]
fn corrupted_one_layer_gradient_is_caught() {
    let mut caught = 0;
    let mut checked = 0;
    for seed in 0..20 {
        let (params, prompt) = instance(seed, 3, 5);
        // Label the query so the hinge is active.
        let f = forward(ModelKind::Mamba, &params, &prompt);
        let z = if f < 0.0 { Label::Plus } else { Label::Minus };
        let mut grad = grad_all(ModelKind::Mamba, &params, &prompt, z);
        let bump = 1e-3 * grad.d_w.max_abs().max(1e-3);
        grad.d_w[0] += bump;
        let check = check_gradients(ModelKind::Mamba, &params, &prompt, z, &grad, 1e-5, 1e-6).unwrap();
        if check.verdict != Verdict::Skip {
            checked += 1;
            if check.verdict == Verdict::Fail {
                caught += 1;
            }
        }
    }
    assert!(checked >= 15, "only {checked} checked");
    assert_eq!(caught, checked);
}

#[test]
fn tempered_deep_stacks_pass_the_ridders_check() {
    let arch = Architecture {
        n_layers: 3,
        stacking: Stacking::Residual,
    };
    let mut checked = 0;
    for seed in 0..10 {
        let mut rng = RngStream::seeded(seed);
        let (_, prompt) = random_instance(3, 3, &mut rng);
        let mut params = random_deep_params(3, arch, 0.5, &mut rng).unwrap();
        temper_layers(ModelKind::Mamba, &mut params, &prompt);
        let check = check_deep_grads(ModelKind::Mamba, &params, &prompt, Label::Plus, 1e-4, 1e-5).unwrap();
        assert_ne!(check.verdict, Verdict::Fail, "seed {seed}: {check:?}");
        checked += (check.verdict == Verdict::Pass) as usize;
    }
    assert!(checked >= 8);
}
