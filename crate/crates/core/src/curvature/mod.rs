//! Per-layer curvature state and preconditioners: MAC, SMAC and the KFAC,
//! FOOF and Eva references.

mod factors;
mod optimizer;
mod state;

pub use factors::{
    adaptive_rho, apply_update, build_mac_factor, precondition_eva, precondition_foof,
    precondition_kfac, precondition_mac, precondition_smac, MacFactor, RHO_FLOOR,
};
pub use optimizer::{
    dataset_mean, BlockState, Optimizer, OptimizerConfig, OptimizerKind, Preconditioner,
};
pub use state::{
    activation_moments, activation_second_moment, augment_ones, gradient_sq_mean, Damping,
    DiagGradState, EvaState, FoofState, KfacState, MacState, SmacState, VectorEma,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Model, ModelSpec, Targets};
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Model, Tensor, Targets) {
        let model = Model::new(ModelSpec::mlp(5, &[7], 3), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(
            vec![16, 5],
            (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = Targets::Classes((0..16).map(|_| rng.gen_range(0..3)).collect());
        (model, x, y)
    }

    fn run(
        kind: OptimizerKind,
        steps: usize,
        tweak: impl Fn(&mut OptimizerConfig),
    ) -> (Model, Optimizer) {
        let (mut model, x, y) = toy();
        let mut cfg = OptimizerConfig::profile(kind);
        tweak(&mut cfg);
        let mut opt = Optimizer::new(cfg, &model).unwrap();
        for _ in 0..steps {
            let g = model.backward(&model.forward(&x).unwrap(), &y).unwrap();
            opt.step(&mut model, &g, 0.05).unwrap();
        }
        (model, opt)
    }

    #[test]
    fn schedule_counts_updates() {
        let (_, opt) = run(OptimizerKind::Mac, 23, |c| {
            c.tau_cov = 5;
            c.tau_inv = 10;
        });
        for b in &opt.blocks {
            let Preconditioner::Mac(m) = &b.precond else {
                panic!()
            };
            // steps 0, 5, 10, 15, 20
            assert_eq!(m.k_tau(), 5);
        }
    }

    #[test]
    fn every_optimizer_reduces_loss() {
        let (model, x, y) = toy();
        let start = model.loss(&x, &y).unwrap();
        for kind in OptimizerKind::ALL {
            let (m, _) = run(kind, 30, |c| {
                c.tau_cov = 1;
                c.tau_inv = 2;
                if kind == OptimizerKind::Kfac || kind == OptimizerKind::Eva {
                    c.damping = Damping::Fixed(1.0);
                }
            });
            let end = m.loss(&x, &y).unwrap();
            assert!(end < start, "{kind}: {start} -> {end}");
        }
    }

    #[test]
    fn smac_reduces_to_mac() {
        let (mac_model, _) = run(OptimizerKind::Mac, 12, |c| {
            c.tau_cov = 1;
            c.tau_inv = 3;
        });
        let (mut model, x, y) = toy();
        let mut cfg = OptimizerConfig::profile(OptimizerKind::Smac);
        cfg.tau_cov = 1;
        cfg.tau_inv = 3;
        let mut opt = Optimizer::new(cfg, &model).unwrap();
        opt.force_p_hat(0.0);
        for _ in 0..12 {
            let g = model.backward(&model.forward(&x).unwrap(), &y).unwrap();
            opt.step(&mut model, &g, 0.05).unwrap();
        }
        for b in 0..model.blocks().len() {
            let (w1, b1) = model.block_params(b).unwrap();
            let (w2, b2) = mac_model.block_params(b).unwrap();
            assert!(w1.iter().zip(w2).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(b1
                .unwrap()
                .iter()
                .zip(b2.unwrap())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn state_sizes_follow_table() {
        let model = Model::new(ModelSpec::mlp(32, &[], 8), 0).unwrap();
        let bytes = |k| {
            Optimizer::new(OptimizerConfig::profile(k), &model)
                .unwrap()
                .curvature_bytes()[0]
        };
        assert!(bytes(OptimizerKind::Mac) < bytes(OptimizerKind::Smac));
        assert!(bytes(OptimizerKind::Smac) < bytes(OptimizerKind::Kfac));
        assert_eq!(bytes(OptimizerKind::Sgd), 0);
    }

    #[test]
    fn stats_are_required_on_schedule() {
        let (mut model, x, y) = toy();
        let mut spec = model.spec().clone();
        spec.capture = false;
        let mut blind = Model::new(spec, 4).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::profile(OptimizerKind::Mac), &blind).unwrap();
        let g = blind.backward(&blind.forward(&x).unwrap(), &y).unwrap();
        assert!(opt.step(&mut blind, &g, 0.1).is_err());
        let mut sgd = Optimizer::new(OptimizerConfig::profile(OptimizerKind::Sgd), &model).unwrap();
        let g = model.backward(&model.forward(&x).unwrap(), &y).unwrap();
        sgd.step(&mut model, &g, 0.1).unwrap();
    }

    #[test]
    fn first_layer_mean_is_pinned() {
        let (mut model, x, y) = toy();
        let mut opt = Optimizer::new(OptimizerConfig::profile(OptimizerKind::Mac), &model).unwrap();
        let mean = dataset_mean(&x).unwrap();
        opt.set_first_layer_mean(&mean).unwrap();
        let g = model.backward(&model.forward(&x).unwrap(), &y).unwrap();
        opt.step(&mut model, &g, 0.1).unwrap();
        let Preconditioner::Mac(m) = &opt.blocks[0].precond else {
            panic!()
        };
        let f = m.factor().unwrap();
        assert_eq!(&f.a_hat[..5], &mean[..]);
        assert!(opt.set_first_layer_mean(&[0.0; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::profile(OptimizerKind::Kfac);
        c.damping = Damping::Adaptive;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::profile(OptimizerKind::Mac);
        c.tau_cov = 0;
        assert!(c.validate().is_err());
        assert_eq!(
            OptimizerKind::parse("adamw-baseline").unwrap(),
            OptimizerKind::AdamW
        );
        assert!(OptimizerKind::parse("lngd").is_err());
    }
}
