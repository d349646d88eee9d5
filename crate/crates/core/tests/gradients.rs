use ndarray::Array2;
use proxtune::model::{loss_mse, mse};
use proxtune::rng::SplitMix64;
use proxtune::{ModelSpec, Network};

fn normal_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, shift: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.standard_normal() + shift)
}

/// Central differences on 50 coordinates of every parameter group of the default stack.
#[test]
fn backward_matches_central_differences_on_default_spec() {
    let h = 1e-5;
    for seed in 0..3u64 {
        let spec = ModelSpec {
            init_seed: seed,
            ..ModelSpec::default()
        };
        let net = Network::new(spec.clone()).unwrap();
        let mut params = net.build();
        let mut rng = SplitMix64::new(1000 + seed);
        // Non-zero biases so their gradients exercise the full chain.
        for i in 0..params.groups().len() {
            for v in params.values_mut(i) {
                *v += 0.1 * rng.standard_normal();
            }
        }
        let x = normal_matrix(&mut rng, 16, spec.input_dim, 0.5);
        let y = normal_matrix(&mut rng, 16, spec.output_dim, 0.0);

        let (out, cache) = net.forward(&params, &x).unwrap();
        let (_, dl) = loss_mse(&out, &y).unwrap();
        let grads = net.backward(&params, &cache, &dl).unwrap();

        for (gi, slot) in grads.iter().enumerate() {
            let analytic = slot.as_deref().expect("nothing frozen");
            let len = analytic.len();
            let coords: Vec<usize> = if len <= 50 {
                (0..len).collect()
            } else {
                (0..50).map(|_| rng.below(len)).collect()
            };
            for j in coords {
                let orig = params.group(gi).values()[j];
                params.values_mut(gi)[j] = orig + h;
                let plus = mse(&net.predict(&params, &x).unwrap(), &y).unwrap();
                params.values_mut(gi)[j] = orig - h;
                let minus = mse(&net.predict(&params, &x).unwrap(), &y).unwrap();
                params.values_mut(gi)[j] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[j];
                let rel = (fd - a).abs() / fd.abs().max(a.abs());
                assert!(
                    rel <= 1e-5,
                    "seed {seed} group {} coord {j}: fd {fd} vs analytic {a}",
                    params.group(gi).name()
                );
            }
        }
    }
}
