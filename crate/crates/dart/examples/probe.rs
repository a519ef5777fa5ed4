use dart::toytrain::{gen_dataset, score_concentration, train, SynthConfig, TrainConfig, TrainMode};

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let n_train: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(800);
    let canvas: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    for mode in [TrainMode::Uniform, TrainMode::Dart] {
        let cfg = TrainConfig {
            mode,
            epochs,
            n_train,
            n_test: 500,
            seed,
            synth: SynthConfig {
                canvas,
                ..SynthConfig::default()
            },
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let report = train(&cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("== mode {mode} seed {seed} ({dt:.1}s)");
        for m in &report.history {
            if m.split == "test" {
                println!("  epoch {:2} test loss {:.4} acc {:.3}", m.epoch, m.loss, m.accuracy);
            }
        }
        let test_set = gen_dataset(&cfg.synth, cfg.seed ^ 0xFEED, cfg.n_test).unwrap();
        let conc = score_concentration(&report.state.scorer, &test_set, cfg.score_grid()).unwrap();
        println!(
            "  final test acc {:.3}; concentration mean {:.2}x, frac>=2x {:.2}",
            report.final_test.1, conc.mean_ratio, conc.frac_at_least_2x
        );
    }
}
