// Scratch harness for picking training hyperparameters; not part of the
// shipped surface.
use sharelora_core::adapters::{AdapterMode, AdapterScheme, ModuleKind};
use sharelora_core::model::{preset_spec, TinyTransformer};
use sharelora_core::train::{run_training, Hyper, TaskSpec};

fn main() {
    let spec = preset_spec("tiny").unwrap();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-2);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let hyper = Hyper { lr, steps, ..Default::default() };

    for (label, task) in [
        ("copy", TaskSpec::copy_lm(6, 12)),
        ("modular", TaskSpec::modular(23)),
    ] {
        for mode in [AdapterMode::Lora, AdapterMode::ShareA, AdapterMode::ShareAb, AdapterMode::FullFt] {
            let mut losses = Vec::new();
            let mut accs = Vec::new();
            for seed in [0u64, 1, 2] {
                let scheme = AdapterScheme::new(mode, 8, 16.0, &ModuleKind::ALL);
                let mut model = TinyTransformer::build(&spec, &scheme, seed).unwrap();
                let t0 = std::time::Instant::now();
                match run_training(&mut model, &task, &hyper, seed) {
                    Ok(out) => {
                        losses.push(out.final_eval_loss);
                        accs.push(out.final_eval_accuracy);
                        if seed == 0 {
                            eprintln!(
                                "  {label} {mode:?} seed0: loss {:.4} acc {:.3} best {:.4} ({:?})",
                                out.final_eval_loss,
                                out.final_eval_accuracy,
                                out.best_eval_loss,
                                t0.elapsed()
                            );
                            let evs = out.log.eval_losses();
                            let series: Vec<String> = evs.iter().map(|(s, l)| format!("{s}:{l:.3}")).collect();
                            eprintln!("    eval series: {}", series.join(" "));
                        }
                    }
                    Err(e) => eprintln!("  {label} {mode:?} seed{seed}: ERROR {e}"),
                }
            }
            losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
            accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if !losses.is_empty() {
                eprintln!(
                "{label} {mode:?}: median loss {:.4} median acc {:.3}",
                    losses[losses.len() / 2],
                    accs[accs.len() / 2]
                );
            }
        }
    }
}
