// Scratch: ShareAB monotonicity + LoRA/ShareA parity detail.
use sharelora_core::adapters::{AdapterMode, AdapterScheme, ModuleKind};
use sharelora_core::model::{preset_spec, TinyTransformer};
use sharelora_core::train::{run_training, Hyper, TaskSpec};

fn main() {
    let spec = preset_spec("tiny").unwrap();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let eval_every: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
    let hyper = Hyper { lr, steps, eval_every, batch_size: 32, ..Default::default() };

    for (label, task) in [
        ("copy", TaskSpec::copy_lm(6, 12)),
        ("modular", TaskSpec::modular(8)),
    ] {
        eprintln!("== {label} (eval set {} examples)", task.eval_set().len());
        for mode in [AdapterMode::Lora, AdapterMode::ShareA, AdapterMode::ShareAb] {
            let mut med = Vec::new();
            for seed in [0u64, 1, 2] {
                let scheme = AdapterScheme::new(mode, 8, 16.0, &ModuleKind::ALL);
                let mut model = TinyTransformer::build(&spec, &scheme, seed).unwrap();
                let out = run_training(&mut model, &task, &hyper, seed).unwrap();
                med.push(out.final_eval_loss);
                let evs = out.log.eval_losses();
                let mut worst_uptick = 0.0f64;
                for w in evs.windows(2) {
                    worst_uptick = worst_uptick.max(w[1].1 - w[0].1);
                }
                let series: Vec<String> = evs.iter().map(|(_, l)| format!("{l:.3}")).collect();
                eprintln!(
                    "  {mode:?} s{seed}: [{}] uptick {:+.4} acc {:.2}",
                    series.join(" "),
                    worst_uptick,
                    out.final_eval_accuracy
                );
            }
            med.sort_by(|a, b| a.partial_cmp(b).unwrap());
            eprintln!("  {mode:?} median final loss {:.4}", med[1]);
        }
    }
}
