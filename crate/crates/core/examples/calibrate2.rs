// Scratch: modular-task learnability sweep.
use sharelora_core::adapters::{AdapterMode, AdapterScheme, ModuleKind};
use sharelora_core::model::{preset_spec, TinyTransformer};
use sharelora_core::train::{run_training, Hyper, TaskSpec};

fn main() {
    let spec = preset_spec("tiny").unwrap();
    for p in [6usize, 8, 10] {
        for steps in [500u64, 800] {
            for lr in [1e-2, 2e-2] {
                let hyper = Hyper { lr, steps, batch_size: 32, ..Default::default() };
                let task = TaskSpec::modular(p);
                eprint!("p={p} steps={steps} lr={lr}: ");
                for mode in [AdapterMode::Lora, AdapterMode::ShareA, AdapterMode::ShareAb] {
                    let mut finals = Vec::new();
                    let mut monotone_all = true;
                    for seed in [0u64, 1, 2] {
                        let scheme = AdapterScheme::new(mode, 8, 16.0, &ModuleKind::ALL);
                        let mut model = TinyTransformer::build(&spec, &scheme, seed).unwrap();
                        let out = run_training(&mut model, &task, &hyper, seed).unwrap();
                        finals.push((out.final_eval_loss, out.final_eval_accuracy));
                        let evs = out.log.eval_losses();
                        let monotone = evs.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9);
                        monotone_all &= monotone;
                    }
                    finals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    let med = finals[1];
                    eprint!("{mode:?} l={:.3} a={:.2} mono={} | ", med.0, med.1, monotone_all as u8);
                }
                eprintln!();
            }
        }
    }
}
