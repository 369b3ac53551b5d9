// Temporary calibration harness; not part of the deliverable.
use std::path::Path;
use std::time::Instant;
use textsr::charset::CharsetTable;
use textsr::priorgen::*;
use textsr::synth::fonts::{FontSet, LoadedFont};

fn three_fonts() -> FontSet {
    let all = FontSet::load_dir(Path::new(textsr::synth::SYSTEM_FONT_DIR)).unwrap();
    let mut picked = Vec::new();
    for i in 0..all.len() {
        let name = all.name(i);
        if !name.contains("Bold") {
            picked.push(LoadedFont { name: name.to_string(), font: all.get(i).font.clone() });
        }
    }
    eprintln!("fonts: {:?}", picked.iter().map(|f| f.name.clone()).collect::<Vec<_>>());
    FontSet::from_fonts(picked).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(String::as_str).unwrap_or("prior");
    match what {
        "prior" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
            let charset = CharsetTable::digits();
            let fonts = three_fonts();
            let t0 = Instant::now();
            let data = build_structure_dataset(&charset, &fonts, &StructAugConfig::default(), 1, 1500).unwrap();
            eprintln!("data: {} pairs in {:?}", data.len(), t0.elapsed());
            let cfg = PriorTrainConfig { steps, steps_per_epoch: 50, seed: 1, ..Default::default() };
            let t0 = Instant::now();
            let (model, log) = train_prior(&data, &charset, &cfg, Path::new("/tmp/exp_prior")).unwrap();
            let dt = t0.elapsed();
            eprintln!("train {} steps in {:?} ({:?}/step)", steps, dt, dt / steps as u32);
            eprintln!("acc trajectory: {:?}", log.epoch_generated_accuracy);
            let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(99);
            let acc = generated_accuracy(&model, 1000, &mut rng).unwrap();
            let dis = disentanglement_rate(&model, 500, &mut rng).unwrap();
            eprintln!("final acc(1000)={acc:.4} disentangle(500)={dis:.4}");
            let tail = &log.g_recog[log.g_recog.len().saturating_sub(20)..];
            eprintln!("last g_recog: {:?}", &tail[..tail.len().min(20)]);
        }
        _ => eprintln!("unknown experiment"),
    }
}
