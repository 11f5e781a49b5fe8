//! Build a small HR folder, generate the bicubic LR counterparts, load the
//! aligned pairs and draw a training patch.
//!
//! cargo run --release --example prepare_data -- <root> [scale]

use fiwhn::datapipe::{hr_dir, load_corpus, prepare_lr, sample_patch, save_png, synthetic_image, PatchSpec};
use std::path::PathBuf;

fn main() -> fiwhn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("toy_data"));
    let scale: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);

    let hr = hr_dir(&root);
    std::fs::create_dir_all(&hr).map_err(|e| fiwhn::Error::io(&hr, e))?;
    for i in 0..4u64 {
        save_png(&synthetic_image(96, 128, 0.25, i), &hr.join(format!("{:04}.png", i + 1)))?;
    }

    let first = prepare_lr(&root, scale)?;
    let again = prepare_lr(&root, scale)?;
    println!("prepare: {} written, then {} written / {} skipped", first.written.len(), again.written.len(), again.skipped.len());

    let corpus = load_corpus(&root, scale)?;
    for p in &corpus.pairs {
        println!("{}: HR {:?}, LR {:?}", p.id, p.hr.dim(), p.lr.dim());
    }

    let spec = PatchSpec { lr_patch: 24, augment: true, seed: 3 };
    let (patch, draw) = sample_patch(&corpus.pairs[0], &spec, 0)?;
    println!("patch draw {draw:?}: HR {:?}, LR {:?}", patch.hr.dim(), patch.lr.dim());
    Ok(())
}
