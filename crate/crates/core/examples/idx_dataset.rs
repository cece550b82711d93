//! Writes a small IDX image/label pair, reads it back, and trains on it.

use constrained_backprop::harness::config::ExperimentConfig;
use constrained_backprop::harness::dataset::{idx_images_bytes, idx_labels_bytes, load_idx};
use constrained_backprop::harness::experiment::run_experiment;
use constrained_backprop::{Error, Result};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("cbp-idx-example");
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    // 3x3 images of a vertical (class 0) or horizontal (class 1) bar
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for k in 0..60u8 {
        let c = k % 2;
        let pos = (k / 2 % 3) as usize;
        let mut img = vec![0u8; 9];
        for j in 0..3 {
            let idx = if c == 0 { j * 3 + pos } else { pos * 3 + j };
            img[idx] = 200 + k / 2;
        }
        images.push(img);
        labels.push(c);
    }
    let img = dir.join("images.idx");
    let lab = dir.join("labels.idx");
    let write = |p: &std::path::Path, b: Vec<u8>| {
        std::fs::write(p, b).map_err(|source| Error::Io { path: p.to_path_buf(), source })
    };
    write(&img, idx_images_bytes(3, 3, &images))?;
    write(&lab, idx_labels_bytes(&labels))?;
    let data = load_idx(&img, &lab)?;
    println!("{} images of dim {}, {} classes", data.len(), data.dim(), data.n_classes);

    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(&format!(
        "dataset = idx\ntrain_path = {}\ntrain_labels_path = {}\nn_eval = 12\nlayers = 9,16,16,2\n\
         pretrain_epochs = 60\nepochs = 40\noutput_dir = {}\n",
        img.display(),
        lab.display(),
        dir.display()
    ))?;
    let art = run_experiment(&cfg)?;
    println!("top-1 {:.3} cfs {:.3e}", art.summary.final_eval_top1, art.summary.final_cfs);
    println!("artifacts in {}", dir.display());
    Ok(())
}
