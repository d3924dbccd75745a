//! Writes a tiny IDX image/label pair and trains on it through a config file.

use dpquant::config::RunConfig;
use dpquant::data::{encode_idx, load_idx_dataset};
use dpquant::train::{load_data, train_model};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("dpquant-idx-example");
    std::fs::create_dir_all(&dir)?;
    // two classes: bright left half vs bright right half of a 4x4 image
    let count = 400;
    let mut pixels = Vec::with_capacity(count * 16);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 2) as u8;
        for r in 0..4 {
            for c in 0..4 {
                let lit = (c < 2) == (label == 0);
                let jitter = ((i * 31 + r * 7 + c * 3) % 40) as u8;
                pixels.push(if lit { 200 + jitter / 2 } else { jitter });
            }
        }
        labels.push(label);
    }
    let (img, lbl) = encode_idx(&pixels, count, 4, 4, &labels);
    let write = |name: &str, bytes: &[u8]| std::fs::write(dir.join(name), bytes);
    write("images.idx", &img)?;
    write("labels.idx", &lbl)?;
    write("net.arch", b"input shape=1x4x4\nflatten\ndense in=16 out=8\nrelu\ndense in=8 out=2\n")?;

    let ds = load_idx_dataset(&dir.join("images.idx"), &dir.join("labels.idx"), 2)?;
    println!("loaded {} examples of shape {:?}", ds.len(), ds.example_shape());

    let toml = "architecture = \"net.arch\"\nepochs = 3\nmode = \"pls_only\"\n\
                [data]\nsource = \"idx\"\nimages = \"images.idx\"\nlabels = \"labels.idx\"\nn_classes = 2\n\
                [dpsgd]\nlogical_batch = 64\nphysical_batch = 64\nlr = 1.0\n";
    let cfg = RunConfig::from_toml(toml, &dir)?;
    let (train, val) = load_data(&cfg)?;
    let out = train_model(&cfg, &cfg.architecture_text()?, &train, &val, None)?;
    for r in &out.records {
        println!("{}", r.to_line());
    }
    Ok(())
}
