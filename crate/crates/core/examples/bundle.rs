//! Regenerates the bundled descriptors and toy datasets:
//! `cargo run -p elastic-nn --example bundle`.

use std::fs;
use std::path::Path;

use elastic_nn::arch::zoo;
use elastic_nn::trainer::synthetic_shapes;

fn main() -> std::io::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let descriptors = root.join("descriptors");
    fs::create_dir_all(&descriptors)?;
    for (stem, desc) in zoo::bundled() {
        fs::write(descriptors.join(format!("{stem}.json")), desc.to_json() + "\n")?;
    }
    let data = root.join("data");
    fs::create_dir_all(&data)?;
    for (name, n, seed) in [("shapes_train.csv", 1500, 1), ("shapes_val.csv", 500, 2)] {
        let mut buf = Vec::new();
        synthetic_shapes(n, 8, seed)
            .write_csv(&mut buf)
            .expect("in-memory write");
        fs::write(data.join(name), buf)?;
    }
    Ok(())
}
