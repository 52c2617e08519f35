// Write a feature map, a mask pyramid, a PGM label map and a config to a
// temporary directory and read them back.
//
//     cargo run --example mask_formats

use uniap::io::{
    config_from_str, read_fmap, read_mask_json, render_labelmap_pgm, write_fmap, write_mask_json,
};
use uniap::maskops::{rle_encode, mask_iou};
use uniap::synth::synth_generate;
use uniap::{run_uniap, MaskPyramid, TokenMask, UniapConfig};

pub fn run_example() -> uniap::Result<MaskPyramid> {
    let dir = std::env::temp_dir().join(format!("uniap-mask-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| uniap::Error::IoFailure { path: dir.clone(), source: e })?;

    let (fm, truth) = synth_generate(8, 12, 16, 3, 0.05, 5)?;
    write_fmap(&fm, dir.join("map.fmap"))?;
    assert_eq!(read_fmap(dir.join("map.fmap"))?, fm);
    println!("8x12x16 map: {} bytes on disk", 24 + 4 * fm.data().len());

    let cfg = config_from_str(r#"{"phi": 4, "thresholds": [0.8, 0.5]}"#)?;
    println!("config: thresholds {:?}, phi {}", cfg.uniap.thresholds, cfg.uniap.phi);
    let pyramid = run_uniap(&fm, &UniapConfig { ..cfg.uniap })?;
    write_mask_json(&pyramid, dir.join("masks.json"), true)?;
    let back = read_mask_json(dir.join("masks.json"))?;
    assert_eq!(back, pyramid);

    for (k, m) in truth.iter().enumerate() {
        let rle = rle_encode(m, 8, 12)?;
        let best = pyramid
            .iter_masks()
            .map(|p| mask_iou(&p.mask, m))
            .collect::<uniap::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!("region {k}: rle {:?}, best IoU {best:.2}", rle.counts);
    }

    let level0: Vec<TokenMask> = pyramid.levels[0].instance.iter().map(|m| m.mask.clone()).collect();
    render_labelmap_pgm(&level0, 8, 12, dir.join("level0.pgm"))?;
    println!("files in {}: map.fmap masks.json level0.pgm", dir.display());
    std::fs::remove_dir_all(&dir).ok();
    Ok(back)
}

fn main() -> uniap::Result<()> {
    run_example().map(|_| ())
}
