//! Generates a small stripes dataset, applies the default point-annotation
//! policy and writes it to disk.

use std::path::PathBuf;

use slash::data::{apply_annotation_policy, generate_dataset, load_dataset, save_dataset, AnnotationPolicy, BackgroundKind, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("slash-example-data"));
    let config = DatasetConfig {
        seed: 7,
        size: 200,
        difficulty: BackgroundKind::Stripes,
        ..DatasetConfig::default()
    };
    let mut data = generate_dataset(&config)?;
    apply_annotation_policy(&mut data, &AnnotationPolicy::default())?;

    let mut histogram = [0usize; 8];
    for s in &data.samples {
        histogram[s.num_objects().min(7)] += 1;
    }
    println!("{} images at {}x{}, {} annotated", data.len(), config.height, config.width, data.annotated_count());
    println!("visible objects per image: {:?}", &histogram[..=config.scene.max_objects]);
    println!("objects lost to occlusion: {}", data.dropped_objects());
    if let Some(s) = data.samples.iter().find(|s| s.annotated) {
        let pts: Vec<[f64; 2]> = s.annotated_points();
        println!("first annotated image: {} objects, revealed points {pts:.3?}", s.num_objects());
    }

    save_dataset(&data, &out)?;
    let back = load_dataset(&out)?;
    assert_eq!(back, data);
    println!("saved to {} and read back identically", out.display());
    Ok(())
}
