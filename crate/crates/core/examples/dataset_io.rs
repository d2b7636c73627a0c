//! Generates the seeded direction dataset, writes it to disk and reads it back.

use emim::synthetic::{class_shifts, gen_direction_dataset, label_histogram, load_clips, save_clips, DatasetSpec};

fn main() -> emim::Result<()> {
    let spec = DatasetSpec { clips: 64, ..Default::default() };
    let data = gen_direction_dataset(&spec)?;
    println!("classes {:?}", class_shifts(spec.classes)?);
    println!("labels  {:?}", label_histogram(&data.clips, spec.classes));
    println!("split   {} train / {} val", data.train.len(), data.val.len());

    let dir = std::env::temp_dir().join("emim-dataset-example");
    save_clips(&data.clips, &dir)?;
    let back = load_clips(&dir)?;
    assert_eq!(back, data.clips);
    println!("wrote and reloaded {} clips under {}", back.len(), dir.display());
    Ok(())
}
