//! Where the window slots of a query land under each sampling and boundary
//! mode, on a 5x5 frame with radius 1.

use emim::attention::{window_slots, Boundary, EmimConfig, Sampling, VolumeDims, WindowSlot};

fn show(cfg: &EmimConfig, dims: VolumeDims, x: usize, y: usize) {
    let slots = window_slots(dims, 0, x, y, cfg);
    let side = cfg.window_side();
    for row in slots.chunks(side) {
        let cells: Vec<String> = row
            .iter()
            .map(|s| match s {
                WindowSlot::Source { frame, x, y } => format!("{frame}:({x},{y})"),
                WindowSlot::Pad => "  pad  ".into(),
            })
            .collect();
        println!("    {}", cells.join(" "));
    }
}

fn main() {
    let dims = VolumeDims { frames: 2, height: 5, width: 5, channels: 1 };
    for sampling in [Sampling::Sliding, Sampling::NonSliding] {
        for boundary in [Boundary::PadConstant, Boundary::ClampEdge] {
            let cfg = EmimConfig { radius: 1, sampling, boundary, ..Default::default() };
            println!("{sampling} / {boundary}, query (0,0) of frame 0");
            show(&cfg, dims, 0, 0);
        }
    }
}
