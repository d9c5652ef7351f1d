//! Scores hand-made detections: a perfect frame, a frame with a spurious
//! detection and a frame with a missed object. Also writes and re-reads a
//! prediction dump.

use motionseg::eval::{evaluate, read_dump, write_dump, Detection, DumpFrame, Frame};
use ndarray::Array2;

fn rect(y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<bool> {
    Array2::from_shape_fn((32, 32), |(y, x)| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

fn main() -> motionseg::Result<()> {
    let a = rect(2, 12, 2, 12);
    let b = rect(18, 30, 16, 28);
    let frames = vec![
        Frame {
            id: "perfect".into(),
            predictions: vec![
                Detection { mask: a.clone(), confidence: 0.9 },
                Detection { mask: b.clone(), confidence: 0.8 },
            ],
            ground_truth: vec![a.clone(), b.clone()],
        },
        Frame {
            id: "spurious".into(),
            predictions: vec![
                Detection { mask: a.clone(), confidence: 0.9 },
                Detection { mask: rect(20, 24, 0, 4), confidence: 0.6 },
            ],
            ground_truth: vec![a.clone()],
        },
        Frame {
            id: "missed".into(),
            predictions: vec![Detection { mask: rect(3, 12, 2, 12), confidence: 0.4 }],
            ground_truth: vec![a, b],
        },
    ];
    let report = evaluate(&frames)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let path = std::env::temp_dir().join("motionseg_eval_example.jsonl");
    let dump: Vec<DumpFrame> = frames.iter().map(|f| DumpFrame::new(&f.id, &f.predictions)).collect();
    write_dump(&path, &dump)?;
    let back = read_dump(&path)?;
    assert_eq!(back[2].detections()?, frames[2].predictions);
    println!("dump round trip through {} ok", path.display());
    Ok(())
}
