use crate::{Error, Result};

/// COCO classes treated as moving-object candidates.
pub const COCO_MOVING: [&str; 29] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
];

/// COCO classes treated as static, spelled as listed in the source table.
pub const COCO_STATIC: [&str; 51] = [
    "traffic light",
    "hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

/// Official COCO spellings of static entries that the table spells differently.
const ALIASES: [(&str, &str); 2] = [("fire hydrant", "hydrant"), ("refrigerator", "refrigator")];

/// Whether a COCO class label belongs to the moving list.
pub fn movable_class_filter(label: &str) -> Result<bool> {
    let l = label.trim().to_lowercase();
    let l = ALIASES.iter().find(|(a, _)| *a == l).map_or(l.as_str(), |(_, t)| t);
    if COCO_MOVING.contains(&l) {
        Ok(true)
    } else if COCO_STATIC.contains(&l) {
        Ok(false)
    } else {
        Err(Error::UnknownLabel(label.to_string()))
    }
}

/// Body-level filter for synthetic scenes: the generator's movable flag.
pub fn movable_body(movable: &std::collections::BTreeMap<u16, bool>, id: u16) -> Result<bool> {
    movable.get(&id).copied().ok_or_else(|| Error::UnknownLabel(format!("body {id}")))
}
