#![allow(dead_code)]

use debias_core::dataset::ImageRecord;
use debias_core::{BBox, BinningConfig, Dataset, Instance};

pub type ImageSpec = (u64, u32, u32, Vec<(usize, BBox)>);

/// Dataset from `(image_id, width, height, [(class_id, bbox)])` tuples;
/// instance ids are assigned sequentially and double as embedding ids.
pub fn dataset(images: &[ImageSpec], num_classes: usize) -> Dataset {
    let mut next_id = 0u64;
    let records = images
        .iter()
        .map(|(image_id, w, h, boxes)| {
            let instances = boxes
                .iter()
                .map(|&(class_id, bbox)| {
                    next_id += 1;
                    Instance {
                        instance_id: next_id,
                        image_id: *image_id,
                        class_id,
                        bbox,
                        embedding_id: None,
                    }
                })
                .collect();
            ImageRecord::new(*image_id, *w, *h, instances)
        })
        .collect();
    let classes = (0..num_classes).map(|c| format!("class{c}")).collect();
    Dataset::from_parts(records, classes, BinningConfig::default()).unwrap()
}

pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}
