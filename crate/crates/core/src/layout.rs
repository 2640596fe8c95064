//! Layouts: the boxes and classes of one (real or synthetic) image.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, ImageRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seed,
    Moved,
    Injected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub class_id: usize,
    pub bbox: BBox,
    pub provenance: Provenance,
    #[serde(default)]
    pub source_instance_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new(image_id: u64, width: u32, height: u32) -> Self {
        Layout {
            image_id,
            width,
            height,
            entries: Vec::new(),
        }
    }

    /// Seed layout of a real image: every instance, in instance order.
    pub fn from_image(img: &ImageRecord) -> Self {
        Layout {
            image_id: img.image_id,
            width: img.width,
            height: img.height,
            entries: img
                .instances
                .iter()
                .map(|inst| LayoutEntry {
                    class_id: inst.class_id,
                    bbox: inst.bbox,
                    provenance: Provenance::Seed,
                    source_instance_id: Some(inst.instance_id),
                })
                .collect(),
        }
    }

    pub fn push(&mut self, class_id: usize, bbox: BBox) {
        self.entries.push(LayoutEntry {
            class_id,
            bbox,
            provenance: Provenance::Seed,
            source_instance_id: None,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "layout {} has zero size",
                self.image_id
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.class_id >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "layout {} entry {i}: class {} outside [0, {num_classes})",
                    self.image_id, e.class_id
                )));
            }
            if !e.bbox.fits_within(self.width, self.height) {
                return Err(Error::InvalidArgument(format!(
                    "layout {} entry {i}: box {:?} outside {}x{}",
                    self.image_id, e.bbox, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

pub fn read_layouts<R: BufRead>(reader: R) -> Result<Vec<Layout>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<layouts>", e))?;
        let start = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let layout = serde_json::from_str(&line).map_err(|e| match Error::json(&line, e) {
            Error::Parse { offset, message } => Error::Parse {
                offset: start + offset,
                message,
            },
            other => other,
        })?;
        out.push(layout);
    }
    Ok(out)
}

pub fn write_layouts<W: Write>(layouts: &[Layout], mut out: W) -> std::io::Result<()> {
    for l in layouts {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format() {
        let mut l = Layout::new(7, 64, 48);
        l.push(2, BBox::new(1.0, 2.0, 3.0, 4.0).unwrap());
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(
            json,
            r#"{"image_id":7,"width":64,"height":48,"entries":[{"class_id":2,"bbox":[1.0,2.0,3.0,4.0],"provenance":"seed","source_instance_id":null}]}"#
        );
        let mut buf = Vec::new();
        write_layouts(&[l.clone(), l.clone()], &mut buf).unwrap();
        assert_eq!(read_layouts(buf.as_slice()).unwrap(), vec![l.clone(), l]);
    }

    #[test]
    fn validate_catches_out_of_bounds() {
        let mut l = Layout::new(1, 10, 10);
        l.push(0, BBox::new(5.0, 5.0, 11.0, 6.0).unwrap());
        assert!(l.validate(1).is_err());
        let mut l = Layout::new(1, 10, 10);
        l.push(3, BBox::new(5.0, 5.0, 6.0, 6.0).unwrap());
        assert!(l.validate(3).is_err());
    }
}
