//! Pascal VOC XML annotations.

use std::path::Path;

use crate::anchors::{BoxCorner, GroundTruthBox};
use crate::error::{Error, Result};

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub fn voc_class_id(name: &str) -> Option<usize> {
    VOC_CLASSES.iter().position(|c| *c == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<GroundTruthBox>,
}

pub fn parse_voc_xml(path: &Path) -> Result<VocAnnotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_voc_str(&text, &path.display().to_string())
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str, origin: &str) -> Result<roxmltree::Node<'a, 'i>> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .ok_or_else(|| Error::parse(origin, format!("missing <{name}> in <{}>", node.tag_name().name())))
}

fn text_of(node: roxmltree::Node, name: &str, origin: &str) -> Result<String> {
    Ok(child(node, name, origin)?.text().unwrap_or("").trim().to_string())
}

fn number(node: roxmltree::Node, name: &str, origin: &str) -> Result<f32> {
    let t = text_of(node, name, origin)?;
    t.parse::<f32>()
        .map_err(|_| Error::parse(origin, format!("<{name}> is not a number: `{t}`")))
}

pub fn parse_voc_str(text: &str, origin: &str) -> Result<VocAnnotation> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::parse(origin, e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::parse(origin, format!("root element is <{}>, expected <annotation>", root.tag_name().name())));
    }
    let size = child(root, "size", origin)?;
    let width = number(size, "width", origin)? as usize;
    let height = number(size, "height", origin)? as usize;
    if width == 0 || height == 0 {
        return Err(Error::parse(origin, "zero image size"));
    }
    let filename = root
        .children()
        .find(|c| c.has_tag_name("filename"))
        .and_then(|n| n.text())
        .map(|s| s.trim().to_string());
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = text_of(obj, "name", origin)?;
        let class_id = voc_class_id(&name).ok_or_else(|| Error::Data(format!("{origin}: unknown VOC class `{name}`")))?;
        let difficult = match obj.children().find(|c| c.has_tag_name("difficult")) {
            Some(d) => d.text().map(str::trim) == Some("1"),
            None => false,
        };
        let bb = child(obj, "bndbox", origin)?;
        let (xmin, ymin) = (number(bb, "xmin", origin)?, number(bb, "ymin", origin)?);
        let (xmax, ymax) = (number(bb, "xmax", origin)?, number(bb, "ymax", origin)?);
        // 1-based inclusive pixel indices to 0-based continuous extents
        let bbox = BoxCorner::new(
            (xmin - 1.0) / width as f32,
            (ymin - 1.0) / height as f32,
            xmax / width as f32,
            ymax / height as f32,
        )
        .clip();
        if !(bbox.xmax > bbox.xmin && bbox.ymax > bbox.ymin) {
            return Err(Error::Data(format!("{origin}: degenerate box for `{name}`")));
        }
        objects.push(GroundTruthBox { bbox, class_id, difficult });
    }
    Ok(VocAnnotation { filename, width, height, objects })
}

/// Inverse of [`parse_voc_str`] up to pixel rounding.
pub fn to_voc_xml(ann: &VocAnnotation) -> String {
    let mut s = String::from("<annotation>\n");
    if let Some(f) = &ann.filename {
        s += &format!("  <filename>{f}</filename>\n");
    }
    s += &format!(
        "  <size><width>{}</width><height>{}</height><depth>3</depth></size>\n",
        ann.width, ann.height
    );
    for o in &ann.objects {
        let (w, h) = (ann.width as f32, ann.height as f32);
        s += &format!(
            "  <object><name>{}</name><difficult>{}</difficult><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>\n",
            VOC_CLASSES[o.class_id],
            o.difficult as u8,
            (o.bbox.xmin * w).round() as i64 + 1,
            (o.bbox.ymin * h).round() as i64 + 1,
            (o.bbox.xmax * w).round() as i64,
            (o.bbox.ymax * h).round() as i64,
        );
    }
    s + "</annotation>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_image_box() {
        let xml = "<annotation><size><width>50</width><height>40</height></size>\
            <object><name>aeroplane</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>50</xmax><ymax>40</ymax></bndbox></object></annotation>";
        let a = parse_voc_str(xml, "mem").unwrap();
        assert_eq!(a.objects.len(), 1);
        assert_eq!(a.objects[0].class_id, 0);
        assert_eq!(a.objects[0].bbox, BoxCorner::new(0.0, 0.0, 1.0, 1.0));
        assert!(!a.objects[0].difficult);
    }

    #[test]
    fn missing_element_named() {
        let xml = "<annotation><size><width>5</width></size></annotation>";
        match parse_voc_str(xml, "mem") {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("height"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_class_is_data_error() {
        let xml = "<annotation><size><width>5</width><height>5</height></size>\
            <object><name>unicorn</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>2</xmax><ymax>2</ymax></bndbox></object></annotation>";
        assert!(matches!(parse_voc_str(xml, "mem"), Err(Error::Data(_))));
    }
}
