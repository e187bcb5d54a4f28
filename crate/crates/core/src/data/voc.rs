use std::fmt::Write as _;

use quick_xml::events::Event;
use quick_xml::escape::{escape, unescape};
use quick_xml::Reader;

use crate::boxgeom::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedObject {
    pub name: String,
    /// Upper-left and lower-right corners in original image pixels.
    pub bbox: BBox,
}

/// One image's boxes as stored in a VOC-style XML file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub objects: Vec<AnnotatedObject>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.depth == 0 {
            return Err(Error::Validation(format!("{}: image size must be positive", self.filename)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.name.trim().is_empty() {
                return Err(Error::Validation(format!("{}: object {i} has an empty class name", self.filename)));
            }
            let b = &o.bbox;
            if !(b.x1 < b.x2 && b.y1 < b.y2) {
                return Err(Error::Validation(format!(
                    "{}: object {i} needs xmin < xmax and ymin < ymax, got {b:?}",
                    self.filename
                )));
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > self.width as f32 || b.y2 > self.height as f32 {
                return Err(Error::Validation(format!(
                    "{}: object {i} box {b:?} leaves the {}x{} image",
                    self.filename, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct PartialObject {
    name: Option<String>,
    corners: [Option<f32>; 4],
}

const CORNERS: [&str; 4] = ["xmin", "ymin", "xmax", "ymax"];

fn number<T: std::str::FromStr>(field: &str, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("`{field}` is not a number: {:?}", text.trim())))
}

/// Parses `annotation/{filename, size/{width,height,depth}, object*/{name,
/// bndbox/{xmin,ymin,xmax,ymax}}}`. Other elements are ignored.
pub fn parse_voc_xml(bytes: &[u8]) -> Result<AnnotationRecord> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::XmlParse {
        offset: e.valid_up_to() as u64,
        detail: "invalid UTF-8".into(),
    })?;
    let mut reader = Reader::from_str(text);
    let mut path: Vec<String> = Vec::new();
    let mut buf = String::new();
    let mut filename = None;
    let mut size: [Option<u32>; 3] = [None; 3];
    let mut objects = Vec::new();
    let mut current: Option<PartialObject> = None;
    let xml_err = |reader: &Reader<&[u8]>, detail: String| Error::XmlParse { offset: reader.error_position(), detail };

    loop {
        let event = reader.read_event().map_err(|e| xml_err(&reader, e.to_string()))?;
        match event {
            Event::Start(e) => {
                let name = e.local_name().into_inner().to_string();
                if path.is_empty() && name != "annotation" {
                    return Err(Error::Schema { field: "annotation".into() });
                }
                if path.len() == 1 && name == "object" {
                    current = Some(PartialObject::default());
                }
                path.push(name);
                buf.clear();
            }
            Event::Empty(e) => {
                let name = e.local_name().into_inner().to_string();
                if path.is_empty() && name != "annotation" {
                    return Err(Error::Schema { field: "annotation".into() });
                }
                if path.len() == 1 && name == "object" {
                    return Err(Error::Schema { field: "object/name".into() });
                }
            }
            Event::Text(t) => buf.push_str(&t.xml10_content()),
            Event::CData(t) => buf.push_str(&t.into_inner()),
            Event::GeneralRef(r) => {
                let entity = format!("&{};", r.xml10_content());
                let resolved = unescape(&entity).map_err(|e| xml_err(&reader, e.to_string()))?;
                buf.push_str(&resolved);
            }
            Event::End(_) => {
                let joined = path.join("/");
                let value = std::mem::take(&mut buf);
                match joined.as_str() {
                    "annotation/filename" => filename = Some(value.trim().to_string()),
                    "annotation/size/width" => size[0] = Some(number("size/width", &value)?),
                    "annotation/size/height" => size[1] = Some(number("size/height", &value)?),
                    "annotation/size/depth" => size[2] = Some(number("size/depth", &value)?),
                    "annotation/object/name" => {
                        if let Some(o) = current.as_mut() {
                            o.name = Some(value.trim().to_string());
                        }
                    }
                    "annotation/object" => {
                        let o = current.take().expect("object start recorded");
                        let name = o.name.ok_or_else(|| Error::Schema { field: "object/name".into() })?;
                        let mut c = [0.0; 4];
                        for (i, v) in o.corners.iter().enumerate() {
                            c[i] = v.ok_or_else(|| Error::Schema { field: format!("object/bndbox/{}", CORNERS[i]) })?;
                        }
                        if !(c[0] < c[2] && c[1] < c[3]) {
                            return Err(Error::Validation(format!(
                                "object `{name}`: need xmin < xmax and ymin < ymax, got {c:?}"
                            )));
                        }
                        let bbox = BBox::new(c[0], c[1], c[2], c[3])?;
                        objects.push(AnnotatedObject { name, bbox });
                    }
                    other => {
                        if let (Some(corner), Some(o)) = (other.strip_prefix("annotation/object/bndbox/"), current.as_mut()) {
                            if let Some(i) = CORNERS.iter().position(|c| *c == corner) {
                                o.corners[i] = Some(number(&format!("bndbox/{corner}"), &value)?);
                            }
                        }
                    }
                }
                path.pop();
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if let Some(open) = path.last() {
        return Err(Error::XmlParse {
            offset: reader.buffer_position(),
            detail: format!("document ends inside <{open}>"),
        });
    }
    let filename = filename.ok_or_else(|| Error::Schema { field: "filename".into() })?;
    let field = |i: usize, name: &str| size[i].ok_or_else(|| Error::Schema { field: format!("size/{name}") });
    let record = AnnotationRecord {
        filename,
        width: field(0, "width")?,
        height: field(1, "height")?,
        depth: field(2, "depth")?,
        objects,
    };
    record.validate()?;
    Ok(record)
}

/// Emits the XML layout that [`parse_voc_xml`] reads. Coordinates are
/// written in shortest round-trip form so a parse recovers them exactly.
pub fn write_voc_xml(record: &AnnotationRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<annotation>");
    let _ = writeln!(s, "\t<filename>{}</filename>", escape(record.filename.as_str()));
    let _ = writeln!(s, "\t<size>");
    let _ = writeln!(s, "\t\t<width>{}</width>", record.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", record.height);
    let _ = writeln!(s, "\t\t<depth>{}</depth>", record.depth);
    let _ = writeln!(s, "\t</size>");
    for o in &record.objects {
        let _ = writeln!(s, "\t<object>");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(o.name.as_str()));
        let _ = writeln!(s, "\t\t<bndbox>");
        for (tag, v) in CORNERS.iter().zip(o.bbox.as_array()) {
            let _ = writeln!(s, "\t\t\t<{tag}>{v}</{tag}>");
        }
        let _ = writeln!(s, "\t\t</bndbox>");
        let _ = writeln!(s, "\t</object>");
    }
    let _ = writeln!(s, "</annotation>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(objects: Vec<AnnotatedObject>) -> AnnotationRecord {
        AnnotationRecord { filename: "leaf_01.ppm".into(), width: 256, height: 200, depth: 3, objects }
    }

    #[test]
    fn round_trip_one_object() {
        let r = record(vec![AnnotatedObject {
            name: "Early blight".into(),
            bbox: BBox::new(12.5, 3.0, 200.25, 199.0).unwrap(),
        }]);
        assert_eq!(parse_voc_xml(write_voc_xml(&r).as_bytes()).unwrap(), r);
    }

    #[test]
    fn empty_object_list_parses() {
        let r = record(vec![]);
        assert_eq!(parse_voc_xml(write_voc_xml(&r).as_bytes()).unwrap().objects, vec![]);
    }

    #[test]
    fn labelimg_style_file_with_extra_elements() {
        let xml = r#"<?xml version="1.0"?>
<annotation verified="no">
  <folder>leaves</folder>
  <filename>img &amp; co.jpg</filename>
  <path>/tmp/img.jpg</path>
  <source><database>Unknown</database></source>
  <size><width>640</width><height>480</height><depth>3</depth></size>
  <segmented>0</segmented>
  <object>
    <name>Leaf Mold</name><pose>Unspecified</pose><truncated>0</truncated><difficult/>
    <bndbox><xmin>10</xmin><ymin>20</ymin><xmax>300</xmax><ymax>400</ymax></bndbox>
  </object>
</annotation>"#;
        let r = parse_voc_xml(xml.as_bytes()).unwrap();
        assert_eq!(r.filename, "img & co.jpg");
        assert_eq!((r.width, r.height, r.depth), (640, 480, 3));
        assert_eq!(r.objects[0].name, "Leaf Mold");
        assert_eq!(r.objects[0].bbox, BBox::new(10.0, 20.0, 300.0, 400.0).unwrap());
    }

    #[test]
    fn inverted_box_is_a_validation_error() {
        let xml = write_voc_xml(&record(vec![AnnotatedObject {
            name: "x".into(),
            bbox: BBox::new(100.0, 10.0, 200.0, 50.0).unwrap(),
        }]))
        .replace("<xmin>100</xmin>", "<xmin>200</xmin>")
        .replace("<xmax>200</xmax>", "<xmax>100</xmax>");
        assert!(matches!(parse_voc_xml(xml.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_corner_names_the_field() {
        let xml = write_voc_xml(&record(vec![AnnotatedObject {
            name: "x".into(),
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0).unwrap(),
        }]))
        .replace("\t\t\t<ymax>4</ymax>\n", "");
        match parse_voc_xml(xml.as_bytes()) {
            Err(Error::Schema { field }) => assert_eq!(field, "object/bndbox/ymax"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_xml_reports_offset() {
        let xml = b"<annotation><filename>a</filenme></annotation>";
        match parse_voc_xml(xml) {
            Err(Error::XmlParse { offset, .. }) => assert!(offset > 0 && offset <= xml.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_voc_xml(b"<annotation><size>"), Err(Error::XmlParse { .. })));
        assert!(matches!(parse_voc_xml(b"<other/>"), Err(Error::Schema { .. })));
    }

    #[test]
    fn box_outside_image_is_rejected() {
        let r = record(vec![AnnotatedObject { name: "x".into(), bbox: BBox::new(0.0, 0.0, 300.0, 10.0).unwrap() }]);
        assert!(matches!(parse_voc_xml(write_voc_xml(&r).as_bytes()), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn writer_then_parser_is_identity(
            boxes in prop::collection::vec((0.0f32..250.0, 0.0f32..190.0, 0.5f32..6.0, 0.5f32..10.0, "[A-Za-z<>&' ]{1,12}"), 0..5)
        ) {
            let objects: Vec<AnnotatedObject> = boxes
                .into_iter()
                .filter(|(.., n)| !n.trim().is_empty())
                .map(|(x, y, w, h, n)| AnnotatedObject {
                    name: n.trim().to_string(),
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                })
                .collect();
            let r = record(objects);
            prop_assert_eq!(parse_voc_xml(write_voc_xml(&r).as_bytes()).unwrap(), r);
        }
    }
}
