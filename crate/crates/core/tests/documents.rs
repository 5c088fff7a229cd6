use std::io::Write;

use proptest::prelude::*;

use docqa::doc::{read_documents, BBox, Document, Interval, Page, Segment, Source, Word};
use docqa::layout::{render_page, Canvas, INK};

fn arb_box() -> impl Strategy<Value = BBox> {
    (0u16..=1000, 0u16..=1000, 0u16..=1000, 0u16..=1000).prop_map(|(a, b, c, d)| BBox {
        x0: a.min(c),
        y0: b.min(d),
        x1: a.max(c),
        y1: b.max(d),
    })
}

fn arb_page() -> impl Strategy<Value = Page> {
    (prop::collection::vec(("[a-zA-Zé0-9]{1,8}", arb_box()), 1..20), 1usize..4).prop_map(|(words, n_seg)| {
        let n = words.len();
        let n_seg = n_seg.min(n);
        let bounds: Vec<usize> = (0..=n_seg).map(|i| i * n / n_seg).collect();
        let segments: Vec<Segment> = (0..n_seg)
            .map(|i| Segment {
                id: i,
                word_range: Interval::new(bounds[i], bounds[i + 1]),
            })
            .collect();
        let words = words
            .into_iter()
            .enumerate()
            .map(|(i, (text, bbox))| Word {
                text,
                bbox,
                segment_id: bounds.iter().rposition(|&b| b <= i).unwrap().min(n_seg - 1),
            })
            .collect();
        Page {
            width: 200,
            height: 300,
            words,
            segments,
        }
    })
}

proptest! {
    #[test]
    fn document_json_round_trip(pages in prop::collection::vec(arb_page(), 1..3)) {
        let doc = Document { doc_id: "d".into(), source: Source::Synthetic, pages };
        prop_assert!(doc.validate().is_ok(), "{:?}", doc.validate());
        let json = serde_json::to_string(&doc).unwrap();
        let back: Document = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}

#[test]
fn bad_box_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let good = serde_json::to_string(&Document::from_plain_text("a", "x y")).unwrap();
    let bad = r#"{"doc_id":"b","source":"synthetic","pages":[{"width":10,"height":10,"words":[{"text":"x","box":[10,10,5,5],"segment_id":0}],"segments":[{"id":0,"word_range":[0,1]}]}]}"#;
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{good}\n{bad}").unwrap();
    let err = read_documents(&path).unwrap_err().to_string();
    assert!(err.contains("BBox inverted"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}

fn dark(c: &Canvas) -> usize {
    c.pixels.iter().filter(|&&p| p == INK).count()
}

#[test]
fn rendered_ink_equals_box_area() {
    // 100×100 page so normalized units map to pixels by /10 exactly.
    let boxes = [
        [0, 0, 100, 100],
        [200, 0, 300, 50],
        [500, 500, 550, 900],
        [900, 900, 1000, 1000],
        [100, 600, 400, 700],
    ];
    let words: Vec<Word> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Word {
            text: format!("w{i}"),
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            segment_id: 0,
        })
        .collect();
    let page = Page {
        width: 100,
        height: 100,
        segments: vec![Segment {
            id: 0,
            word_range: Interval::new(0, words.len()),
        }],
        words,
    };
    let expected: usize = boxes
        .iter()
        .map(|b| ((b[2] - b[0]) as usize / 10) * ((b[3] - b[1]) as usize / 10))
        .sum();
    let canvas = render_page(&page);
    assert_eq!(dark(&canvas), expected);
    let mut pgm = Vec::new();
    canvas.write_pgm(&mut pgm).unwrap();
    assert!(pgm.starts_with(b"P5\n100 100\n255\n"));
    assert_eq!(pgm.len(), b"P5\n100 100\n255\n".len() + 100 * 100);
}
