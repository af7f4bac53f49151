use std::io::{BufWriter, Write};

use agpis::pipeline::manifest::{to_manifest, write_manifest, ManifestReader};
use agpis::world::{generate_dataset, Mixture, WorldConfig};

#[test]
fn ten_thousand_lines_stream_without_images() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    let base: Vec<_> = generate_dataset(20, &Mixture::default(), 1, &WorldConfig::default())
        .unwrap()
        .iter()
        .map(|r| to_manifest(r, "ppm"))
        .collect();
    {
        let mut w = BufWriter::new(std::fs::File::create(&path).unwrap());
        for i in 0..10_000 {
            let mut r = base[i % base.len()].clone();
            r.id = i;
            write_manifest(&mut w, [&r]).unwrap();
            if i % 1000 == 999 {
                w.write_all(b"\n").unwrap();
            }
        }
    }
    // No image files exist, so anything that tried to decode them would fail.
    let mut count = 0;
    for (i, rec) in ManifestReader::open(&path).unwrap().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(rec.id, i);
        count += 1;
    }
    assert_eq!(count, 10_000);
    let first = ManifestReader::open(&path).unwrap().next().unwrap().unwrap();
    assert!(first.load(dir.path()).is_err());
}

#[test]
fn bad_line_reports_its_number() {
    let text = "\n{\"id\":1}\n";
    let err = ManifestReader::new(text.as_bytes()).next().unwrap().unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
    assert!(err.is_input_error());
}
