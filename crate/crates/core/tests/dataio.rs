use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use factorformer::dataio::*;
use factorformer::train::make_windows;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn load_csv_cases() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "a.csv", "date,value\n2000-01-01,1\n2000-02-01,2\n2000-03-01,3\n");
    let s = load_csv(&ok).unwrap();
    assert_eq!(s.values.len(), 3);
    assert_eq!(s.name, "a");
    let dup = write(dir.path(), "b.csv", "date,value\n2000-01-01,1\n2000-01-01,2\n");
    let err = load_csv(&dup).unwrap_err().to_string();
    assert!(err.contains("2000-01"), "{err}");
    let empty = write(dir.path(), "c.csv", "");
    assert!(load_csv(&empty).is_err());
    let header_only = write(dir.path(), "d.csv", "date,value\n");
    assert!(load_csv(&header_only).is_err());
    let back = write(dir.path(), "e.csv", "date,value\n2000-02-01,1\n2000-01-01,2\n");
    assert!(load_csv(&back).is_err());
}

#[test]
fn log_difference_and_standardization() {
    let a = MacroSeries { name: "a".into(), dates: vec!["2000-01".parse().unwrap(), "2000-02".parse().unwrap()], values: vec![100.0, 110.0] };
    let (_, levels) = align(std::slice::from_ref(&a)).unwrap();
    assert_eq!(levels.get(1, 0), 110.0);
    let t = transform(&[a.clone(), a.clone(), a]).unwrap();
    assert!((t.means[0] - 1.1f64.ln()).abs() < 1e-15);
    assert!((t.means[0] - 0.09531).abs() < 1e-5);
    // a single difference has zero variance
    assert!(t.degenerate[0]);

    let names = ["indpro", "payems", "w875rx1", "cmrmtspl"];
    let series: Vec<MacroSeries> = names.iter().map(|n| load_csv(&fixture(&format!("{n}.csv"))).unwrap()).collect();
    let t = transform(&series).unwrap();
    assert_eq!(t.y.cols(), 4);
    for i in 0..4 {
        let c = t.y.col(i);
        let m = factorformer::stats::mean(&c);
        let sd = factorformer::stats::std_dev(&c);
        assert!(m.abs() < 1e-10);
        assert!((sd - 1.0).abs() < 1e-10);
    }
    let again = transform(&series).unwrap();
    assert_eq!(t, again);
}

#[test]
fn nonpositive_level_is_named() {
    let s = MacroSeries {
        name: "bad".into(),
        dates: vec!["2000-01".parse().unwrap(), "2000-02".parse().unwrap(), "2000-03".parse().unwrap()],
        values: vec![1.0, 0.0, 2.0],
    };
    let err = transform(&[s]).unwrap_err().to_string();
    assert!(err.contains("bad") && err.contains("2000-02"), "{err}");
}

#[test]
fn gaps_and_inner_join() {
    let m = |s: &str| s.parse::<Month>().unwrap();
    let a = MacroSeries { name: "a".into(), dates: vec![m("2000-01"), m("2000-02"), m("2000-03")], values: vec![1.0, 2.0, 3.0] };
    let b = MacroSeries { name: "b".into(), dates: vec![m("2000-02"), m("2000-03"), m("2000-04")], values: vec![5.0, 6.0, 7.0] };
    let (d, l) = align(&[a.clone(), b]).unwrap();
    assert_eq!(d, vec![m("2000-02"), m("2000-03")]);
    assert_eq!(l.row(0), &[2.0, 5.0]);
    let c = MacroSeries { name: "c".into(), dates: vec![m("2000-01"), m("2000-03")], values: vec![1.0, 1.0] };
    assert!(align(&[a, c]).is_err());
}

#[test]
fn split_masks() {
    let dates: Vec<Month> = {
        let mut d = vec!["2000-01".parse::<Month>().unwrap()];
        for _ in 0..23 {
            let next = d.last().unwrap().succ();
            d.push(next);
        }
        d
    };
    let iv = |l, s: &str, e: &str| SplitInterval { label: l, start: s.parse().unwrap(), end: e.parse().unwrap() };
    let spec = SplitSpec {
        intervals: vec![
            iv(SegmentLabel::Train, "2000-01", "2000-12"),
            iv(SegmentLabel::Validation, "2001-01", "2001-06"),
            iv(SegmentLabel::Train, "2001-07", "2001-12"),
        ],
    };
    let masks = apply_split(&dates, &spec).unwrap();
    assert_eq!(masks.train, vec![0..12, 18..24]);
    assert_eq!(masks.val, vec![12..18]);
    assert_eq!(masks.label_of(12), Some(SegmentLabel::Validation));
    let all_train = SplitSpec { intervals: vec![iv(SegmentLabel::Train, "2000-01", "2001-12")] };
    assert!(apply_split(&dates, &all_train).is_err());
    let overlap = SplitSpec {
        intervals: vec![iv(SegmentLabel::Train, "2000-01", "2000-12"), iv(SegmentLabel::Validation, "2000-12", "2001-06")],
    };
    assert!(apply_split(&dates, &overlap).is_err());
}

#[test]
fn fixture_split_and_windows() {
    let names = ["indpro", "payems", "w875rx1", "cmrmtspl"];
    let series: Vec<MacroSeries> = names.iter().map(|n| load_csv(&fixture(&format!("{n}.csv"))).unwrap()).collect();
    let t = transform(&series).unwrap();
    let spec = SplitSpec::load(&fixture("split.csv")).unwrap();
    let masks = apply_split(&t.dates, &spec).unwrap();
    // 2007-2009 recession in validation, 2020 in training
    let idx = |s: &str| t.dates.iter().position(|d| *d == s.parse().unwrap()).unwrap();
    assert_eq!(masks.label_of(idx("2008-10")), Some(SegmentLabel::Validation));
    assert_eq!(masks.label_of(idx("2020-04")), Some(SegmentLabel::Train));
    // tag every period with its segment id and check windows stay inside one
    let mut seg_id = vec![usize::MAX; t.y.rows()];
    for (j, r) in masks.train.iter().chain(&masks.val).enumerate() {
        for i in r.clone() {
            seg_id[i] = j;
        }
    }
    let mut tagged = factorformer::mat::Mat::zeros(t.y.rows(), 1);
    for i in 0..t.y.rows() {
        tagged.set(i, 0, seg_id[i] as f64);
    }
    let prior = vec![0.0; t.y.rows()];
    let all: Vec<_> = masks.train.iter().chain(&masks.val).cloned().collect();
    for ex in make_windows(&tagged, &prior, 9, &all).unwrap() {
        let first = ex.window.get(0, 0);
        assert!(ex.window.col(0).iter().all(|v| *v == first));
        assert_eq!(ex.target[0], first);
    }
    let bands = load_recessions(&fixture("recessions.csv")).unwrap();
    assert_eq!(bands.len(), 4);
    assert!(in_recession("2020-03".parse().unwrap(), &bands));
}

#[test]
fn recession_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "r.csv", "start,end\n2001-05,2001-03\n");
    assert!(load_recessions(&bad).is_err());
    let ok = write(dir.path(), "r2.csv", "start,end\n2001-03,2001-11\n");
    assert_eq!(load_recessions(&ok).unwrap().len(), 1);
    let empty = write(dir.path(), "r3.csv", "");
    assert!(load_recessions(&empty).is_err());
}

/// One-shot HTTP server on the loopback interface.
fn serve_once(status: &'static str, body: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        while reader.read_line(&mut line).unwrap() > 0 {
            if line == "\r\n" {
                break;
            }
            line.clear();
        }
        let resp = format!("HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
        stream.write_all(resp.as_bytes()).unwrap();
    });
    format!("http://{addr}/data.csv")
}

#[test]
fn fetch_requires_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fetch_remote("http://127.0.0.1:9/x", &dir.path().join("x.csv"), false).is_err());
}

#[test]
fn fetch_success_and_http_error() {
    let dir = tempfile::tempdir().unwrap();
    let url = serve_once("200 OK", "date,value\n2000-01-01,1\n");
    let dest = dir.path().join("got.csv");
    fetch_remote(&url, &dest, true).unwrap();
    assert!(std::fs::metadata(&dest).unwrap().len() > 0);
    let url = serve_once("404 Not Found", "missing");
    match fetch_remote(&url, &dir.path().join("nf.csv"), true) {
        Err(factorformer::Error::Http { status }) => assert_eq!(status, 404),
        other => panic!("expected HTTP error, got {other:?}"),
    }
}

#[test]
fn fetch_unreachable_host() {
    let dir = tempfile::tempdir().unwrap();
    // bind then drop to obtain a closed local port
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = fetch_remote(&format!("http://127.0.0.1:{port}/x"), &dir.path().join("x.csv"), true).unwrap_err();
    assert_eq!(err.kind(), "network");
}
