use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use statrs::distribution::{ContinuousCDF, Normal};
use vb_core::oracle::*;
use vb_core::volume::{MaskSlice, Slice2D};
use vb_core::Error;

fn rect_mask(h: usize, w: usize, [x0, y0, x1, y1]: [usize; 4]) -> MaskSlice {
    let bits = (0..h * w)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            y0 <= i && i < y1 && x0 <= j && j < x1
        })
        .collect();
    MaskSlice {
        height: h,
        width: w,
        bits,
    }
}

fn quiet() -> StubNoiseConfig {
    StubNoiseConfig {
        jitter_std: 0.0,
        miss_prob: 0.0,
        false_pos_prob: 0.0,
        seed: 3,
    }
}

#[test]
fn zero_noise_stub_returns_the_tight_box() {
    let gt = rect_mask(16, 20, [3, 5, 9, 7]);
    let out = stub_predict(4, &gt, &quiet());
    assert_eq!(
        out,
        vec![BoxPrediction {
            slice_index: 4,
            x0: 3.0,
            y0: 5.0,
            x1: 9.0,
            y1: 7.0,
            confidence: 1.0
        }]
    );
}

#[test]
fn empty_slice_without_false_positives_gives_nothing() {
    let gt = rect_mask(16, 16, [0, 0, 0, 0]);
    let cfg = StubNoiseConfig {
        jitter_std: 2.0,
        ..quiet()
    };
    for d in 0..50 {
        assert!(stub_predict(d, &gt, &cfg).is_empty());
    }
}

#[test]
fn jitter_matches_its_gaussian_and_stays_in_bounds() {
    let (h, w) = (64, 64);
    let tight = [22usize, 20, 42, 44];
    let gt = rect_mask(h, w, tight);
    let cfg = StubNoiseConfig {
        jitter_std: 2.0,
        ..quiet()
    };

    let mut diffs = Vec::with_capacity(10_000);
    for d in 0..10_000 {
        let out = stub_predict(d, &gt, &cfg);
        assert_eq!(out.len(), 1);
        let b = &out[0];
        assert!(b.in_bounds(h, w), "{b:?}");
        diffs.push(b.x0 - tight[0] as f64);
    }

    // one-sample Kolmogorov-Smirnov statistic against N(0, 2)
    diffs.sort_by(f64::total_cmp);
    let n = diffs.len() as f64;
    let reference = Normal::new(0.0, 2.0).unwrap();
    let ks = diffs
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = reference.cdf(x);
            (f - k as f64 / n).abs().max((k as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max);
    // critical value at alpha = 0.01
    assert!(ks < 1.628 / n.sqrt(), "KS statistic {ks}");
}

#[test]
fn stub_is_deterministic_per_slice_and_seed() {
    let gt = rect_mask(32, 32, [10, 10, 20, 18]);
    let cfg = StubNoiseConfig {
        jitter_std: 1.5,
        miss_prob: 0.3,
        false_pos_prob: 0.3,
        seed: 9,
    };
    let a: Vec<_> = (0..40).map(|d| stub_predict(d, &gt, &cfg)).collect();
    let b: Vec<_> = (0..40).map(|d| stub_predict(d, &gt, &cfg)).collect();
    assert_eq!(a, b);
    let other = StubNoiseConfig {
        seed: 10,
        ..cfg.clone()
    };
    let c: Vec<_> = (0..40).map(|d| stub_predict(d, &gt, &other)).collect();
    assert_ne!(a, c);
}

#[test]
fn misses_and_false_positives_follow_their_rates() {
    let gt = rect_mask(32, 32, [10, 10, 20, 18]);
    let cfg = StubNoiseConfig {
        jitter_std: 1.0,
        miss_prob: 0.3,
        false_pos_prob: 0.2,
        seed: 1,
    };
    let n = 4000;
    let (mut hits, mut fps) = (0, 0);
    for d in 0..n {
        for b in stub_predict(d, &gt, &cfg) {
            assert!(b.in_bounds(32, 32));
            // false positives sit on integer coordinates, jittered boxes do not
            if b.x0.fract() == 0.0 && b.y0.fract() == 0.0 {
                assert!(b.confidence <= 0.3);
                fps += 1;
            } else {
                hits += 1;
            }
        }
    }
    let hit_rate = hits as f64 / n as f64;
    let fp_rate = fps as f64 / n as f64;
    assert!((hit_rate - 0.7).abs() < 0.03, "{hit_rate}");
    assert!((fp_rate - 0.2).abs() < 0.03, "{fp_rate}");
}

#[test]
fn invalid_stub_configs_are_rejected() {
    assert!(StubOracle::new(StubNoiseConfig {
        miss_prob: 1.5,
        ..quiet()
    })
    .is_err());
    assert!(StubOracle::new(StubNoiseConfig {
        false_pos_prob: -0.1,
        ..quiet()
    })
    .is_err());
    assert!(StubOracle::new(StubNoiseConfig {
        jitter_std: f64::NAN,
        ..quiet()
    })
    .is_err());
}

#[test]
fn prompt_embeds_the_cues_and_is_stable() {
    let p = default_prompt();
    for cue in [
        "abnormal signal intensities",
        "irregular boundaries",
        "edema-associated gradients",
        "midline asymmetry",
    ] {
        assert!(p.contains(cue), "missing {cue}");
    }
    assert_eq!(p, default_prompt());
    assert!(!p.is_empty() && p.len() <= 2048);
}

#[test]
fn request_rescales_pixels_to_bytes() {
    use base64::Engine as _;
    let slice = Slice2D {
        height: 1,
        width: 3,
        pixels: vec![0.0, 0.5, 1.0],
    };
    let req = OracleRequest::new(&slice, (0.0, 1.0), "p".into(), 2);
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&req.slice_b64)
        .unwrap();
    assert_eq!(bytes, vec![0, 128, 255]);
    assert_eq!((req.width, req.height, req.slice_index), (3, 1, 2));
}

/// Serves one scripted `(status, body)` per connection and forwards each
/// request body it received.
fn mock_server(script: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/predict", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            tx.send(String::from_utf8(req).unwrap()).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn request() -> OracleRequest {
    let slice = Slice2D {
        height: 16,
        width: 20,
        pixels: vec![0.25; 320],
    };
    OracleRequest::new(&slice, (0.0, 1.0), default_prompt(), 7)
}

fn client(url: String, retries: u32) -> RemoteOracle {
    RemoteOracle::new(RemoteConfig {
        endpoint: url,
        retries,
        timeout_ms: 5_000,
    })
}

#[test]
fn remote_fixture_roundtrip() {
    let body = r#"{"boxes":[{"x0":2,"y0":3,"x1":8,"y1":9,"confidence":0.75}]}"#;
    let (url, rx) = mock_server(vec![(200, body.into())]);
    let out = client(url, 0).remote_predict(&request()).unwrap();
    assert_eq!(
        out.boxes,
        vec![BoxPrediction {
            slice_index: 7,
            x0: 2.0,
            y0: 3.0,
            x1: 8.0,
            y1: 9.0,
            confidence: 0.75
        }]
    );
    assert!(out.warnings.is_empty());

    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent["width"], 20);
    assert_eq!(sent["height"], 16);
    assert_eq!(sent["slice_index"], 7);
    assert_eq!(sent["prompt"], default_prompt());
    assert!(sent["slice_b64"].is_string());
}

#[test]
fn inverted_box_is_dropped_with_a_warning() {
    let body = r#"{"boxes":[{"x0":8,"y0":3,"x1":2,"y1":9,"confidence":0.5},{"x0":-4,"y0":1,"x1":40,"y1":5,"confidence":0.5}]}"#;
    let (url, _rx) = mock_server(vec![(200, body.into())]);
    let out = client(url, 0).remote_predict(&request()).unwrap();
    assert_eq!(out.warnings.len(), 1);
    // the second box is clamped to the slice
    assert_eq!(out.boxes.len(), 1);
    assert_eq!((out.boxes[0].x0, out.boxes[0].x1), (0.0, 20.0));
}

#[test]
fn server_errors_exhaust_retries_then_fail_the_slice() {
    let (url, rx) = mock_server(vec![(500, "{}".into()); 3]);
    let err = client(url, 2).remote_predict(&request()).unwrap_err();
    assert!(matches!(err, Error::Oracle { slice_index: 7, .. }), "{err}");
    assert_eq!(rx.try_iter().count(), 3);
}

#[test]
fn retry_recovers_after_transient_failure() {
    let ok = r#"{"boxes":[]}"#;
    let (url, _rx) = mock_server(vec![(500, "{}".into()), (200, ok.into())]);
    let out = client(url, 2).remote_predict(&request()).unwrap();
    assert!(out.boxes.is_empty());
}

#[test]
fn malformed_json_and_bad_confidence_are_rejected() {
    for body in [
        "not json",
        r#"{"boxes":[{"x0":1,"y0":1,"x1":4,"y1":4}]}"#,
        r#"{"boxes":[{"x0":1,"y0":1,"x1":4,"y1":4,"confidence":1.5}]}"#,
    ] {
        let err = parse_response(body, 5, 16, 16).unwrap_err();
        assert!(matches!(err, Error::Oracle { slice_index: 5, .. }), "{err}");
    }
}
