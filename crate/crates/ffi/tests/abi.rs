use std::ffi::{CStr, CString};
use std::ptr;

use featureloop_ffi::*;

fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { fl_string_free(s) };
    out
}

fn last_error() -> Option<String> {
    let p = fl_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string())
}

#[test]
fn hash_and_template_checks() {
    let mut out = ptr::null_mut();
    let a = CString::new("a  b ").unwrap();
    assert_eq!(unsafe { fl_content_hash(a.as_ptr(), &mut out) }, FlStatus::Ok);
    assert_eq!(take(out), "c8687a08aa5d6ed2044328fa6a697ab8e96dc34291e8c2034ae8c38e6fcc6d65");

    let missing = CString::new("no slot").unwrap();
    assert_eq!(unsafe { fl_validate_template(missing.as_ptr(), &mut out) }, FlStatus::MissingPlaceholder);
    assert!(last_error().unwrap().contains("placeholder"));
    let dup = CString::new("{raw_text}{raw_text}").unwrap();
    assert_eq!(unsafe { fl_validate_template(dup.as_ptr(), &mut out) }, FlStatus::DuplicatePlaceholder);
    let ok = CString::new("Tags: {raw_text}").unwrap();
    assert_eq!(unsafe { fl_validate_template(ok.as_ptr(), &mut out) }, FlStatus::Ok);
    assert_eq!(take(out).len(), 64);
    assert_eq!(last_error(), None);
}

#[test]
fn null_and_utf8_errors() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fl_content_hash(ptr::null(), &mut out) }, FlStatus::NullPointer);
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { fl_content_hash(bad.as_ptr().cast(), &mut out) }, FlStatus::InvalidUtf8);
    let ok = CString::new("x").unwrap();
    assert_eq!(unsafe { fl_content_hash(ok.as_ptr(), ptr::null_mut()) }, FlStatus::NullPointer);
    unsafe { fl_string_free(ptr::null_mut()) };
    unsafe { fl_memory_close(ptr::null_mut()) };
}

#[test]
fn parse_tags_json() {
    let raw = CString::new("Sports, football ,sports|news,,").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fl_parse_tags(raw.as_ptr(), &mut out) }, FlStatus::Ok);
    assert_eq!(take(out), r#"["Sports","football","sports news"]"#);
    let empty = CString::new("").unwrap();
    assert_eq!(unsafe { fl_parse_tags(empty.as_ptr(), &mut out) }, FlStatus::Ok);
    assert_eq!(take(out), r#"["unspecified"]"#);
}

#[test]
fn metrics() {
    let preds = [0.8, 0.3, 0.6, 0.1];
    let labels = [1u8, 0, 1, 0];
    let mut ce = 0.0;
    assert_eq!(unsafe { fl_cross_entropy(preds.as_ptr(), labels.as_ptr(), 4, &mut ce) }, FlStatus::Ok);
    let expected = -(0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln() + 0.9f64.ln()) / 4.0;
    assert!((ce - expected).abs() < 1e-12);
    let mut r = 0.0;
    assert_eq!(unsafe { fl_rig(preds.as_ptr(), labels.as_ptr(), 4, &mut r) }, FlStatus::Ok);
    assert!((r - (1.0 - expected / 2f64.ln())).abs() < 1e-12);
    let same = [1u8, 1, 1, 1];
    assert_eq!(unsafe { fl_rig(preds.as_ptr(), same.as_ptr(), 4, &mut r) }, FlStatus::DegenerateLabels);
    assert_eq!(unsafe { fl_rig(preds.as_ptr(), labels.as_ptr(), 0, &mut r) }, FlStatus::InvalidArgument);
    let bad = [2u8, 0, 1, 0];
    assert_eq!(unsafe { fl_rig(preds.as_ptr(), bad.as_ptr(), 4, &mut r) }, FlStatus::InvalidArgument);
}

#[test]
fn memory_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.log").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fl_memory_open(path.as_ptr(), &mut h) }, FlStatus::Ok);
    let mut seq = u64::MAX;
    for (i, score) in [0.01, 0.03, -0.02].iter().enumerate() {
        let draft = CString::new(format!(
            r#"{{"prompt_text":"p{i} {{raw_text}}","agent_id":"a1","baseline_rig":0.1,"extended_rig":{},"eval_size":100,"repeats":3}}"#,
            0.1 + score
        ))
        .unwrap();
        assert_eq!(unsafe { fl_memory_append_json(h, draft.as_ptr(), &mut seq) }, FlStatus::Ok);
        assert_eq!(seq, i as u64);
    }
    let failed = CString::new(r#"{"prompt_text":"f {raw_text}","agent_id":"a2","status":"eval_failed"}"#).unwrap();
    assert_eq!(unsafe { fl_memory_append_json(h, failed.as_ptr(), &mut seq) }, FlStatus::Ok);
    let invalid = CString::new(r#"{"prompt_text":"no slot","agent_id":"a2"}"#).unwrap();
    assert_eq!(unsafe { fl_memory_append_json(h, invalid.as_ptr(), &mut seq) }, FlStatus::MissingPlaceholder);
    let garbage = CString::new("{").unwrap();
    assert_eq!(unsafe { fl_memory_append_json(h, garbage.as_ptr(), &mut seq) }, FlStatus::InvalidRecord);

    let mut n = 0;
    assert_eq!(unsafe { fl_memory_len(h, &mut n) }, FlStatus::Ok);
    assert_eq!(n, 4);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fl_memory_top_k_json(h, 2, &mut out) }, FlStatus::Ok);
    let top: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    let seqs: Vec<u64> = top.as_array().unwrap().iter().map(|r| r["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![1, 0]);
    assert_eq!(unsafe { fl_memory_bottom_k_json(h, 1, &mut out) }, FlStatus::Ok);
    assert!(take(out).contains("\"seq\":2"));

    assert_eq!(unsafe { fl_memory_read_since_json(h, 1, &mut out) }, FlStatus::Ok);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&take(out)).unwrap().as_array().unwrap().len(), 2);
    assert_eq!(unsafe { fl_memory_read_since_json(h, -1, &mut out) }, FlStatus::Ok);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&take(out)).unwrap().as_array().unwrap().len(), 4);

    let mut hash = ptr::null_mut();
    let p0 = CString::new("p0 {raw_text}").unwrap();
    unsafe { fl_validate_template(p0.as_ptr(), &mut hash) };
    let id = CString::new(take(hash)).unwrap();
    let mut found = false;
    assert_eq!(unsafe { fl_memory_contains(h, id.as_ptr(), &mut found) }, FlStatus::Ok);
    assert!(found);

    std::fs::OpenOptions::new()
        .append(true)
        .open(dir.path().join("m.log"))
        .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"seq\":4,\"pro"))
        .unwrap();
    let mut dropped = 0;
    assert_eq!(unsafe { fl_memory_recover(h, &mut dropped) }, FlStatus::Ok);
    assert_eq!(dropped, 13);
    unsafe { fl_memory_close(h) };
}
