use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use otaro_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe { otaro_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn quantize(values: &[f64], m: u8, group: usize) -> *mut OtaroTensor {
    let mut t = ptr::null_mut();
    let s = unsafe { otaro_quantize(values.as_ptr(), values.len(), 5, m, group, OtaroRounding::Truncate, &mut t) };
    assert_eq!(s, OtaroStatus::Ok, "{}", last_error());
    t
}

fn decode(t: *const OtaroTensor) -> Vec<f64> {
    let mut n = 0;
    assert_eq!(unsafe { otaro_tensor_len(t, &mut n) }, OtaroStatus::Ok);
    let mut out = vec![0.0; n];
    assert_eq!(unsafe { otaro_dequantize(t, out.as_mut_ptr(), n) }, OtaroStatus::Ok);
    out
}

#[test]
fn quantize_truncate_dequantize() {
    let values = [1.5, 0.375, -0.25, 0.0];
    let t = quantize(&values, 3, 4);
    assert_eq!(decode(t), vec![1.5, 0.25, -0.25, 0.0]);

    let hi = quantize(&values, 8, 4);
    let mut lo = ptr::null_mut();
    assert_eq!(unsafe { otaro_truncate(hi, 3, &mut lo) }, OtaroStatus::Ok);
    assert_eq!(decode(lo), decode(t));
    let mut m = 0;
    assert_eq!(unsafe { otaro_tensor_mantissa_bits(lo, &mut m) }, OtaroStatus::Ok);
    assert_eq!(m, 3);

    let mut exps = [0u8; 1];
    let mut mants = [0u16; 4];
    let s = unsafe { otaro_tensor_planes(t, exps.as_mut_ptr(), 1, mants.as_mut_ptr(), 4) };
    assert_eq!(s, OtaroStatus::Ok);
    assert_eq!(exps, [15]);
    assert_eq!(mants, [6, 1, 1, 0]);

    // widening is refused
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { otaro_truncate(lo, 6, &mut bad) }, OtaroStatus::InvalidArgument);
    assert!(bad.is_null());
    unsafe {
        otaro_tensor_free(t);
        otaro_tensor_free(hi);
        otaro_tensor_free(lo);
        otaro_tensor_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let mut t = ptr::null_mut();
    let s = unsafe { otaro_quantize([f64::NAN].as_ptr(), 1, 5, 4, 64, OtaroRounding::Truncate, &mut t) };
    assert_eq!(s, OtaroStatus::NonFinite);
    assert!(last_error().contains("non-finite"));
    let s = unsafe { otaro_quantize([1e30].as_ptr(), 1, 5, 4, 64, OtaroRounding::Truncate, &mut t) };
    assert_eq!(s, OtaroStatus::ExponentOverflow);
    let s = unsafe { otaro_quantize([1.0].as_ptr(), 1, 5, 0, 64, OtaroRounding::Truncate, &mut t) };
    assert_eq!(s, OtaroStatus::InvalidArgument);
    let s = unsafe { otaro_quantize(ptr::null(), 3, 5, 4, 64, OtaroRounding::Truncate, &mut t) };
    assert_eq!(s, OtaroStatus::NullPointer);
    assert!(t.is_null());

    let small = quantize(&[1.0, 2.0], 4, 64);
    let mut out = [0.0; 1];
    assert_eq!(unsafe { otaro_dequantize(small, out.as_mut_ptr(), 1) }, OtaroStatus::BufferTooSmall);
    unsafe { otaro_tensor_free(small) };

    let msg = unsafe { CStr::from_ptr(otaro_status_str(OtaroStatus::BadFormat)) };
    assert_eq!(msg.to_str().unwrap(), "malformed data");
}

#[test]
fn container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.sefp").to_str().unwrap()).unwrap();
    let a = quantize(&[0.5, -1.25, 3.0], 4, 2);
    let b = quantize(&(0..100).map(|i| i as f64 / 7.0).collect::<Vec<_>>(), 4, 2);
    let names = [CString::new("a").unwrap(), CString::new("layer.b").unwrap()];
    let name_ptrs = [names[0].as_ptr(), names[1].as_ptr()];
    let tensors = [a as *const OtaroTensor, b as *const OtaroTensor];
    assert_eq!(
        unsafe { otaro_container_write(path.as_ptr(), name_ptrs.as_ptr(), tensors.as_ptr(), 2) },
        OtaroStatus::Ok
    );

    let mut c = ptr::null_mut();
    assert_eq!(unsafe { otaro_container_read(path.as_ptr(), &mut c) }, OtaroStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { otaro_container_len(c, &mut n) }, OtaroStatus::Ok);
    assert_eq!(n, 2);

    let mut needed = 0;
    assert_eq!(unsafe { otaro_container_name(c, 1, ptr::null_mut(), 0, &mut needed) }, OtaroStatus::Ok);
    assert_eq!(needed, 8);
    let mut buf = [0 as std::ffi::c_char; 8];
    assert_eq!(unsafe { otaro_container_name(c, 1, buf.as_mut_ptr(), 8, ptr::null_mut()) }, OtaroStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "layer.b");
    let mut short = [0 as std::ffi::c_char; 4];
    assert_eq!(
        unsafe { otaro_container_name(c, 1, short.as_mut_ptr(), 4, ptr::null_mut()) },
        OtaroStatus::BufferTooSmall
    );

    let mut t = ptr::null_mut();
    assert_eq!(unsafe { otaro_container_tensor(c, 1, &mut t) }, OtaroStatus::Ok);
    assert_eq!(decode(t), decode(b));
    assert_eq!(unsafe { otaro_container_tensor(c, 2, &mut t) }, OtaroStatus::InvalidArgument);

    let mixed = quantize(&[1.0], 3, 2);
    let tensors = [a as *const OtaroTensor, mixed as *const OtaroTensor];
    assert_eq!(
        unsafe { otaro_container_write(path.as_ptr(), name_ptrs.as_ptr(), tensors.as_ptr(), 2) },
        OtaroStatus::InvalidArgument
    );

    let junk = dir.path().join("junk.sefp");
    std::fs::write(&junk, b"SEFP\x07").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    let mut c2 = ptr::null_mut();
    assert_eq!(unsafe { otaro_container_read(junk.as_ptr(), &mut c2) }, OtaroStatus::BadFormat);
    assert!(last_error().contains("version"));
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { otaro_container_read(missing.as_ptr(), &mut c2) }, OtaroStatus::Io);

    unsafe {
        otaro_tensor_free(a);
        otaro_tensor_free(b);
        otaro_tensor_free(t);
        otaro_tensor_free(mixed);
        otaro_container_free(c);
    }
}

#[test]
fn memory_estimate() {
    let spec = OtaroModelSpec {
        parameter_count: 8_030_000_000,
        layer_count: 32,
        kv_head_count: 8,
        head_dim: 128,
        context_tokens: 2000,
        kv_fp16: 0,
    };
    let mut e = OtaroMemoryEstimate::default();
    assert_eq!(unsafe { otaro_estimate_memory(&spec, 5, 4, 64, &mut e) }, OtaroStatus::Ok);
    assert_eq!(e.bits_per_weight, 5.078125);
    assert!((e.total_bytes / (1u64 << 30) as f64 - 4.77).abs() / 4.77 < 0.05);
    assert_eq!(unsafe { otaro_estimate_memory(&spec, 5, 0, 64, &mut e) }, OtaroStatus::Ok);
    assert_eq!(e.bits_per_weight, 16.0);
    let zero = OtaroModelSpec { head_dim: 0, ..spec };
    assert_eq!(unsafe { otaro_estimate_memory(&zero, 5, 4, 64, &mut e) }, OtaroStatus::InvalidArgument);
}

#[test]
fn scheduler_protocol() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { otaro_scheduler_new(5, 8, 3, 5.0, &mut s) }, OtaroStatus::Ok);
    let mut picked = Vec::new();
    for _ in 0..6 {
        let mut m = 0;
        assert_eq!(unsafe { otaro_scheduler_select(s, &mut m) }, OtaroStatus::Ok);
        assert_eq!(unsafe { otaro_scheduler_report(s, m, 1.0 / m as f64) }, OtaroStatus::Ok);
        picked.push(m);
    }
    assert_eq!(picked, vec![8, 7, 6, 5, 4, 3]);
    let mut m = 0;
    unsafe { otaro_scheduler_select(s, &mut m) };
    let other = if m == 8 { 7 } else { 8 };
    assert_eq!(unsafe { otaro_scheduler_report(s, other, 1.0) }, OtaroStatus::InvalidState);
    assert_eq!(unsafe { otaro_scheduler_report(s, m, f64::NAN) }, OtaroStatus::NonFinite);
    assert_eq!(unsafe { otaro_scheduler_report(s, 2, 1.0) }, OtaroStatus::InvalidArgument);
    let mut count = 0;
    assert_eq!(unsafe { otaro_scheduler_count(s, m, &mut count) }, OtaroStatus::Ok);
    assert_eq!(count, 2);
    unsafe { otaro_scheduler_free(s) };

    assert_eq!(unsafe { otaro_scheduler_new(5, 8, 3, -1.0, &mut s) }, OtaroStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("otaro.h");
    assert!(header.exists());
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["otaro_quantize", "otaro_container_read", "otaro_estimate_memory", "otaro_scheduler_select"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"otaro.h\"\n\
         int main(void) {\n\
           double v[4] = {1.5, 0.375, -0.25, 0.0};\n\
           OtaroTensor *t = 0;\n\
           if (otaro_quantize(v, 4, 5, 3, 4, OTARO_ROUNDING_TRUNCATE, &t) != OTARO_STATUS_OK) return 1;\n\
           otaro_tensor_free(t);\n\
           return 0;\n\
         }\n",
    )
    .unwrap();
    for (compiler, std) in [("cc", "-std=c99"), ("c++", "-std=c++11")] {
        let lang = if compiler == "c++" { ["-x", "c++"] } else { ["-x", "c"] };
        let status = match Command::new(compiler)
            .args(lang)
            .arg(std)
            .arg("-fsyntax-only")
            .arg("-Wall")
            .arg("-Werror")
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .status()
        {
            Ok(s) => s,
            Err(_) => {
                eprintln!("{compiler} not available, skipping");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}
