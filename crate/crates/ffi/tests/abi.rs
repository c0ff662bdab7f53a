//! Exercises the C ABI from Rust through raw pointers, and checks that the
//! committed header compiles as standalone C.

use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use dnres_ffi::*;
use dnres_forge::checkpoint::{save_checkpoint, CheckpointMeta};
use dnres_forge::eval::{denoise_image, BorderRule};
use dnres_forge::metrics::{psnr, ssim, SsimParams};
use dnres_forge::network::Network;
use dnres_forge::rng::{stream_rng, StreamRole};
use dnres_forge::tensor::{Shape, Tensor};
use rand::Rng;

fn saved_network(dir: &std::path::Path, blocks: usize) -> (PathBuf, Network<f32>) {
    let mut rng = stream_rng(42, StreamRole::WeightInit, 0);
    let mut net = Network::build_base(&mut rng);
    for _ in 0..blocks {
        net = net.insert_resblock(&mut rng).unwrap();
    }
    let path = dir.join("net.dnrf");
    save_checkpoint(&path, &net, &CheckpointMeta::default()).unwrap();
    (path, net)
}

fn load(path: &std::path::Path) -> *mut DnrNetwork {
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut DnrNetwork = std::ptr::null_mut();
    let status = unsafe { dnr_network_load(cpath.as_ptr(), &mut handle) };
    assert_eq!(status, DnrStatus::Ok, "load failed: {}", last_error());
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dnr_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn random_image(h: usize, w: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream_rng(seed, StreamRole::Synthetic, 3);
    (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn version_is_a_semver_string() {
    let v = unsafe { CStr::from_ptr(dnr_version()) }.to_str().unwrap();
    assert_eq!(v.split('.').count(), 3, "unexpected version {v}");
}

#[test]
fn loaded_handle_reports_counts_and_topology() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_network(dir.path(), 1);
    let net = load(&path);

    let mut buf = [0 as c_char; 16];
    let status = unsafe { dnr_network_topology_id(net, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, DnrStatus::Ok);
    let id = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(id, "dn5");

    let mut layers = 0u32;
    assert_eq!(
        unsafe { dnr_network_conv_layer_count(net, &mut layers) },
        DnrStatus::Ok
    );
    assert_eq!(layers, 5);

    let mut params = 0u64;
    assert_eq!(
        unsafe { dnr_network_param_count(net, 0, &mut params) },
        DnrStatus::Ok
    );
    assert_eq!(params, 75_616);
    assert_eq!(
        unsafe { dnr_network_param_count(net, 1, &mut params) },
        DnrStatus::Ok
    );
    assert_eq!(params, 75_777);

    let mut macs = 0u64;
    assert_eq!(
        unsafe { dnr_network_mac_count(net, 480, 640, &mut macs) },
        DnrStatus::Ok
    );
    assert_eq!(macs, 17_566_924_800 + 5_662_310_400);

    unsafe { dnr_network_free(net) };
}

#[test]
fn denoise_through_the_abi_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, net_direct) = saved_network(dir.path(), 1);
    let net = load(&path);

    let (h, w) = (37, 45);
    let pixels = random_image(h, w, 7);
    let mut out = vec![0.0f32; h * w];
    let status = unsafe {
        dnr_network_denoise(
            net,
            pixels.as_ptr(),
            h,
            w,
            DnrBorder::Replicate,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, DnrStatus::Ok, "{}", last_error());

    let img = Tensor::new(Shape::new(1, 1, h, w), pixels).unwrap();
    let direct = denoise_image(&net_direct, &img, BorderRule::Replicate).unwrap();
    assert_eq!(out, direct.data(), "ABI and library outputs diverge");

    let status = unsafe {
        dnr_network_denoise(
            net,
            direct.data().as_ptr(),
            h,
            w,
            DnrBorder::Reflect,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, DnrStatus::Ok);

    unsafe { dnr_network_free(net) };
}

#[test]
fn degrade_is_seed_deterministic_across_calls() {
    let (h, w) = (24, 24);
    let clean = random_image(h, w, 11);
    let spec = CString::new("poisson-gaussian:0.5").unwrap();

    let mut a = vec![0.0f32; h * w];
    let mut b = vec![0.0f32; h * w];
    let mut c = vec![0.0f32; h * w];
    for (buf, seed) in [(&mut a, 5u64), (&mut b, 5), (&mut c, 6)] {
        let status =
            unsafe { dnr_degrade(spec.as_ptr(), clean.as_ptr(), h, w, seed, buf.as_mut_ptr()) };
        assert_eq!(status, DnrStatus::Ok, "{}", last_error());
    }
    assert_eq!(a, b, "same seed must reproduce bytes");
    assert_ne!(a, c, "different seeds must differ");
    assert_ne!(a, clean, "noise must perturb the image");

    // sigma 0 keeps every byte.
    let identity = CString::new("gaussian:0").unwrap();
    let status =
        unsafe { dnr_degrade(identity.as_ptr(), clean.as_ptr(), h, w, 5, a.as_mut_ptr()) };
    assert_eq!(status, DnrStatus::Ok);
    assert_eq!(a, clean);
}

#[test]
fn metrics_match_the_library_and_identity_anchors() {
    let (h, w) = (16, 16);
    let a = random_image(h, w, 21);
    let b = random_image(h, w, 22);

    let mut v = 0.0f64;
    assert_eq!(
        unsafe { dnr_psnr(a.as_ptr(), a.as_ptr(), a.len(), 1.0, &mut v) },
        DnrStatus::Ok
    );
    assert_eq!(v, f64::INFINITY);
    assert_eq!(
        unsafe { dnr_ssim(a.as_ptr(), a.as_ptr(), h, w, &mut v) },
        DnrStatus::Ok
    );
    assert_eq!(v, 1.0);

    let ta = Tensor::new(Shape::new(1, 1, h, w), a.clone()).unwrap();
    let tb = Tensor::new(Shape::new(1, 1, h, w), b.clone()).unwrap();

    assert_eq!(
        unsafe { dnr_psnr(a.as_ptr(), b.as_ptr(), a.len(), 1.0, &mut v) },
        DnrStatus::Ok
    );
    assert_eq!(v, psnr(&ta, &tb, 1.0).unwrap());

    assert_eq!(
        unsafe { dnr_ssim(a.as_ptr(), b.as_ptr(), h, w, &mut v) },
        DnrStatus::Ok
    );
    assert_eq!(v, ssim(&ta, &tb, &SsimParams::default()).unwrap());
}

#[test]
fn failures_set_statuses_and_messages() {
    let mut handle: *mut DnrNetwork = std::ptr::null_mut();

    let missing = CString::new("/nonexistent/net.dnrf").unwrap();
    let status = unsafe { dnr_network_load(missing.as_ptr(), &mut handle) };
    assert_eq!(status, DnrStatus::IoError);
    assert!(last_error().contains("/nonexistent/net.dnrf"));
    assert!(handle.is_null());

    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.dnrf");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let cpath = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { dnr_network_load(cpath.as_ptr(), &mut handle) },
        DnrStatus::FormatError
    );
    assert!(handle.is_null());

    assert_eq!(
        unsafe { dnr_network_load(std::ptr::null(), &mut handle) },
        DnrStatus::NullArgument
    );
    assert_eq!(
        unsafe { dnr_network_load(missing.as_ptr(), std::ptr::null_mut()) },
        DnrStatus::NullArgument
    );

    let (path, _) = saved_network(dir.path(), 0);
    let net = load(&path);

    // "dn3" plus the terminator needs four bytes.
    let mut tiny = [0 as c_char; 3];
    assert_eq!(
        unsafe { dnr_network_topology_id(net, tiny.as_mut_ptr(), tiny.len()) },
        DnrStatus::InvalidArgument
    );
    assert!(last_error().contains("too small"));

    let clean = random_image(8, 8, 1);
    let mut out = vec![0.0f32; 64];
    let bad_spec = CString::new("salt-pepper:0.1").unwrap();
    assert_eq!(
        unsafe { dnr_degrade(bad_spec.as_ptr(), clean.as_ptr(), 8, 8, 1, out.as_mut_ptr()) },
        DnrStatus::InvalidArgument
    );

    let out_of_range = vec![2.0f32; 64];
    assert_eq!(
        unsafe {
            let spec = CString::new("gaussian:25").unwrap();
            dnr_degrade(spec.as_ptr(), out_of_range.as_ptr(), 8, 8, 1, out.as_mut_ptr())
        },
        DnrStatus::InvalidArgument
    );
    assert!(last_error().contains("outside [0,1]"));

    // 8x8 is below the 11-tap SSIM window.
    let mut v = 0.0f64;
    assert_eq!(
        unsafe { dnr_ssim(clean.as_ptr(), clean.as_ptr(), 8, 8, &mut v) },
        DnrStatus::ShapeMismatch
    );

    assert_eq!(
        unsafe { dnr_network_denoise(net, std::ptr::null(), 8, 8, DnrBorder::Replicate, out.as_mut_ptr()) },
        DnrStatus::NullArgument
    );
    assert!(last_error().contains("input"));

    unsafe { dnr_network_free(net) };
    unsafe { dnr_network_free(std::ptr::null_mut()) };
}

#[test]
fn committed_header_compiles_as_c() {
    let header_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("dnres.h").is_file(), "header not generated");

    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("probe.c");
    std::fs::write(
        &probe,
        "#include <dnres.h>\nint main(void) { return (int)DNR_STATUS_OK + (int)DNR_BORDER_REFLECT; }\n",
    )
    .unwrap();

    let out = std::process::Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&header_dir)
        .arg(&probe)
        .output()
        .expect("cc not available");
    assert!(
        out.status.success(),
        "header failed to compile:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
